"""Drift fields, Euler solvers, flow tables, and variational equations.

A :class:`DriftField` wraps a vector field ``b(t, x)`` together with the
metadata the rest of the library needs: its kind (``analytic``,
``singular_power``, ``peano``, ``mollified``), an optional spatial gradient,
and a bounded box over which mixed norms are computed.  Drifts with a genuine
singularity are never fed to the solver directly — they are smoothed first by
:func:`mollify` (Gaussian convolution in space), which is also how the strong
solution is constructed in theory: as the limit of solutions with smoothed
drifts along a common noise.

The solver is plain explicit Euler.  Comparative studies (mollification
levels, step halving, bump tests) always reuse one ensemble of driving paths
so that differences measure the scheme, not the noise.

Gradient flows along a solved path satisfy the linear matrix recursion
``J_{i+1} = (I + dt * grad_b(t_i, X_i)) J_i`` started from the identity at a
grid node ``theta``; expanding the product in powers of ``dt`` gives the
discrete analogue of the iterated-integral (Picard) series, exposed to order
three with a simplex-volume tail majorant ``sum_{m>3} M^m / m!``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import fraccalc, quadrature, regimes
from .errors import DomainError

KINDS = ("analytic", "singular_power", "peano", "mollified")

#: mollified fields fall back to the base field this many widths past the
#: spline window / support; the Gaussian tail there is far below 1e-9
_FAR_FIELD_WIDTHS = 12.0


# ---------------------------------------------------------------------------
# drift fields


@dataclass(frozen=True)
class DriftField:
    """A vector field b(t, x) with kind metadata and an optional gradient.

    ``eval(t, x)`` takes a scalar time and an array of shape (..., dim) and
    returns the same shape; ``grad(t, x)`` returns (..., dim, dim) and exists
    exactly for the ``analytic`` and ``mollified`` kinds.  ``domain_box`` is a
    tuple of (lo, hi) pairs, one per axis, bounding norm computations.
    """

    kind: str
    dim: int
    label: str
    domain_box: tuple
    params: tuple  # kind-specific ((name, value), ...) pairs
    time_dependent: bool
    eval_fn: object = field(repr=False)
    grad_fn: object = field(repr=False, default=None)
    base: object = field(repr=False, default=None)
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown drift kind {self.kind!r}")
        if self.dim < 1:
            raise DomainError(f"dim must be positive, got {self.dim}")
        if len(self.domain_box) != self.dim:
            raise DomainError(
                f"domain_box has {len(self.domain_box)} axes, expected {self.dim}"
            )

    @property
    def has_grad(self):
        return self.grad_fn is not None

    def eval(self, t, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise DomainError(
                f"x must have trailing axis of size {self.dim}, got shape {x.shape}"
            )
        return self.eval_fn(float(t), x)

    def grad(self, t, x):
        if self.grad_fn is None:
            raise DomainError(
                f"gradient undefined for kind {self.kind!r}; mollify first"
            )
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise DomainError(
                f"x must have trailing axis of size {self.dim}, got shape {x.shape}"
            )
        return self.grad_fn(float(t), x)

    def param(self, name):
        for key, value in self.params:
            if key == name:
                return value
        raise KeyError(name)


def analytic_drift(
    fn,
    grad=None,
    dim=1,
    label="analytic",
    domain_box=None,
    time_dependent=True,
):
    """Wrap a smooth callable (and optionally its spatial Jacobian)."""
    if domain_box is None:
        domain_box = ((-1.0, 1.0),) * dim
    return DriftField(
        kind="analytic",
        dim=dim,
        label=label,
        domain_box=tuple(tuple(map(float, ax)) for ax in domain_box),
        params=(),
        time_dependent=bool(time_dependent),
        eval_fn=fn,
        grad_fn=grad,
    )


def constant_drift(c, dim=1, domain_box=None):
    """b(t, x) = c, a constant vector."""
    vec = np.broadcast_to(np.asarray(c, dtype=float), (dim,)).copy()

    def fn(t, x):
        return np.broadcast_to(vec, x.shape).copy()

    def grad(t, x):
        return np.zeros(x.shape + (dim,))

    return analytic_drift(
        fn,
        grad,
        dim=dim,
        label=f"constant_{vec.tolist()}",
        domain_box=domain_box,
        time_dependent=False,
    )


def linear_drift(rate, dim=1, domain_box=None):
    """b(t, x) = -rate * x with exact gradient -rate * I."""
    rate = float(rate)

    def fn(t, x):
        return -rate * x

    def grad(t, x):
        return np.broadcast_to(-rate * np.eye(dim), x.shape + (dim,)).copy()

    return analytic_drift(
        fn,
        grad,
        dim=dim,
        label=f"linear_rate_{rate}",
        domain_box=domain_box,
        time_dependent=False,
    )


def singular_power_drift(gamma, cutoff=1.0, dim=1):
    """b(t, x) = |x|^(-gamma) on {|x| <= cutoff}, zero outside (scalar field).

    Genuinely singular at the origin; only dim = 1 is supported and the field
    must be mollified before it can enter a solver.
    """
    gamma = float(gamma)
    cutoff = float(cutoff)
    if dim != 1:
        raise DomainError("singular_power drift is one-dimensional")
    if not (0.0 < gamma < 1.0):
        raise DomainError(f"gamma must lie in (0, 1), got {gamma}")
    if cutoff <= 0.0:
        raise DomainError(f"cutoff must be positive, got {cutoff}")

    def fn(t, x):
        r = np.abs(x)
        with np.errstate(divide="ignore"):
            out = np.where(r <= cutoff, r**-gamma, 0.0)
        return out

    return DriftField(
        kind="singular_power",
        dim=1,
        label=f"singular_power_gamma_{gamma}",
        domain_box=((-cutoff, cutoff),),
        params=(("gamma", gamma), ("cutoff", cutoff)),
        time_dependent=False,
        eval_fn=fn,
    )


def peano_drift(alpha, dim=1, domain_box=((-4.0, 4.0),)):
    """b(t, x) = sign(x) |x|^alpha — continuous but non-Lipschitz at 0.

    The unperturbed ODE from this field has infinitely many solutions, which
    makes it the canonical regularization-by-noise demo.  dim = 1 only.
    """
    alpha = float(alpha)
    if dim != 1:
        raise DomainError("peano drift is one-dimensional")
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")

    def fn(t, x):
        return np.sign(x) * np.abs(x) ** alpha

    return DriftField(
        kind="peano",
        dim=1,
        label=f"peano_alpha_{alpha}",
        domain_box=tuple(tuple(map(float, ax)) for ax in domain_box),
        params=(("alpha", alpha),),
        time_dependent=False,
        eval_fn=fn,
    )


# ---------------------------------------------------------------------------
# mollification


def _hermite_rule(dim):
    """Product Gauss-Hermite nodes/weights for E f(Z), Z ~ N(0, I_dim)."""
    order = {1: 40, 2: 24}.get(dim, 12)
    x, w = np.polynomial.hermite.hermgauss(order)
    z = math.sqrt(2.0) * x
    w = w / math.sqrt(math.pi)
    if dim == 1:
        return z[:, None], w
    grids = np.meshgrid(*([z] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.ones(nodes.shape[0])
    wg = np.meshgrid(*([w] * dim), indexing="ij")
    for g in wg:
        weights = weights * g.ravel()
    return nodes, weights


def _mollify_smooth(base, eps):
    """Gauss-Hermite convolution for bases that are already finite everywhere."""
    nodes, weights = _hermite_rule(base.dim)

    def fn(t, x):
        shifted = x[..., None, :] - eps * nodes
        vals = base.eval(t, shifted.reshape(-1, base.dim))
        vals = vals.reshape(shifted.shape)
        return np.einsum("...ok,o->...k", vals, weights)

    if base.has_grad:

        def grad(t, x):
            shifted = x[..., None, :] - eps * nodes
            vals = base.grad(t, shifted.reshape(-1, base.dim))
            vals = vals.reshape(shifted.shape + (base.dim,))
            return np.einsum("...okl,o->...kl", vals, weights)

    else:

        def grad(t, x):
            # kernel derivative: grad b_eps(x) = -E[b(x - eps Z) Z^T] / eps
            shifted = x[..., None, :] - eps * nodes
            vals = base.eval(t, shifted.reshape(-1, base.dim))
            vals = vals.reshape(shifted.shape)
            return -np.einsum("...ok,oi,o->...ki", vals, nodes, weights) / eps

    return fn, grad


def _gaussian_pdf(u, eps):
    return np.exp(-0.5 * (u / eps) ** 2) / (math.sqrt(2.0 * math.pi) * eps)


def _mollify_power_spline(base, eps):
    """Singularity-aware convolution on a fine grid, spline in between.

    Writes the convolution of an even/odd power-law profile against the
    Gaussian kernel as an integral over y > 0 with the power factor handled
    by a dedicated first cell, then Gauss-Legendre panels at the kernel's own
    scale.  The resulting table is interpolated by a cubic spline inside the
    window and handed back to the base field (exactly zero for the compactly
    supported kind) outside it.
    """
    if base.kind == "singular_power":
        expo = -base.param("gamma")
        support = base.param("cutoff")
        odd = False
        window = support + _FAR_FIELD_WIDTHS * eps
        reach = support  # the profile vanishes beyond the cutoff
    else:  # peano
        expo = base.param("alpha")
        odd = True
        lo, hi = base.domain_box[0]
        window = max(abs(lo), abs(hi)) + _FAR_FIELD_WIDTHS * eps
        reach = window + _FAR_FIELD_WIDTHS * eps

    n_nodes = int(math.ceil(window / (eps / 8.0)))
    xs = np.linspace(-window, window, 2 * n_nodes + 1)

    def kernel_pair(y):
        # y has shape (n_x, order): kernel at x - y and x + y
        minus = _gaussian_pdf(xs[:, None] - y, eps)
        plus = _gaussian_pdf(xs[:, None] + y, eps)
        return minus - plus if odd else minus + plus

    first_cell = min(0.5 * eps, reach)
    vals = quadrature.power_cell_lower(
        kernel_pair, np.zeros_like(xs), np.full_like(xs, first_cell), expo
    )
    edges = np.arange(first_cell, reach + 0.5 * eps, 0.5 * eps)
    if edges[-1] < reach:
        edges = np.append(edges, reach)
    for a, b_edge in zip(edges[:-1], edges[1:]):
        y_nodes, y_weights = quadrature.gl_nodes(a, b_edge)
        profile = y_nodes**expo
        vals = vals + np.sum(kernel_pair(y_nodes) * profile * y_weights, axis=-1)

    spline = CubicSpline(xs, vals)
    dspline = spline.derivative()
    lo, hi = xs[0], xs[-1]

    if base.kind == "singular_power":

        def far_value(t, x):
            return np.zeros_like(x)

        def far_slope(x):
            return np.zeros_like(x)

    else:
        alpha = base.param("alpha")

        def far_value(t, x):
            return base.eval(t, x)

        def far_slope(x):
            return alpha * np.abs(x) ** (alpha - 1.0)

    def fn(t, x):
        inside = (x >= lo) & (x <= hi)
        out = np.where(inside, spline(np.clip(x, lo, hi)), far_value(t, x))
        return out

    def grad(t, x):
        inside = (x >= lo) & (x <= hi)
        slope = np.where(inside, dspline(np.clip(x, lo, hi)), far_slope(x))
        return slope[..., None]

    return fn, grad


def mollify(b, eps):
    """Gaussian mollification of a drift field at spatial scale ``eps``.

    The result is a smooth ``mollified`` field carrying a gradient.  Smooth
    bases are convolved by Gauss-Hermite quadrature; power-law bases go
    through a singularity-aware fine-grid convolution with spline evaluation
    in between (see ``_mollify_power_spline``).
    """
    eps = float(eps)
    if eps <= 0.0:
        raise DomainError(f"mollification scale must be positive, got {eps}")
    if b.kind in ("analytic", "mollified"):
        fn, grad = _mollify_smooth(b, eps)
    elif b.kind in ("singular_power", "peano"):
        fn, grad = _mollify_power_spline(b, eps)
    else:  # pragma: no cover - KINDS is closed
        raise DomainError(f"cannot mollify kind {b.kind!r}")
    return DriftField(
        kind="mollified",
        dim=b.dim,
        label=f"{b.label}_mollified_{eps:g}",
        domain_box=b.domain_box,
        params=b.params,
        time_dependent=b.time_dependent,
        eval_fn=fn,
        grad_fn=grad,
        base=b,
        epsilon=eps,
    )


# ---------------------------------------------------------------------------
# mixed norms


def _closed_power_integral(expo, lo, hi):
    """integral of |x|^expo over [lo, hi] for expo > -1 (may straddle 0)."""

    def anti(x):
        return math.copysign(abs(x) ** (expo + 1.0) / (expo + 1.0), x)

    return anti(hi) - anti(lo)


def _space_norm_closed(b, p, box):
    """Exact L^p_x norm over the box for the raw power-law kinds."""
    lo, hi = box[0]
    if b.kind == "singular_power":
        gamma = b.param("gamma")
        cutoff = b.param("cutoff")
        if p == math.inf or gamma * p >= b.dim:
            raise DomainError(
                f"L^p norm infinite: gamma*p = {gamma * p} >= d = "
                f"{b.dim}; the power-law drift needs gamma*p < d"
            )
        lo_eff, hi_eff = max(lo, -cutoff), min(hi, cutoff)
        if lo_eff >= hi_eff:
            return 0.0
        return _closed_power_integral(-gamma * p, lo_eff, hi_eff) ** (1.0 / p)
    alpha = b.param("alpha")
    if p == math.inf:
        return max(abs(lo), abs(hi)) ** alpha
    return _closed_power_integral(alpha * p, lo, hi) ** (1.0 / p)


def _space_norm_lattice(b, t, p, box, resolution):
    """Tensor-trapezoid L^p_x norm of |b(t, .)| over the box."""
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    if b.dim == 1:
        x = axes[0][:, None]
    else:
        grids = np.meshgrid(*axes, indexing="ij")
        x = np.stack(grids, axis=-1)
    speed = np.linalg.norm(b.eval(t, x), axis=-1)
    if p == math.inf:
        return float(np.max(speed))
    integrand = speed**p
    for axis in reversed(range(b.dim)):
        integrand = np.trapezoid(integrand, axes[axis], axis=axis)
    return float(integrand) ** (1.0 / p)


def lpq_norm(b, p, q, box=None, *, T=1.0, resolution=2001, n_time=33):
    """Mixed norm (int_0^T ||b(t, .)||_{L^p(box)}^q dt)^(1/q).

    ``q = inf`` takes the essential sup over the time grid.  Raw power-law
    kinds are integrated in closed form (an infinite norm raises, naming the
    violated integrability); everything else goes through a tensor-trapezoid
    lattice, so ``resolution`` must resolve the smallest feature (e.g. the
    mollification scale).
    """
    if p < 1.0 or q < 1.0:
        raise DomainError(f"p and q must lie in [1, inf], got p={p}, q={q}")
    box = tuple(tuple(map(float, ax)) for ax in (box or b.domain_box))
    if len(box) != b.dim:
        raise DomainError(f"box has {len(box)} axes, expected {b.dim}")

    if b.kind in ("singular_power", "peano"):
        space = lambda t: _space_norm_closed(b, p, box)  # noqa: E731
    else:
        space = lambda t: _space_norm_lattice(b, t, p, box, resolution)  # noqa: E731

    if not b.time_dependent:
        value = space(0.0)
        if q == math.inf:
            return value
        return value * T ** (1.0 / q)
    ts = np.linspace(0.0, T, n_time)
    norms = np.array([space(t) for t in ts])
    if q == math.inf:
        return float(np.max(norms))
    return float(np.trapezoid(norms**q, ts) ** (1.0 / q))


# ---------------------------------------------------------------------------
# Euler solver


def _require_solvable(b):
    if b.kind in ("singular_power", "peano"):
        raise DomainError(
            f"drift kind {b.kind!r} is singular; mollify(b, eps) before solving"
        )


def _broadcast_x0(x0, n_paths, dim):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = np.full((n_paths, dim), float(x0))
    elif x0.shape == (dim,):
        x0 = np.tile(x0, (n_paths, 1))
    elif x0.shape != (n_paths, dim):
        raise DomainError(
            f"x0 must be scalar, ({dim},), or ({n_paths}, {dim}); got {x0.shape}"
        )
    return x0.copy()


def _euler_on(times, increments, b, x0):
    """Explicit Euler along given increment arrays (n_paths, n_steps, d)."""
    n_paths, n_steps, dim = increments.shape
    x = _broadcast_x0(x0, n_paths, dim)
    out = np.empty((n_paths, n_steps + 1, dim))
    out[:, 0] = x
    dts = np.diff(times)
    # overflow on a diverging path is reported once, through the solver's own
    # warning, not as per-step numpy noise
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_steps):
            out[:, i + 1] = (
                out[:, i] + b.eval(times[i], out[:, i]) * dts[i] + increments[:, i]
            )
    return out


def euler_solve(ensemble, b, x0):
    """Explicit Euler: X_{i+1} = X_i + b(t_i, X_i) dt + (B_{i+1} - B_i).

    ``x0`` may be a scalar, a (d,) point, or per-path (n_paths, d) initial
    values.  Paths that leave the finite range stay non-finite from that
    point on and are reported through a single warning; ``finite_path_mask``
    recovers the clean ones.
    """
    _require_solvable(b)
    if b.dim != ensemble.d:
        raise DomainError(f"drift dim {b.dim} != ensemble dim {ensemble.d}")
    paths = _euler_on(ensemble.grid.times, ensemble.increments, b, x0)
    bad = int(np.sum(~np.isfinite(paths).all(axis=(1, 2))))
    if bad:
        warnings.warn(f"{bad} path(s) left the finite range", RuntimeWarning)
    return paths


def finite_path_mask(paths):
    """Boolean mask of paths that stayed finite throughout."""
    return np.isfinite(paths).all(axis=tuple(range(1, paths.ndim)))


# ---------------------------------------------------------------------------
# flow tables


@dataclass(frozen=True)
class FlowTable:
    """Solution values X_{s,t}(x) on a lattice of starts, points, and times.

    ``values`` has shape (n_s, n_x, n_paths, n_times, d); entries with
    t < s are NaN (the flow is undefined there), and X_{s,s}(x) = x exactly.
    """

    s_grid: np.ndarray
    t_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray = field(repr=False)
    H: float = 0.5
    seed: int = 0

    def start_index(self, s):
        idx = int(np.argmin(np.abs(self.s_grid - s)))
        if abs(self.s_grid[idx] - s) > 1e-9:
            raise DomainError(f"s = {s} is not on the flow's start grid")
        return idx

    def to_csv(self, path_or_file):
        """Rows (path_id, s, t, x..., X_1..X_d) for all defined (s,t) pairs."""
        d = self.values.shape[-1]
        if d == 1:
            x_cols = ["x"]
        else:
            x_cols = [f"x_{k + 1}" for k in range(d)]
        header = ["path_id", "s", "t"] + x_cols + [f"X_{k + 1}" for k in range(d)]
        own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
        handle = open(path_or_file, "w") if own else path_or_file
        try:
            handle.write(",".join(header) + "\n")
            n_s, n_x, n_paths, n_t, _ = self.values.shape
            for i_s in range(n_s):
                t_start = np.searchsorted(self.t_grid, self.s_grid[i_s] - 1e-12)
                for i_x in range(n_x):
                    point = np.atleast_1d(self.x_grid[i_x])
                    x_txt = ",".join(format(v, ".17g") for v in point)
                    for pid in range(n_paths):
                        for i_t in range(t_start, n_t):
                            vals = self.values[i_s, i_x, pid, i_t]
                            handle.write(
                                f"{pid},{self.s_grid[i_s]:.17g},"
                                f"{self.t_grid[i_t]:.17g},{x_txt},"
                                + ",".join(format(v, ".17g") for v in vals)
                                + "\n"
                            )
        finally:
            if own:
                handle.close()


def solve_flow(ensemble, b, s_grid, x_grid):
    """Euler flow started from every (s, x) pair against the same noise.

    Start times must be grid nodes.  Undefined entries (t < s) are NaN.
    """
    _require_solvable(b)
    times = ensemble.grid.times
    d = ensemble.d
    s_grid = np.atleast_1d(np.asarray(s_grid, dtype=float))
    x_grid = np.asarray(x_grid, dtype=float)
    if x_grid.ndim == 1:
        x_grid = x_grid[:, None]
    if x_grid.shape[-1] != d:
        raise DomainError(f"x_grid must have trailing axis {d}")
    increments = ensemble.increments
    n_paths = ensemble.n_paths
    values = np.full(
        (len(s_grid), len(x_grid), n_paths, len(times), d), np.nan
    )
    for i_s, s in enumerate(s_grid):
        i_node = int(np.argmin(np.abs(times - s)))
        if abs(times[i_node] - s) > 1e-9 * max(1.0, times[-1]):
            raise DomainError(f"start time {s} is not a grid node")
        sub_times = times[i_node:]
        sub_inc = increments[:, i_node:]
        for i_x, x in enumerate(x_grid):
            values[i_s, i_x, :, i_node:] = _euler_on(sub_times, sub_inc, b, x)
    return FlowTable(
        s_grid=s_grid,
        t_grid=times.copy(),
        x_grid=x_grid,
        values=values,
        H=ensemble.grid.H,
        seed=ensemble.seed,
    )


def composition_defect(ensemble, b, s, u, t, x):
    """|phi_{u,t}(phi_{s,u}(x)) - phi_{s,t}(x)| per path, by exact restart.

    The middle value is fed back per path, so for the discrete Euler flow
    this defect is pure floating-point noise — the discrete semigroup
    property holds exactly on grid nodes.
    """
    _require_solvable(b)
    times = ensemble.grid.times
    increments = ensemble.increments
    idx = {}
    for name, val in (("s", s), ("u", u), ("t", t)):
        i = int(np.argmin(np.abs(times - val)))
        if abs(times[i] - val) > 1e-9 * max(1.0, times[-1]):
            raise DomainError(f"{name} = {val} is not a grid node")
        idx[name] = i
    if not idx["s"] <= idx["u"] <= idx["t"]:
        raise DomainError("need s <= u <= t")
    direct = _euler_on(times[idx["s"] :], increments[:, idx["s"] :], b, x)
    mid = _euler_on(
        times[idx["s"] : idx["u"] + 1],
        increments[:, idx["s"] : idx["u"]],
        b,
        x,
    )[:, -1]
    second = _euler_on(times[idx["u"] :], increments[:, idx["u"] :], b, mid)
    stop = idx["t"] - idx["s"]
    stop2 = idx["t"] - idx["u"]
    return np.linalg.norm(second[:, stop2] - direct[:, stop], axis=-1)


def composition_defect_interpolated(flow, s, u, t):
    """Composition defect when the outer flow is read off the x-lattice.

    One-dimensional only: phi_{u,t} is linearly interpolated over x_grid at
    the per-path intermediate values phi_{s,u}(x).  The defect then carries
    the lattice interpolation error on top of the scheme error, and decays
    like C*(dt + dx^2) on a smooth corpus.
    """
    if flow.values.shape[-1] != 1:
        raise DomainError("lattice interpolation route is one-dimensional")
    i_s = flow.start_index(s)
    i_u = flow.start_index(u)
    i_ut = int(np.argmin(np.abs(flow.t_grid - u)))
    i_tt = int(np.argmin(np.abs(flow.t_grid - t)))
    xs = flow.x_grid[:, 0]
    n_x = len(xs)
    n_paths = flow.values.shape[2]
    defect = np.empty((n_x, n_paths))
    for pid in range(n_paths):
        mid = flow.values[i_s, :, pid, i_ut, 0]  # phi_{s,u}(x) over the lattice
        outer = flow.values[i_u, :, pid, i_tt, 0]  # phi_{u,t}(x) over the lattice
        direct = flow.values[i_s, :, pid, i_tt, 0]
        composed = np.interp(mid, xs, outer)
        defect[:, pid] = np.abs(composed - direct)
    return defect


# ---------------------------------------------------------------------------
# variational (Jacobian) equations


def _snap_theta(times, theta):
    idx = int(np.argmin(np.abs(times - theta)))
    if abs(times[idx] - theta) > 1e-12 * max(1.0, times[-1]):
        warnings.warn(
            f"theta = {theta} snapped to grid node {times[idx]:.12g}",
            RuntimeWarning,
        )
    return idx


def _grad_along(path, times, b):
    """G_i = grad b(t_i, X_i) for one path, shape (n_steps+1, d, d)."""
    if not b.has_grad:
        raise DomainError(f"kind {b.kind!r} carries no gradient; mollify first")
    return np.stack([b.grad(times[i], path[i]) for i in range(len(times))])


@dataclass(frozen=True)
class JacobianField:
    """Gradient flow J_{theta,t} of one solved path, for every grid theta.

    Stores the prefix products P_i = (I + dt G_{i-1}) ... (I + dt G_0), from
    which J_{theta,t} = P_t P_theta^{-1}.  J_{theta,theta} = I exactly and
    J is undefined (not zero) for t < theta.
    """

    times: np.ndarray
    prefix: np.ndarray = field(repr=False)
    prefix_inv: np.ndarray = field(repr=False)

    def at(self, theta, t):
        i_theta = _snap_theta(self.times, theta)
        i_t = _snap_theta(self.times, t)
        if i_t < i_theta:
            raise DomainError("J_{theta,t} is undefined for t < theta")
        return self.prefix[i_t] @ self.prefix_inv[i_theta]

    def slice_at(self, t):
        """theta -> J_{theta,t} for all grid theta <= t: (i_t+1, d, d)."""
        i_t = _snap_theta(self.times, t)
        return self.prefix[i_t] @ self.prefix_inv[: i_t + 1]


def jacobian_all(path, times, b):
    """JacobianField of one path (prefix-product representation)."""
    grads = _grad_along(path, times, b)
    d = path.shape[-1]
    n = len(times) - 1
    dts = np.diff(times)
    eye = np.eye(d)
    prefix = np.empty((n + 1, d, d))
    prefix[0] = eye
    for i in range(n):
        prefix[i + 1] = (eye + dts[i] * grads[i]) @ prefix[i]
    prefix_inv = np.linalg.inv(prefix)
    return JacobianField(times=times.copy(), prefix=prefix, prefix_inv=prefix_inv)


def jacobian_ode(path, times, b, theta):
    """J along one path from theta: J_{i+1} = (I + dt grad b(t_i, X_i)) J_i.

    Returns (n_steps+1, d, d) with NaN before the (snapped) theta node and
    the identity exactly at it.
    """
    grads = _grad_along(path, times, b)
    d = path.shape[-1]
    i_theta = _snap_theta(times, theta)
    dts = np.diff(times)
    out = np.full((len(times), d, d), np.nan)
    out[i_theta] = np.eye(d)
    for i in range(i_theta, len(times) - 1):
        out[i + 1] = out[i] + dts[i] * (grads[i] @ out[i])
    return out


def picard_jacobian(path, times, b, theta, order=3):
    """Iterated-integral (Picard) expansion of the gradient flow, truncated.

    The explicit-Euler Jacobian is the ordered product prod (I + dt G_i);
    expanding it in powers of dt gives discrete simplex sums.  This returns
    the series through ``order`` (at most 3) with the same NaN-below-theta
    layout as ``jacobian_ode``.
    """
    if not 1 <= order <= 3:
        raise DomainError(f"order must be 1, 2, or 3, got {order}")
    grads = _grad_along(path, times, b)
    d = path.shape[-1]
    i_theta = _snap_theta(times, theta)
    dts = np.diff(times)
    out = np.full((len(times), d, d), np.nan)
    eye = np.eye(d)
    a1 = np.zeros((d, d))
    a2 = np.zeros((d, d))
    a3 = np.zeros((d, d))
    out[i_theta] = eye
    for i in range(i_theta, len(times) - 1):
        g = dts[i] * grads[i]
        # later factors multiply from the left (simplex ordering)
        a3 = a3 + g @ a2
        a2 = a2 + g @ a1
        a1 = a1 + g
        total = eye + a1
        if order >= 2:
            total = total + a2
        if order >= 3:
            total = total + a3
        out[i + 1] = total
    return out


def picard_tail_bound(path, times, b, theta, order=3):
    """Simplex-volume majorant sum_{m>order} M_t^m / m! of the Picard tail.

    M_t = dt * sum of spectral norms of grad b along the path from theta to
    t; the discrete simplex sums of the expansion are bounded by M^m / m!
    term by term, so this majorant dominates |J - truncated series|.
    """
    grads = _grad_along(path, times, b)
    i_theta = _snap_theta(times, theta)
    dts = np.diff(times)
    norms = np.linalg.norm(grads, ord=2, axis=(-2, -1))
    out = np.full(len(times), np.nan)
    out[i_theta] = 0.0
    m_run = 0.0
    for i in range(i_theta, len(times) - 1):
        m_run += dts[i] * norms[i]
        # stable tail: sum the series directly instead of exp minus polynomial
        term = m_run ** (order + 1) / math.factorial(order + 1)
        tail = 0.0
        m = order + 1
        while term > tail * 1e-18 and m < order + 60:
            tail += term
            m += 1
            term *= m_run / m
        out[i + 1] = tail
    return out


def bump_derivative(ensemble, b, x0, theta, eps):
    """Finite-difference Malliavin probe: bump the noise by eps from theta.

    Adds ``eps`` to every noise component from the (snapped) theta node on,
    one component at a time, re-solves on the same increments, and returns
    (X_bumped - X_base)/eps with shape (n_paths, n_times, d, d); the last
    axis is the bumped component.  theta must be a positive grid node.
    """
    _require_solvable(b)
    times = ensemble.grid.times
    i_theta = _snap_theta(times, theta)
    if i_theta == 0:
        raise DomainError("bump probe needs theta > 0 (the state at 0 is pinned)")
    base = _euler_on(times, ensemble.increments, b, x0)
    d = ensemble.d
    out = np.empty(base.shape + (d,))
    for k in range(d):
        inc = ensemble.increments.copy()
        inc[:, i_theta - 1, k] += eps
        bumped = _euler_on(times, inc, b, x0)
        out[..., k] = (bumped - base) / eps
    return out


# ---------------------------------------------------------------------------
# Malliavin transfer


def malliavin_transfer(times, jac_theta_slice, H):
    """Transfer a theta-indexed gradient field through the kernel adjoint.

    ``jac_theta_slice`` holds J_{theta,t} for fixed t at every grid theta in
    ``times`` (shape (n_nodes, d, d), times[0] = 0).  Each matrix entry is
    pushed through frac_calc's adjoint-kernel transfer in the theta variable;
    a constant field comes back as the kernel column K(t, theta) times that
    constant.
    """
    times = np.asarray(times, dtype=float)
    jac = np.asarray(jac_theta_slice, dtype=float)
    if jac.ndim != 3 or jac.shape[0] != len(times):
        raise DomainError(
            f"expected (n_nodes, d, d) field over {len(times)} nodes, "
            f"got {jac.shape}"
        )
    d = jac.shape[-1]
    flat = jac.reshape(len(times), d * d)
    phi = fraccalc.GridFunction(times, flat)
    out = fraccalc.transfer_KHstar(phi, H, float(times[-1]))
    return out.values.reshape(len(times), d, d)


# ---------------------------------------------------------------------------
# convergence harness


@dataclass(frozen=True)
class ConvergenceReport:
    """Distances and fitted rates from a mollification/step-refinement study.

    ``sup over t`` always means the maximum over grid nodes.  Decay
    assessment is trend-based (Cauchy behaviour): consecutive distances,
    their ratios, and a least-squares slope; no theoretical rate is assumed.
    """

    mollification_levels: tuple
    mollification_distances: tuple
    step_sizes: tuple
    step_distances: tuple
    holder_lags: tuple
    holder_moments: tuple
    fitted_rates: dict
    holder_slope: float

    def decreasing(self, which="mollification"):
        seq = (
            self.mollification_distances
            if which == "mollification"
            else self.step_distances
        )
        return all(b_ < a for a, b_ in zip(seq, seq[1:]))

    def mean_ratio(self, which="mollification"):
        seq = (
            self.mollification_distances
            if which == "mollification"
            else self.step_distances
        )
        pairs = [(a, b_) for a, b_ in zip(seq, seq[1:]) if b_ > 0]
        if not pairs:
            return math.inf
        return float(np.exp(np.mean([np.log(a / b_) for a, b_ in pairs])))

    def to_json_dict(self):
        return {
            "levels": {
                "mollification": list(self.mollification_levels),
                "step": list(self.step_sizes),
            },
            "distances": {
                "mollification": list(self.mollification_distances),
                "step": list(self.step_distances),
            },
            "fitted_rates": dict(self.fitted_rates),
            "holder_slopes": {
                "lags": list(self.holder_lags),
                "moments": list(self.holder_moments),
                "squared_increment_slope": self.holder_slope,
            },
        }


def _sup_distance(a, b_):
    """E max_t |a - b| over paths (Euclidean in the state axis)."""
    gaps = np.linalg.norm(a - b_, axis=-1)
    return float(np.mean(np.max(gaps, axis=-1)))


def _loglog_slope(xs, ys):
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = ys > 0
    if keep.sum() < 2:
        return None
    return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])


def holder_moment_table(paths, times, lags=None):
    """Mean squared increment E|X_{s+l} - X_s|^2 per lag, averaged over s."""
    n_steps = len(times) - 1
    if lags is None:
        lags = []
        k = 1
        while k <= n_steps // 4:
            lags.append(k)
            k *= 2
    moments = []
    for lag in lags:
        diffs = paths[:, lag:] - paths[:, :-lag]
        moments.append(float(np.mean(np.sum(diffs**2, axis=-1))))
    lag_times = [times[lag] - times[0] for lag in lags]
    return tuple(lag_times), tuple(moments)


def convergence_study(
    ensemble,
    b,
    params,
    x0=0.0,
    mollification_levels=(0.5, 0.25, 0.125, 0.0625),
    step_refinements=3,
):
    """Approximation-convergence harness on common noise.

    Refuses parameter tuples outside the strong gate (h1 & h2).  Computes
    E sup_t |X^{eps_k} - X^{eps_{k+1}}| across mollification levels, then
    E sup_t |X^{(dt)} - X^{(dt/2)}| across dyadic step refinements at the
    finest mollification level, and the squared-increment moment table of
    the finest solution.  All runs share the given ensemble.
    """
    regimes.require_strong_regime(params)
    if b.kind == "mollified":
        raise DomainError("pass the base field; the study mollifies internally")
    levels = tuple(float(e) for e in mollification_levels)
    if any(e <= 0 for e in levels) or list(levels) != sorted(levels, reverse=True):
        raise DomainError("mollification levels must be positive and decreasing")
    times = ensemble.grid.times
    increments = ensemble.increments

    fields = {}

    def field_at(eps):
        if eps not in fields:
            fields[eps] = mollify(b, eps)
        return fields[eps]

    moll_dists = []
    prev = None
    finest = None
    for eps in levels:
        current = _euler_on(times, increments, field_at(eps), x0)
        if prev is not None:
            moll_dists.append(_sup_distance(prev, current))
        prev = current
        finest = current

    n_steps = ensemble.grid.n_steps
    if step_refinements > 0 and n_steps % (2**step_refinements) != 0:
        raise DomainError(
            f"n_steps = {n_steps} is not divisible by 2^{step_refinements}"
        )
    fine_field = field_at(levels[-1])
    step_solutions = []
    step_sizes = []
    for j in range(step_refinements + 1):
        stride = 2 ** (step_refinements - j)
        sub_times = times[::stride]
        sub_inc = np.add.reduceat(increments, np.arange(0, n_steps, stride), axis=1)
        step_solutions.append(_euler_on(sub_times, sub_inc, fine_field, x0))
        step_sizes.append(float(sub_times[1] - sub_times[0]))
    step_dists = []
    for j in range(step_refinements):
        coarse = step_solutions[j]
        fine = step_solutions[j + 1][:, ::2]
        step_dists.append(_sup_distance(coarse, fine))

    lags, moments = holder_moment_table(finest, times)
    rates = {
        "mollification": _loglog_slope(levels[1:], moll_dists),
        "step": _loglog_slope(step_sizes[:-1], step_dists),
    }
    slope_window = [
        (lag, mom)
        for lag, mom in zip(lags, moments)
        if times[-1] / len(times) * 4 <= lag <= times[-1] / 4
    ]
    if len(slope_window) >= 2:
        holder_slope = _loglog_slope(*zip(*slope_window))
    else:
        holder_slope = _loglog_slope(lags, moments)
    return ConvergenceReport(
        mollification_levels=levels,
        mollification_distances=tuple(moll_dists),
        step_sizes=tuple(step_sizes),
        step_distances=tuple(step_dists),
        holder_lags=lags,
        holder_moments=moments,
        fitted_rates=rates,
        holder_slope=holder_slope if holder_slope is not None else math.nan,
    )
