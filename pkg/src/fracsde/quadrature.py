"""Quadrature helpers for kernels with power-law endpoint behaviour.

Two kinds of rules are provided:

* fixed-order Gauss-Legendre on a cell, with variants that absorb an
  integrable endpoint singularity ``(s - a)**expo`` or ``(b - s)**expo``
  by the substitution ``u = (s - a)**(expo + 1)`` (so the transformed
  integrand is bounded and smooth);
* thin wrappers over :func:`scipy.integrate.quad`, including the QAWS
  algebraic-weight routine for integrands of the form
  ``g(s) * (s - a)**alpha * (b - s)**beta``.
"""

from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import DomainError

#: default Gauss-Legendre order for cell rules
GL_ORDER = 12

#: absolute tolerance requested from adaptive rules, per cell
CELL_ABS_TOL = 1e-8


@lru_cache(maxsize=32)
def _leggauss(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


def gl_nodes(a, b, order=GL_ORDER):
    """Nodes and weights of Gauss-Legendre on [a, b].

    ``a`` and ``b`` may be arrays (broadcast against each other); the node
    axis is appended last.
    """
    x, w = _leggauss(order)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    nodes = mid[..., None] + half[..., None] * x
    weights = half[..., None] * w
    return nodes, weights


def gl_integrate(f, a, b, order=GL_ORDER):
    """Fixed-order Gauss-Legendre integral of a vectorized callable."""
    nodes, weights = gl_nodes(a, b, order)
    return np.sum(f(nodes) * weights, axis=-1)


def power_cell_lower(f, a, b, expo, order=GL_ORDER):
    """``int_a^b (s - a)**expo * f(s) ds`` with ``expo > -1``.

    The power factor is absorbed exactly by ``u = (s - a)**(expo + 1)``;
    only the smooth factor ``f`` is sampled.
    """
    if expo <= -1.0:
        raise DomainError(f"endpoint exponent {expo} is not integrable")
    p = expo + 1.0
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u_nodes, u_weights = gl_nodes(np.zeros_like(a), (b - a) ** p, order)
    s = a[..., None] + u_nodes ** (1.0 / p)
    return np.sum(f(s) * u_weights, axis=-1) / p


def power_cell_upper(f, a, b, expo, order=GL_ORDER):
    """``int_a^b (b - s)**expo * f(s) ds`` with ``expo > -1``."""
    if expo <= -1.0:
        raise DomainError(f"endpoint exponent {expo} is not integrable")
    p = expo + 1.0
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u_nodes, u_weights = gl_nodes(np.zeros_like(b), (b - a) ** p, order)
    s = b[..., None] - u_nodes ** (1.0 / p)
    return np.sum(f(s) * u_weights, axis=-1) / p


def adaptive(f, a, b, *, abs_tol=CELL_ABS_TOL, rel_tol=1e-10, limit=200):
    """Adaptive Gauss-Kronrod integral (scalar endpoints, scalar result)."""
    val, _ = integrate.quad(f, a, b, epsabs=abs_tol, epsrel=rel_tol, limit=limit)
    return val


def adaptive_alg(g, a, b, alpha, beta, *, limit=200):
    """``int_a^b g(s) (s-a)**alpha (b-s)**beta ds`` via the QAWS rule.

    Both exponents must exceed -1; ``g`` must be smooth on ``[a, b]``.
    """
    if alpha <= -1.0 or beta <= -1.0:
        raise DomainError("algebraic-weight exponents must exceed -1")
    val, _ = integrate.quad(g, a, b, weight="alg", wvar=(alpha, beta), limit=limit)
    return val
