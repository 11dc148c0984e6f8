"""Command-line surface: flat key-value configs, experiment dispatch,
JSON/CSV report emission, and figure rendering.

Exit codes: 0 success, 2 config/schema violation, 3 regime refusal
(stderr names the violated inequality), 4 hard numeric error.

Every measured number in ``summary.json`` is emitted as an object carrying
``value`` plus either ``se`` (statistical) or ``tol`` (the tolerance or
stability band it was judged against).  Reruns with identical config and
seed produce byte-identical artifacts except for the wall_time line.
"""

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import driftsde, fbm, girsanov, regimes, verify
from .errors import (
    ConfigError,
    CoupledGeneratorRequired,
    DomainError,
    NumericError,
    RegimeRefusal,
)
from .mc import McSummary, mc_batch  # noqa: F401  (re-exported surface)

SCHEMA_VERSION = 1
EXPERIMENTS = ("simulate", "girsanov", "converge", "flow", "verify", "regimes")
DRIFT_KINDS = ("zero", "constant", "gauss", "singular_power")
VERIFY_CHECKS = (
    "holder",
    "density",
    "moment",
    "simplex",
    "taming",
    "kernel",
    "shuffle",
    "compactness",
    "flow_regularity",
)


def _parse_float(s):
    v = float(s)
    return v


def _parse_floats(s):
    parts = [p for p in str(s).replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def _fmt_float(v):
    return repr(float(v))


def _fmt_floats(vs):
    return ",".join(repr(float(v)) for v in vs)


# name -> (from-text parser, to-text formatter, default)
_SCHEMA = {
    "schema_version": (int, str, SCHEMA_VERSION),
    "experiment": (str, str, "simulate"),
    "H": (_parse_float, _fmt_float, 0.3),
    "T": (_parse_float, _fmt_float, 1.0),
    "n_steps": (int, str, 128),
    "d": (int, str, 1),
    "n_paths": (int, str, 1000),
    "seed": (int, str, 0),
    "drift_kind": (str, str, "zero"),
    "drift_strength": (_parse_float, _fmt_float, 1.0),
    "drift_gamma": (_parse_float, _fmt_float, 0.3),
    "drift_cutoff": (_parse_float, _fmt_float, 1.0),
    "p": (_parse_float, _fmt_float, math.inf),
    "q": (_parse_float, _fmt_float, math.inf),
    "domain_lo": (_parse_float, _fmt_float, -1.0),
    "domain_hi": (_parse_float, _fmt_float, 1.0),
    "x0": (_parse_float, _fmt_float, 0.0),
    "generator_tag": (str, str, "volterra"),
    "mollification_levels": (_parse_floats, _fmt_floats, (0.5, 0.25, 0.125, 0.0625)),
    "output_dir": (str, str, "out"),
    "quad_tol": (_parse_float, _fmt_float, 1e-6),
    "stability_tol": (_parse_float, _fmt_float, 0.25),
    "stat_sigma": (_parse_float, _fmt_float, 4.0),
    "checkpoint_times": (_parse_floats, _fmt_floats, (0.25, 0.5, 0.75, 1.0)),
    "batch_size": (int, str, 64),
    "workers": (int, str, 1),
    "check": (str, str, "all"),
}


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    experiment: str = "simulate"
    H: float = 0.3
    T: float = 1.0
    n_steps: int = 128
    d: int = 1
    n_paths: int = 1000
    seed: int = 0
    drift_kind: str = "zero"
    drift_strength: float = 1.0
    drift_gamma: float = 0.3
    drift_cutoff: float = 1.0
    p: float = math.inf
    q: float = math.inf
    domain_lo: float = -1.0
    domain_hi: float = 1.0
    x0: float = 0.0
    generator_tag: str = "volterra"
    mollification_levels: tuple = (0.5, 0.25, 0.125, 0.0625)
    output_dir: str = "out"
    quad_tol: float = 1e-6
    stability_tol: float = 0.25
    stat_sigma: float = 4.0
    checkpoint_times: tuple = (0.25, 0.5, 0.75, 1.0)
    batch_size: int = 64
    workers: int = 1
    check: str = "all"


def parse_config_text(text):
    """Flat ``key = value`` lines -> raw string dict; unknown keys rejected."""
    raw = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}", field=f"line_{ln}")
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r} (line {ln})", field=key)
        if key in raw:
            raise ConfigError(f"duplicate config key {key!r} (line {ln})", field=key)
        raw[key] = value
    return raw


def config_from_mapping(raw):
    """Typed RunConfig from raw strings (or already-typed values)."""
    kwargs = {}
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", field=key)
        parser = _SCHEMA[key][0]
        try:
            kwargs[key] = parser(value) if isinstance(value, str) else value
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", field=key) from exc
    cfg = RunConfig(**kwargs)
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version {cfg.schema_version} unsupported (this build speaks {SCHEMA_VERSION})",
            field="schema_version",
        )
    return cfg


def config_to_text(config):
    """Serialize so that parse(config_to_text(c)) == c (lossless)."""
    lines = [f"# fracsde run configuration (schema {SCHEMA_VERSION})"]
    for name, (_, fmt, _) in _SCHEMA.items():
        lines.append(f"{name} = {fmt(getattr(config, name))}")
    return "\n".join(lines) + "\n"


def load_config(path=None, overrides=None, env=None):
    """Precedence: defaults < config file < FRACSDE_OUT < CLI flags."""
    env = os.environ if env is None else env
    raw = {}
    if path is not None:
        raw.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    cfg = config_from_mapping(raw)
    if env.get("FRACSDE_OUT"):
        cfg = replace(cfg, output_dir=env["FRACSDE_OUT"])
    if overrides:
        cfg = config_from_mapping({**{k: getattr(cfg, k) for k in _SCHEMA}, **overrides})
    return cfg


def validate(config):
    """Schema-level validation; raises ConfigError naming the field."""
    ck = lambda cond, field, msg: None if cond else _refuse(field, msg)

    def _refuse(field, msg):
        raise ConfigError(msg, field=field)

    ck(config.experiment in EXPERIMENTS, "experiment",
       f"experiment must be one of {EXPERIMENTS}, got {config.experiment!r}")
    ck(0.0 < config.H <= 0.5, "H", f"H must lie in (0, 1/2], got {config.H}")
    ck(config.T > 0, "T", f"T must be positive, got {config.T}")
    ck(config.n_steps >= 2, "n_steps", f"n_steps must be >= 2, got {config.n_steps}")
    ck(config.d >= 1, "d", f"d must be >= 1, got {config.d}")
    ck(config.n_paths >= 1, "n_paths", f"n_paths must be >= 1, got {config.n_paths}")
    ck(config.generator_tag in fbm.GENERATOR_TAGS, "generator_tag",
       f"generator_tag must be one of {fbm.GENERATOR_TAGS}, got {config.generator_tag!r}")
    ck(config.drift_kind in DRIFT_KINDS, "drift_kind",
       f"drift_kind must be one of {DRIFT_KINDS}, got {config.drift_kind!r}")
    levels = config.mollification_levels
    ck(len(levels) >= 1 and all(e > 0 for e in levels)
       and list(levels) == sorted(levels, reverse=True),
       "mollification_levels", "mollification levels must be positive and decreasing")
    ck(all(0.0 < t <= config.T for t in config.checkpoint_times), "checkpoint_times",
       f"checkpoint times must lie in (0, T], got {config.checkpoint_times}")
    ck(config.domain_lo < config.domain_hi, "domain_lo",
       "domain_lo must be below domain_hi")
    ck(config.quad_tol > 0, "quad_tol", "quad_tol must be positive")
    ck(config.batch_size >= 1, "batch_size", "batch_size must be >= 1")
    ck(config.workers >= 1, "workers", "workers must be >= 1")
    if config.experiment == "girsanov":
        ck(config.generator_tag == "volterra", "generator_tag",
           "girsanov needs the coupled Wiener increments; set generator_tag = volterra")
    if config.experiment == "verify" and config.check != "all":
        unknown = [c for c in config.check.split(",") if c not in VERIFY_CHECKS]
        ck(not unknown, "check", f"unknown verify checks {unknown}; choose from {VERIFY_CHECKS}")
    return config


def build_drift(config):
    kind = config.drift_kind
    box = ((config.domain_lo, config.domain_hi),) * config.d
    if kind == "zero":
        return driftsde.constant_drift(0.0, dim=config.d)
    if kind == "constant":
        return driftsde.constant_drift(config.drift_strength, dim=config.d)
    if kind == "gauss":
        a = config.drift_strength

        def fn(t, x):
            return a * np.exp(-(x**2))

        def grad(t, x):
            return (-2.0 * x * a * np.exp(-(x**2)))[..., None]

        return driftsde.analytic_drift(fn, grad=grad, dim=config.d,
                                       label=f"gauss_{a:g}", domain_box=box)
    return driftsde.singular_power_drift(config.drift_gamma, cutoff=config.drift_cutoff,
                                         dim=config.d)


def _requires_admissibility(config):
    return config.experiment == "converge" or (
        config.experiment == "girsanov" and config.drift_kind == "singular_power"
    )


def _regime_params(config):
    return regimes.RegimeParams(H=config.H, d=config.d, p=config.p, q=config.q)


# ---------------------------------------------------------------------------
# emission helpers


def _qty(value, se=None, tol=None):
    """A reported number always carries its SE or the tolerance it met."""
    if (se is None) == (tol is None):
        raise ValueError("exactly one of se/tol must accompany a reported value")
    v = float(value)
    out = {"value": v if math.isfinite(v) else None}
    if se is not None:
        s = float(se)
        out["se"] = s if math.isfinite(s) else None
    else:
        out["tol"] = float(tol)
    return out


def _config_dict(config):
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, float) and math.isinf(v):
            v = "inf"
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _write_json(path, payload):
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (int, float, np.floating)) and not isinstance(v, bool) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _render_figure(path, draw):
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=110)
    try:
        draw(ax)
        fig.tight_layout()
        fig.savefig(path)
    finally:
        plt.close(fig)


def _summary(config, quantities, extra=None, started=None):
    payload = {
        "schema_version": SCHEMA_VERSION,
        "experiment": config.experiment,
        "config": _config_dict(config),
        "quantities": quantities,
        "wall_time": time.perf_counter() - started if started else 0.0,
    }
    if extra:
        payload.update(extra)
    return payload


def _checkpoint_pairs(config):
    ts = sorted(set(config.checkpoint_times))
    return [(s, t) for i, s in enumerate(ts) for t in ts[i:]]


def _sample(config):
    grid = fbm.HurstGrid(config.H, config.T, config.n_steps)
    return fbm.sample(grid, config.d, config.n_paths, seed=config.seed,
                      generator_tag=config.generator_tag)


# ---------------------------------------------------------------------------
# experiment payloads


def _run_simulate(config, out):
    started = time.perf_counter()
    ens = _sample(config)
    fbm.ensemble_to_csv(ens, out / "paths.csv")

    term = np.linalg.norm(ens.B[:, -1, :], axis=-1) ** 2
    est = float(np.mean(term))
    se = float(np.std(term, ddof=1) / math.sqrt(len(term)))

    rows, worst_z = [], 0.0
    for s, t in _checkpoint_pairs(config):
        i = int(np.argmin(np.abs(ens.grid.times - s)))
        j = int(np.argmin(np.abs(ens.grid.times - t)))
        prod = np.sum(ens.B[:, i, :] * ens.B[:, j, :], axis=-1)
        theory = config.d * fbm.covariance(ens.grid.times[i], ens.grid.times[j], config.H)
        m = float(np.mean(prod))
        s_e = float(np.std(prod, ddof=1) / math.sqrt(len(prod)))
        z = (m - theory) / s_e if s_e > 0 else 0.0
        worst_z = max(worst_z, abs(z))
        rows.append((ens.grid.times[i], ens.grid.times[j], theory, m, s_e, z))
    _write_csv(out / "covariance.csv", ("s", "t", "theory", "estimate", "se", "z"), rows)

    def draw(ax):
        show = min(20, config.n_paths)
        for k in range(show):
            ax.plot(ens.grid.times, ens.B[k, :, 0], lw=0.7)
        ax.set_xlabel("t")
        ax.set_ylabel("path value")
        ax.set_title(f"sample paths (first {show}), H={config.H:g}")

    _render_figure(out / "paths.png", draw)

    quantities = {
        "terminal_second_moment": _qty(est, se=se),
        "covariance_worst_abs_z": _qty(worst_z, tol=config.stat_sigma),
    }
    _write_json(out / "summary.json", _summary(config, quantities, started=started))
    return 0


def _run_girsanov(config, out):
    started = time.perf_counter()
    if _requires_admissibility(config):
        regimes.require_strong_regime(_regime_params(config))
    ens = _sample(config)
    b = build_drift(config)
    record = girsanov.girsanov_weight(ens, b)
    kaz = girsanov.kazamaki_diagnostic(ens, b, tuple(config.checkpoint_times))
    summary = girsanov.summarize(record, kaz)
    girsanov.record_to_csv(record, out / "weights.csv")

    rows = []
    for s, t in _checkpoint_pairs(config):
        i = int(np.argmin(np.abs(ens.grid.times - s)))
        j = int(np.argmin(np.abs(ens.grid.times - t)))
        si, tj = ens.grid.times[i], ens.grid.times[j]
        est, se = girsanov.reweighted_expectation(
            record, lambda paths, i=i, j=j: np.sum(paths[:, i, :] * paths[:, j, :], axis=-1)
        )
        theory = config.d * fbm.covariance(si, tj, config.H)
        z = (est - theory) / se if se > 0 else 0.0
        rows.append((si, tj, theory, est, se, z))
    _write_csv(out / "reweighted_covariance.csv", ("s", "t", "theory", "estimate", "se", "z"), rows)

    xi = record.xi[np.isfinite(record.xi)]

    def draw(ax):
        ax.hist(np.log(xi[xi > 0]), bins=40, color="tab:blue", alpha=0.8)
        ax.set_xlabel("log weight")
        ax.set_ylabel("paths")
        ax.set_title("change-of-measure weights")

    _render_figure(out / "weights.png", draw)

    quantities = {
        "mean_weight": _qty(summary["mean_xi"], se=summary["se_xi"]),
        "weight_minus_one_abs_z": _qty(
            abs(summary["mean_xi"] - 1.0) / summary["se_xi"] if summary["se_xi"] else 0.0,
            tol=config.stat_sigma,
        ),
        "kazamaki_sup": _qty(summary["kazamaki_sup"], tol=summary["stability_ratio"]),
        "reweighted_cov_worst_abs_z": _qty(
            max((abs(r[5]) for r in rows), default=0.0), tol=config.stat_sigma
        ),
    }
    extra = {"n_excluded": summary["n_excluded"], "n_paths": summary["n_paths"]}
    _write_json(out / "summary.json", _summary(config, quantities, extra=extra, started=started))
    return 0


def _run_converge(config, out):
    started = time.perf_counter()
    regimes.require_strong_regime(_regime_params(config))
    ens = _sample(config)
    b = build_drift(config)
    report = driftsde.convergence_study(
        ens, b, _regime_params(config), x0=config.x0,
        mollification_levels=config.mollification_levels,
    )
    rows = [("mollification", lv, dist) for lv, dist in
            zip(report.mollification_levels[1:], report.mollification_distances)]
    rows += [("step", sz, dist) for sz, dist in
             zip(report.step_sizes[:-1], report.step_distances)]
    _write_csv(out / "convergence.csv", ("kind", "parameter", "distance"), rows)
    _write_csv(out / "holder_moments.csv", ("lag", "moment"),
               list(zip(report.holder_lags, report.holder_moments)))

    def draw(ax):
        moll = [r for r in rows if r[0] == "mollification"]
        step = [r for r in rows if r[0] == "step"]
        if moll:
            ax.loglog([r[1] for r in moll], [r[2] for r in moll], "o-", label="mollification")
        if step:
            ax.loglog([r[1] for r in step], [r[2] for r in step], "s--", label="step size")
        ax.set_xlabel("level / step")
        ax.set_ylabel("E sup distance")
        ax.legend()
        ax.set_title("approximation convergence")

    _render_figure(out / "convergence.png", draw)

    quantities = {
        "mollification_rate": _qty(report.fitted_rates["mollification"] or math.nan, tol=0.1),
        "step_rate": _qty(report.fitted_rates["step"] or math.nan, tol=0.1),
        "holder_slope": _qty(report.holder_slope, tol=0.05),
    }
    _write_json(out / "summary.json", _summary(config, quantities, started=started))
    return 0


def _flow_drift(config):
    b = build_drift(config)
    if b.kind == "singular_power":
        b = driftsde.mollify(b, min(config.mollification_levels))
    return b


def _run_flow(config, out):
    started = time.perf_counter()
    ens = _sample(config)
    b = _flow_drift(config)
    x_grid = np.linspace(config.domain_lo, config.domain_hi, 9)
    flow = driftsde.solve_flow(ens, b, (0.0,), x_grid)
    flow.to_csv(out / "flow.csv")
    expected = regimes.holder_exponents(_regime_params(config))[0]
    rep = verify.empirical_flow_regularity(
        flow, p1=2.0, expected_time_exponent=expected
    )

    def draw(ax):
        vals = flow.values[0, :, :, -1, 0]
        mean = vals.mean(axis=1)
        se = vals.std(axis=1, ddof=1) / math.sqrt(vals.shape[1])
        ax.fill_between(x_grid, mean - 2 * se, mean + 2 * se, alpha=0.3)
        ax.plot(x_grid, mean, "o-")
        ax.set_xlabel("start point x")
        ax.set_ylabel("mean endpoint")
        ax.set_title("flow map at t = T")

    _render_figure(out / "flow.png", draw)

    slopes = rep.holder_slopes
    quantities = {
        "space_slope": _qty(slopes["space"], tol=0.05),
        "time_slope": _qty(slopes["time"], tol=0.05),
        "sobolev_norm": _qty(rep.sobolev_norms[0], tol=2.0),
    }
    extra = {"flow_verdict": rep.verdict}
    _write_json(out / "summary.json", _summary(config, quantities, extra=extra, started=started))
    return 0


def _run_regimes(config, out):
    started = time.perf_counter()
    report = regimes.classify(_regime_params(config))
    (out / "regimes_report.json").write_text(
        regimes.render_report(report), encoding="utf-8")
    (out / "regimes.csv").write_text(
        regimes.region_sample(config.H, config.d), encoding="utf-8")

    hs = np.linspace(0.02, 0.5, 60)
    invp = np.linspace(0.01, 1.0, 60)
    mask = np.zeros((len(hs), len(invp)))
    for a, h in enumerate(hs):
        for c, ip in enumerate(invp):
            pp = regimes.RegimeParams(H=float(h), d=config.d, p=1.0 / ip, q=config.q)
            mask[a, c] = 1.0 if (regimes.check_h1(pp) and regimes.check_h2(pp)) else 0.0

    def draw(ax):
        ax.imshow(mask, origin="lower", aspect="auto",
                  extent=(invp[0], invp[-1], hs[0], hs[-1]), cmap="Greens")
        ax.plot([1.0 / config.p if config.p != math.inf else 0.0], [config.H], "r*", ms=12)
        ax.set_xlabel("1/p")
        ax.set_ylabel("H")
        ax.set_title(f"strong-regime region (d={config.d}, q={config.q:g})")

    _render_figure(out / "regimes.png", draw)

    tb, sb = report.holder_time_bound, report.holder_space_bound
    quantities = {
        "kappa": _qty(regimes.kappa(_regime_params(config)), tol=0.0),
        "holder_time_bound": _qty(tb if tb is not None else math.nan, tol=0.0),
        "holder_space_bound": _qty(sb if sb is not None else math.nan, tol=0.0),
    }
    extra = {
        "h1": bool(report.h1),
        "h2": bool(report.h2),
        "weak14": bool(report.weak14),
    }
    _write_json(out / "summary.json", _summary(config, quantities, extra=extra, started=started))
    return 0


def _holder_check(config, ens):
    start = time.perf_counter()
    b = _flow_drift(config)
    paths = driftsde.euler_solve(ens, b, config.x0)
    times = ens.grid.times
    lags, moments = driftsde.holder_moment_table(paths, times)
    window = [(l, m) for l, m in zip(lags, moments)
              if times[-1] / len(times) * 4 <= l <= times[-1] / 4]
    if len(window) < 2:
        window = list(zip(lags, moments))
    slope = driftsde._loglog_slope(*zip(*window))
    slope = math.nan if slope is None else slope
    if config.drift_kind == "zero":
        ok = abs(slope - 2 * config.H) <= 0.05
    else:
        expected = regimes.holder_exponents(_regime_params(config))[0]
        ok = expected is not None and slope >= 0.9 * 2 * expected
    return verify.CheckResult(
        check_name="holder_slope",
        verdict="pass" if ok else "fail",
        implied_constant=slope,
        worst_point=(float(lags[0]), float(lags[-1])),
        tolerances={"band": 0.05},
        runtime=time.perf_counter() - start,
        details={"lags": tuple(lags), "moments": tuple(moments)},
    )


def _flow_regularity_check(config, ens):
    start = time.perf_counter()
    b = _flow_drift(config)
    x_grid = np.linspace(config.domain_lo, config.domain_hi, 9)
    flow = driftsde.solve_flow(ens, b, (0.0,), x_grid)
    expected = regimes.holder_exponents(_regime_params(config))[0]
    rep = verify.empirical_flow_regularity(flow, p1=2.0, expected_time_exponent=expected)
    return verify.CheckResult(
        check_name="flow_regularity",
        verdict=rep.verdict,
        implied_constant=rep.details["sobolev_ratio"],
        worst_point=rep.worst_point,
        tolerances={"stability": 2.0},
        runtime=time.perf_counter() - start,
        details=rep.details,
    )


def _run_verify(config, out):
    started = time.perf_counter()
    wanted = VERIFY_CHECKS if config.check == "all" else tuple(config.check.split(","))
    ens = None
    if {"holder", "compactness", "flow_regularity"} & set(wanted):
        ens = _sample(config)

    results = []
    for name in wanted:
        if name == "holder":
            results.append(_holder_check(config, ens))
        elif name == "density":
            results.append(verify.check_density_bound(
                (0.4 * config.T, 0.7 * config.T), config.H, d=config.d, resolution=41))
        elif name == "moment":
            # battery configuration is scale-matched and parameter-free;
            # config.p describes the drift, not this certificate
            bumps = [verify.GaussianBump(0.0, 0.5), verify.GaussianBump(0.0, 0.5)]
            results.append(verify.check_product_moment(
                (0.3 * config.T, 0.6 * config.T), bumps, (0, 0), config.H,
                p=2.0, stability_tol=config.stability_tol))
        elif name == "simplex":
            results.append(verify.check_simplex_identity(
                2, (0.5, 1.5), s_end=config.T, quad_tol=config.quad_tol))
        elif name == "taming":
            results.append(verify.check_taming_bound(-0.5, 0.3, 0.3, t=config.T))
        elif name == "kernel":
            results.append(verify.check_kernel_bounds(config.H, T=config.T))
        elif name == "shuffle":
            results.append(verify.check_shuffle_identity(np.exp, t=config.T, r=2, m=2))
        elif name == "compactness":
            if config.drift_kind != "singular_power":
                continue  # only meaningful for a mollification family
            results.append(verify.check_compactness(
                ens, build_drift(config), config.mollification_levels,
                _regime_params(config), x0=config.x0))
        elif name == "flow_regularity":
            results.append(_flow_regularity_check(config, ens))

    blob = verify.results_to_json(results)
    _write_json(out / "verification_report.json", blob)
    for res in results:
        if res.sweep_rows:
            with (out / f"{res.check_name}_sweep.csv").open("w", encoding="utf-8") as fh:
                verify.sweep_rows_to_csv(res, fh)

    def draw(ax):
        names = [r.check_name for r in results]
        vals = [r.implied_constant for r in results]
        colors = ["tab:green" if r.passed else "tab:red" for r in results]
        ax.barh(range(len(names)), vals, color=colors)
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("implied constant / slope")
        ax.set_title("verification battery")

    _render_figure(out / "verify.png", draw)

    quantities = {
        r.check_name: _qty(
            r.implied_constant,
            tol=next(iter(r.tolerances.values())) if r.tolerances else 0.0,
        )
        for r in results
    }
    extra = {"n_checks": blob["n_checks"], "n_passed": blob["n_passed"]}
    _write_json(out / "summary.json", _summary(config, quantities, extra=extra, started=started))
    return 0


_RUNNERS = {
    "simulate": _run_simulate,
    "girsanov": _run_girsanov,
    "converge": _run_converge,
    "flow": _run_flow,
    "verify": _run_verify,
    "regimes": _run_regimes,
}


def run(config):
    """Validate, dispatch, and write artifacts; returns the exit code."""
    validate(config)
    if _requires_admissibility(config):
        regimes.require_strong_regime(_regime_params(config))
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(config_to_text(config), encoding="utf-8")
    return _RUNNERS[config.experiment](config, out)


# ---------------------------------------------------------------------------
# argument parsing


def _add_flags(parser):
    parser.add_argument("--config", default=None, help="flat key = value config file")
    for name in _SCHEMA:
        if name in ("schema_version", "experiment"):
            continue
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fracsde",
        description="Simulation and certification toolkit for SDEs driven by "
        "rough fractional noise with singular drifts.",
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        _add_flags(sub.add_parser(name, help=f"run the {name} experiment"))
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {
        name: value
        for name, value in vars(args).items()
        if name in _SCHEMA and value is not None
    }
    overrides["experiment"] = args.experiment
    try:
        config = load_config(path=args.config, overrides=overrides)
        return run(config)
    except ConfigError as exc:
        print(f"config error at '{exc.field}': {exc}", file=sys.stderr)
        return 2
    except RegimeRefusal as exc:
        print(f"regime refusal: {exc.violated}", file=sys.stderr)
        return 3
    except (NumericError, CoupledGeneratorRequired, DomainError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
