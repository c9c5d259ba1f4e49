"""Experiment commands behind the CLI.

Every command takes a :class:`~tcec.config.Config`, writes its artifacts into
an output directory and returns a JSON-serialisable report.  Output bytes
depend only on the config and the seeds: no timestamps, no host details,
floats printed with 17 significant digits, LF line endings.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import json
import logging
import math
import os

import numpy as np

from . import __version__, oracles
from .calibration import (CalibrationCache, ScalingMatrix, collect_cache, grid_search_lambda,
                          lambda_empirical, solve_K, stationarity_residual)
from .config import Config
from .denoiser import (DenoiserSpec, analytic_jacobian, gaussian_gain,
                       jacobian_fd, spectral_norm)
from .errors import ConfigError, ScheduleError
from .latents import l2_norm, mse, psnr_or_inf
from .propagation import (MODES, bound_suite, cumulative_error_closed_form,
                          m_condition, measure_delta, prop_coeffs,
                          telescoped_product)
from .quantizer import (ErrorModel, QuantConfig, QuantizedDenoiser,
                        auto_sigma, random_kstar)
from .schedule import ddim_coeffs, make_linear_beta, make_step_plan
from .solvers import (dpmpp_prop_coeffs, f_theta, run_ddim, run_trajectory,
                      stage_timestep)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step_index", "t", "mse", "psnr", "delta_norm", "eps_norm", "correction_norm")

TOL_TELESCOPE = 1e-12
TOL_RECURSION_SCALAR = 1e-10
TOL_RECURSION_MATRIX = 1e-12
TOL_RECIPROCAL = 1e-12
TOL_K_NUMERIC = 1e-6
TOL_STATIONARITY = 1e-9
TOL_RECOVERY = 1e-6
TOL_DPM_FD = 1e-4


# ---------------------------------------------------------------- building blocks

@dataclass(eq=False)
class Experiment:
    cfg: Config
    schedule: object
    plan: object
    spec: DenoiserSpec
    error: ErrorModel
    qd: QuantizedDenoiser


def build_experiment(cfg: Config, error_kind=None) -> Experiment:
    s = make_linear_beta(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    plan = make_step_plan(s, cfg["sampler.steps"])
    spec = DenoiserSpec(
        kind=cfg["denoiser.kind"],
        shape=(cfg["latent.channels"], cfg["latent.height"], cfg["latent.width"]),
        mean=cfg["denoiser.mean"], scale=cfg["denoiser.scale"], seed=cfg["denoiser.seed"],
        width=cfg["denoiser.width"], depth=cfg["denoiser.depth"],
        output_scale=cfg["denoiser.output_scale"])
    kind = error_kind or cfg["error.kind"]
    if kind == "zero":
        err = ErrorModel("zero")
    elif kind == "gaussian":
        if cfg["error.sigma"] == "auto":
            sigma = auto_sigma(spec, s, plan, cfg["error.sigma_fraction"])
        else:
            sigma = {t: float(cfg["error.sigma"]) for t in plan.steps}
        err = ErrorModel("gaussian", sigma=sigma)
    elif kind == "scaled_output":
        err = ErrorModel("scaled_output", kstar=_kstar(cfg, s, plan, spec))
    else:
        err = ErrorModel("fake_quant", quant=QuantConfig(
            cfg["quant.wbits"], cfg["quant.abits"], cfg["quant.granularity"],
            cfg["quant.group_size"], cfg["quant.symmetric"]))
    return Experiment(cfg, s, plan, spec, err, QuantizedDenoiser(spec, err))


def _kstar(cfg, s, plan, spec):
    path = cfg["error.kstar_file"]
    if not path:
        return random_kstar(plan, spec.shape[0], cfg["error.kstar_scale"], cfg["error.kstar_seed"])
    try:
        K = ScalingMatrix.read(path)
    except OSError as exc:
        raise ConfigError(f"cannot read K* file {path}: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"malformed K* file {path}: {exc}") from None
    if tuple(K.timesteps) != plan.steps or K.channels != spec.shape[0]:
        raise ConfigError(f"K* file {path} does not match the step plan / channel count")
    if np.any(np.abs(K.values) >= 1):
        raise ConfigError("K* entries must lie in (-1, 1)")
    return {t: K.row(t) for t in plan.steps}


def start_latent(spec, seed):
    return np.random.default_rng([int(seed), 0]).standard_normal(spec.shape)


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else fmt(v)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_csv(path, header_lines, columns, rows):
    lines = [f"# {h}" for h in header_lines]
    lines.append("# columns " + ",".join(columns))
    lines.append(",".join(columns))
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    write_text(path, "\n".join(lines) + "\n")


def _csv_header(cfg, **extra):
    head = [f"tcec {__version__}", f"config {cfg.fingerprint()}"]
    head += [f"{k} {v}" for k, v in extra.items()]
    return head


def _rel(a, b):
    den = float(np.linalg.norm(np.ravel(b)))
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    return num / den if den > 0 else num


def propagation_norms(exp: Experiment, states=None):
    """``{t: ||A_t||}`` for every planned step.

    Exact for the affine denoiser (``|a_t + B_t c_t|``); for the MLP the
    spectral norm of ``a I + B J`` with ``J`` by finite differences at the
    supplied states (``states[i]`` is the input of step ``i``).
    """
    s, spec = exp.schedule, exp.spec
    out = {}
    for i, (t, tp) in enumerate(exp.plan.pairs()):
        a, B = ddim_coeffs(s, t, tp)
        if spec.kind == "analytic_gaussian":
            out[t] = abs(a + B * gaussian_gain(spec, s, t))
        else:
            J = jacobian_fd(spec, states[i], t, s).matrix
            out[t] = spectral_norm(a * np.eye(J.shape[0]) + B * J)
    return out


# ---------------------------------------------------------------- schedule

def _probe_lipschitz(exp, seed):
    s, spec = exp.schedule, exp.spec
    if spec.kind == "analytic_gaussian":
        return {t: gaussian_gain(spec, s, t) for t in exp.plan.steps}
    probe = np.random.default_rng([int(seed), 13]).standard_normal(spec.shape)
    return {t: spectral_norm(jacobian_fd(spec, probe, t, s).matrix) for t in exp.plan.steps}


def cmd_schedule(cfg: Config, out_dir, seed: int = 0) -> dict:
    exp = build_experiment(cfg)
    s, plan = exp.schedule, exp.plan
    L = _probe_lipschitz(exp, seed)
    rows = []
    for t, tp in plan.pairs():
        a, B = ddim_coeffs(s, t, tp)
        rows.append({"t": t, "t_prev": tp, "alpha_t": float(s.alpha[t]),
                     "alpha_prev": float(s.alpha[tp]), "a": a, "B": B,
                     "rho_L0": a, "L_probe": L[t], "rho_probe": a + abs(B) * L[t]})
    mcond = {m: m_condition(s, plan, m) for m in (1, 2, 3)}
    cols = ("t", "t_prev", "alpha_t", "alpha_prev", "a", "B", "rho_L0", "L_probe", "rho_probe")
    header = _csv_header(cfg, schedule=s.fingerprint(), plan=plan.fingerprint(s))
    write_csv(os.path.join(out_dir, "schedule.csv"), header, cols,
              [[r[c] for c in cols] for r in rows])
    write_csv(os.path.join(out_dir, "m_condition.csv"), header,
              ("m", "t", "sum_next_abs_B", "abs_B_t", "holds"),
              [[m, t, lhs, rhs, ok] for m, table in mcond.items() for t, lhs, rhs, ok in table])
    report = {
        "tool_version": __version__, "config_fingerprint": cfg.fingerprint(),
        "schedule_fingerprint": s.fingerprint(), "plan_fingerprint": plan.fingerprint(s),
        "steps": rows,
        "rho_lt_one_L0": [r["rho_L0"] < 1 for r in rows],
        "m_condition": {str(m): [{"t": t, "sum_next_abs_B": lhs, "abs_B_t": rhs, "holds": ok}
                                 for t, lhs, rhs, ok in table] for m, table in mcond.items()},
        "m_condition_all_hold": {str(m): all(r[3] for r in table) for m, table in mcond.items()},
    }
    write_text(os.path.join(out_dir, "schedule.json"), dumps(report))
    return report


# ---------------------------------------------------------------- calibrate

def resolve_lambda(cfg, cache, spec_value=None):
    """Return ``(lambda1, provenance, grid_table)``."""
    choice = spec_value if spec_value is not None else cfg["calibration.lambda"]
    if choice == "empirical":
        return lambda_empirical(cache), "empirical", None
    if choice == "grid":
        grid = [float(g) for g in cfg["calibration.grid"].split(",") if g.strip()]
        lam, table = grid_search_lambda(cache, grid, cfg["calibration.holdout"])
        return lam, "grid", table
    try:
        lam = float(choice)
    except ValueError:
        raise ConfigError(f"bad lambda choice {choice!r}") from None
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    return lam, "fixed", None


def cmd_calibrate(cfg: Config, out_dir, seed=None, threads: int = 1, samples=None,
                  lam=None, k_path=None) -> dict:
    exp = build_experiment(cfg)
    s, plan = exp.schedule, exp.plan
    seed = cfg["calibration.seed"] if seed is None else int(seed)
    n = cfg["calibration.samples"] if samples is None else int(samples)
    cache = collect_cache(exp.qd, n, plan, s, seed, cfg["sampler.solver"], threads)
    lambda1, provenance, table = resolve_lambda(cfg, cache, lam)
    log.info("lambda1 = %.6g (%s)", lambda1, provenance)
    K = solve_K(cache, lambda1, schedule_fingerprint=s.fingerprint(),
                plan_fingerprint=plan.fingerprint(s))
    k_path = k_path or os.path.join(out_dir, "K.txt")
    os.makedirs(os.path.dirname(os.path.abspath(k_path)), exist_ok=True)
    K.write(k_path)
    report = {
        "tool_version": __version__, "config_fingerprint": cfg.fingerprint(),
        "k_file": os.path.basename(k_path), "samples": n, "seed": seed,
        "solver": cfg["sampler.solver"], "error_kind": exp.error.kind,
        "lambda1": lambda1, "lambda_provenance": provenance,
        "lambda_grid": None if table is None else [{"lambda1": l, "holdout": v} for l, v in table],
        "stationarity_residual": stationarity_residual(cache, K),
    }
    if exp.error.kind == "scaled_output":
        kstar = np.stack([exp.error.kstar_row(t) for t in plan.steps])
        report["kstar_max_abs_error"] = float(np.max(np.abs(K.values - kstar)))
    write_text(os.path.join(out_dir, "calibrate.json"), dumps(report))
    return report


# ---------------------------------------------------------------- run

@dataclass
class RunSummary:
    config_fingerprint: str
    solver: str
    seeds: list
    variants: dict = field(default_factory=dict)
    comparisons: dict = field(default_factory=dict)
    oracle_residuals: dict = field(default_factory=dict)
    bounds: dict = None
    tool_version: str = __version__

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def load_K(path, exp):
    if not path:
        raise ConfigError("tcec variant needs a K file (--k-file or run.k_file)")
    try:
        K = ScalingMatrix.read(path)
    except OSError as exc:
        raise ConfigError(f"cannot read K file {path}: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"malformed K file {path}: {exc}") from None
    s, plan = exp.schedule, exp.plan
    if tuple(K.timesteps) != plan.steps or (
            K.plan_fingerprint and K.plan_fingerprint != plan.fingerprint(s)):
        raise ConfigError(f"K file {path} does not match the configured schedule/plan")
    if K.channels != exp.spec.shape[0]:
        raise ConfigError("K file channel count does not match latent.channels")
    return K


def trajectory_rows(ref, rec):
    rows = []
    for i, tp in enumerate(rec.plan.timesteps[1:]):
        x, y = ref.states[i + 1], rec.states[i + 1]
        rows.append((i, tp, mse(x, y), psnr_or_inf(x, y), l2_norm(y - x),
                     l2_norm(rec.injected_eps[i]), l2_norm(rec.corrections[i])))
    return rows


def _run_seed(exp, seed, variants, K, out_dir):
    cfg = exp.cfg
    solver = cfg["sampler.solver"]
    x_T = start_latent(exp.spec, seed)
    kw = {"m": cfg.window}
    if solver == "ddim":
        kw["mode"] = cfg["sampler.weights"]
    else:
        kw["lambda_decay"] = cfg["sampler.lambda_decay"]
    ref = run_trajectory(solver, "fp", exp.spec, exp.schedule, exp.plan, x_T, seed)
    results = {}
    for v in variants:
        if v == "fp":
            rec = ref
        elif v == "quant":
            rec = run_trajectory(solver, v, exp.qd, exp.schedule, exp.plan, x_T, seed)
        else:
            rec = run_trajectory(solver, v, exp.qd, exp.schedule, exp.plan, x_T, seed, K=K, **kw)
        rows = trajectory_rows(ref, rec)
        name = f"{solver}_{v}_seed{seed}.csv"
        write_csv(os.path.join(out_dir, name),
                  _csv_header(cfg, solver=solver, variant=v, seed=seed), CSV_COLUMNS, rows)
        results[v] = {"file": name, "rows": rows, "final": rec.final}
    return seed, results


def cmd_run(cfg: Config, out_dir, variants=None, solver=None, steps=None, seeds=None,
            k_file=None, threads: int = 1, svg=None) -> dict:
    over = {}
    if solver:
        over["sampler__solver"] = solver
    if steps:
        over["sampler__steps"] = int(steps)
    if variants:
        over["run__variants"] = ",".join(variants) if not isinstance(variants, str) else variants
    if seeds is not None:
        over["run__seeds"] = seeds if isinstance(seeds, str) else ",".join(map(str, seeds))
    if over:
        cfg = cfg.with_overrides(**over)
    exp = build_experiment(cfg)
    variants = cfg.variants
    K = None
    if "tcec" in variants:
        K = load_K(k_file or cfg["run.k_file"], exp)
    os.makedirs(out_dir, exist_ok=True)
    seeds = cfg.seeds
    job = lambda sd: _run_seed(exp, sd, variants, K, out_dir)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            merged = dict(pool.map(job, seeds))
    else:
        merged = dict(job(sd) for sd in seeds)

    summary = RunSummary(cfg.fingerprint(), cfg["sampler.solver"], list(seeds))
    for v in variants:
        per_seed = [merged[sd][v] for sd in seeds]
        finals = [r["rows"][-1] for r in per_seed]
        curves = np.array([[row[4] for row in r["rows"]] for r in per_seed])
        summary.variants[v] = {
            "files": [r["file"] for r in per_seed],
            "final_mse": [f[2] for f in finals],
            "final_psnr": [f[3] for f in finals],
            "median_final_mse": float(np.median([f[2] for f in finals])),
            "median_delta_norm_curve": np.median(curves, axis=0).tolist(),
        }
    for v in ("tcec", "tcec-oracle"):
        if v in variants and "quant" in variants:
            ratios = [c / q if q > 0 else math.nan for c, q in
                      zip(summary.variants[v]["final_mse"], summary.variants["quant"]["final_mse"])]
            summary.comparisons[f"{v}_vs_quant"] = {
                "mse_ratio": ratios, "median_ratio": float(np.median(ratios)),
                "improved_every_seed": all(r < 1 for r in ratios)}
    if K is not None and exp.error.kind == "scaled_output":
        kstar = np.stack([exp.error.kstar_row(t) for t in exp.plan.steps])
        summary.oracle_residuals["kstar_max_abs_error"] = float(np.max(np.abs(K.values - kstar)))
    if "quant" in variants and cfg["sampler.solver"] == "ddim" and exp.spec.kind == "analytic_gaussian":
        summary.bounds = _bounds_for_seed(exp, seeds[0]).to_dict()
    report = summary.to_dict()
    write_text(os.path.join(out_dir, "summary.json"), dumps(report))
    if svg:
        write_text(svg if os.path.isabs(svg) or os.path.dirname(svg) else os.path.join(out_dir, svg),
                   render_svg({v: summary.variants[v]["median_delta_norm_curve"] for v in variants},
                              list(exp.plan.timesteps[1:])))
    return report


def render_svg(curves: dict, ts, width=640, height=400) -> str:
    """Static line chart of log10 delta-norm curves (one polyline per variant)."""
    pad = 50
    colors = ("#444444", "#b5452c", "#2c8a3e", "#2c5fb5")
    logs = {}
    for k, vals in curves.items():
        logs[k] = [math.log10(v) if v > 0 else None for v in vals]
    finite = [v for vals in logs.values() for v in vals if v is not None]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max(len(ts) - 1, 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.1f}" y="{height - 12}" font-size="12" text-anchor="middle">step</text>',
             f'<text x="14" y="{height / 2:.1f}" font-size="12" transform="rotate(-90 14 {height / 2:.1f})"'
             f' text-anchor="middle">log10 |delta|</text>']
    for ci, (k, vals) in enumerate(logs.items()):
        pts = []
        for i, v in enumerate(vals):
            if v is None:
                continue
            x = pad + (width - 2 * pad) * i / n
            y = height - pad - (height - 2 * pad) * (v - lo) / (hi - lo)
            pts.append(f"{x:.2f},{y:.2f}")
        col = colors[ci % len(colors)]
        if pts:
            parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        parts.append(f'<text x="{width - pad - 90}" y="{pad + 16 * ci}" font-size="12" fill="{col}">{k}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- bounds

def _bounds_for_seed(exp, seed):
    s, plan = exp.schedule, exp.plan
    x_T = start_latent(exp.spec, seed)
    fp = run_ddim(exp.spec, s, plan, x_T, seed, "fp")
    q = run_ddim(exp.qd, s, plan, x_T, seed, "quant")
    norms = propagation_norms(exp, q.states)
    return bound_suite(s, plan, q.injected_eps, a_norms=norms,
                       measured_delta0=l2_norm(q.final - fp.final), m=exp.cfg.window)


def cmd_bounds(cfg: Config, out_dir, seed=None) -> dict:
    exp = build_experiment(cfg)
    seed = cfg["run.seed"] if seed is None else int(seed)
    rep = _bounds_for_seed(exp, seed)
    report = rep.to_dict()
    report.update({
        "tool_version": __version__, "config_fingerprint": cfg.fingerprint(), "seed": seed,
        "solver": "ddim", "rho_source": "measured ||A_t||",
        "any_rho_lt_one": any(rep.rho_lt_one),
        "any_premise_rho_lt_one": any(rep.premise_rho_lt_one),
        "premise_warning": None if any(rep.premise_rho_lt_one) else
        "a_t > 1 at every step: the contraction premise rho_t < 1 fails with L = 0",
    })
    write_text(os.path.join(out_dir, "bounds.json"), dumps(report))
    return report


# ---------------------------------------------------------------- verify

def _check(name, value, tol, detail=None, passed=None):
    ok = bool(value <= tol) if passed is None else bool(passed)
    return {"name": name, "value": value, "tolerance": tol, "passed": ok, "detail": detail}


def check_telescoping(seed=0, n_schedules=20, n_pairs=20, max_T=1000):
    rng = np.random.default_rng([int(seed), 21])
    worst = 0.0
    for _ in range(n_schedules):
        T = int(rng.integers(2, max_T + 1))
        lo = float(rng.uniform(1e-5, 1e-2))
        s = make_linear_beta(T, lo, float(rng.uniform(lo, 0.05)))
        plan = make_step_plan(s, int(rng.integers(1, T + 1)))
        for _ in range(n_pairs):
            i, j = sorted(int(v) for v in rng.integers(0, plan.N, size=2))
            t, k = plan.steps[j], plan.steps[i]
            for mode in MODES:
                w = telescoped_product(s, t, k, mode, plan)
                ref = oracles.brute_force_weight(s.alpha, plan.steps, t, k, mode)
                worst = max(worst, abs(w - ref) / abs(ref))
    return _check("telescoping_identity", worst, TOL_TELESCOPE)


def recursion_residuals(exp_or_cfg, seed=0):
    """Relative errors of the scalar-A closed form and the matrix-A unrolling
    against measured drift, worst over all states, on the affine denoiser
    with the Gaussian error model; plus the closed form in both weight modes."""
    cfg = exp_or_cfg.cfg if isinstance(exp_or_cfg, Experiment) else exp_or_cfg
    exp = build_experiment(cfg.with_overrides(denoiser__kind="analytic_gaussian"), "gaussian")
    s, plan, spec = exp.schedule, exp.plan, exp.spec
    x_T = start_latent(spec, seed)
    fp = run_ddim(spec, s, plan, x_T, seed, "fp")
    q = run_ddim(exp.qd, s, plan, x_T, seed, "quant")
    gains = {t: ddim_coeffs(s, t, tp)[0] + ddim_coeffs(s, t, tp)[1] * gaussian_gain(spec, s, t)
             for t, tp in plan.pairs()}
    A_list, B_list = [], []
    for t, tp in plan.pairs():
        co = prop_coeffs(s, t, tp, analytic_jacobian(spec, t, s) if spec.dim <= 512 else None)
        A_list.append(co.A if spec.dim <= 512 else gains[t])
        B_list.append(co.B)
    unrolled = oracles.unroll(A_list, B_list, list(q.injected_eps))
    scalar = matrix = 0.0
    modes = {m: 0.0 for m in MODES}
    for i, tp in enumerate(plan.timesteps[1:]):
        meas = measure_delta(fp, q, tp)
        if not np.any(meas):
            continue
        scalar = max(scalar, _rel(cumulative_error_closed_form(
            q.injected_eps, s, plan, tp, "recursion", gains=gains), meas))
        matrix = max(matrix, _rel(unrolled[i], meas))
        for m in MODES:
            modes[m] = max(modes[m], _rel(cumulative_error_closed_form(
                q.injected_eps, s, plan, tp, m, gains=gains), meas))
    return scalar, matrix, modes


def weight_report(cfg, seed=0, modes=None):
    s = make_linear_beta(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    plan = make_step_plan(s, cfg["sampler.steps"])
    worst = 0.0
    for i, k in enumerate(plan.steps):
        for t in plan.steps[i:]:
            prod = telescoped_product(s, t, k, "inverse", plan) * telescoped_product(s, t, k, "recursion", plan)
            worst = max(worst, abs(prod - 1.0))
    if modes is None:
        _, _, modes = recursion_residuals(cfg, seed)
    matching = min(modes, key=modes.get)
    return {"max_abs_product_minus_one": worst, "closed_form_rel_error": modes,
            "matching_mode": matching,
            "note": "inverse weights are the reciprocals of the recursion weights"}


def random_cache(rng, T=3, S=4, C=4, H=4, W=4):
    mu = rng.standard_normal((T, S, C, H, W))
    mu_q = mu * (1.0 + 0.1 * rng.standard_normal((T, 1, C, 1, 1))) + 0.05 * rng.standard_normal(mu.shape)
    return CalibrationCache(tuple(range(T, 0, -1)), mu, mu_q)


def check_k_numeric(seed=0, n_caches=5, lambdas=(0.01, 1.0, 100.0)):
    rng = np.random.default_rng([int(seed), 31])
    worst = 0.0
    stat = 0.0
    for _ in range(n_caches):
        cache = random_cache(rng)
        for lam in lambdas:
            K = solve_K(cache, lam)
            ref = oracles.golden_section_K(cache.mu, cache.mu_q, lam + K.gamma)
            worst = max(worst, float(np.max(np.abs(K.values - ref))))
        stat = max(stat, stationarity_residual(cache, solve_K(cache, 0.0)))
    return (_check("K_closed_vs_golden_section", worst, TOL_K_NUMERIC),
            _check("K_stationarity_lambda0", stat, TOL_STATIONARITY))


def check_recovery(cfg, seed=0, samples=16):
    exp = build_experiment(cfg, "scaled_output")
    cache = collect_cache(exp.qd, samples, exp.plan, exp.schedule, seed, "ddim")
    K = solve_K(cache, 0.0)
    kstar = np.stack([exp.error.kstar_row(t) for t in exp.plan.steps])
    return _check("kstar_recovery", float(np.max(np.abs(K.values - kstar))), TOL_RECOVERY)


def dpm_fd_residuals(cfg, seed=0, dt=0.05):
    """Finite-difference check of the DPM++ propagation matrices on the affine
    denoiser.  Returns ``(rel_A, rel_B, rel_B_first_stage, zero_jacobian_exact)``."""
    exp = build_experiment(cfg.with_overrides(denoiser__kind="analytic_gaussian"), "zero")
    s, spec = exp.schedule, exp.spec
    t = s.T // 2
    tp = t - int(round(dt * s.T))
    if tp < 0 or t < 1 or tp >= t:
        raise ScheduleError("schedule too short for the DPM++ finite-difference check")
    x = np.random.default_rng([int(seed), 41]).standard_normal(spec.shape)
    co = dpmpp_prop_coeffs(spec, x, t, tp, s)
    t_mid = stage_timestep(tp)
    Jx, Je = oracles.fd_step_jacobians(lambda z: f_theta(spec, z, t, s),
                                       lambda z: f_theta(spec, z, t_mid, s), x, co.dt)
    n = spec.dim
    zero = dpmpp_prop_coeffs(spec, x, t, tp, s, jacobians=(np.zeros((n, n)), np.zeros((n, n))))
    exact = bool(np.array_equal(zero.A, np.eye(n)) and np.array_equal(zero.B, zero.dt * np.eye(n)))
    return _rel(co.A, Jx), _rel(co.B, Je), _rel(co.B_first_stage_jacobian, Je), exact, co.dt


def check_bounds(cfg, seeds=range(5)):
    exp = build_experiment(cfg.with_overrides(denoiser__kind="analytic_gaussian"), "gaussian")
    worst = -math.inf
    premise = []
    for sd in seeds:
        rep = _bounds_for_seed(exp, sd)
        worst = max(worst, rep.measured_delta0 / rep.bound_delta0)
        premise.append(any(rep.premise_rho_lt_one))
    return _check("bound_triangle_inequality", worst, 1.0,
                  detail={"max_measured_over_bound": worst,
                          "premise_rho_lt_one_holds_anywhere": any(premise)})


def cmd_verify(cfg: Config, out_dir=None, k_file=None, seed: int = 0) -> dict:
    checks = [check_telescoping(seed)]
    scalar, matrix, modes = recursion_residuals(cfg, seed)
    checks.append(_check("recursion_scalar_A", scalar, TOL_RECURSION_SCALAR))
    checks.append(_check("recursion_matrix_A", matrix, TOL_RECURSION_MATRIX))
    weights = weight_report(cfg, seed, modes)
    checks.append(_check("reciprocal_weights", weights["max_abs_product_minus_one"], TOL_RECIPROCAL))
    checks.extend(check_k_numeric(seed))
    checks.append(check_recovery(cfg, seed))
    rel_A, rel_B, rel_B1, exact, dt = dpm_fd_residuals(cfg, seed)
    checks.append(_check("dpm_fd_A", rel_A, TOL_DPM_FD, detail={"dt": dt}))
    checks.append(_check("dpm_fd_B", rel_B, TOL_DPM_FD,
                         detail={"dt": dt, "first_stage_jacobian_variant_rel_error": rel_B1}))
    checks.append(_check("dpm_zero_jacobian", 0.0, 0.0, passed=exact))
    checks.append(check_bounds(cfg))
    if k_file:
        exp = build_experiment(cfg)
        K = load_K(k_file, exp)
        cache = collect_cache(exp.qd, cfg["calibration.samples"], exp.plan, exp.schedule,
                              cfg["calibration.seed"], cfg["sampler.solver"])
        checks.append(_check("k_file_stationarity", stationarity_residual(cache, K),
                             TOL_STATIONARITY, detail={"k_file": os.path.basename(k_file)}))
    report = {"tool_version": __version__, "config_fingerprint": cfg.fingerprint(),
              "checks": checks, "weight_report": weights,
              "passed": all(c["passed"] for c in checks)}
    if out_dir:
        write_text(os.path.join(out_dir, "verify.json"), dumps(report))
    return report
