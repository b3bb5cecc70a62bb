"""Experiment driver: config loading, ablation sweeps and report emission.

All report payloads (report.csv / report.json) are deterministic functions
of the resolved config and base seed; wall-clock measurements go to a
separate timing.json so byte-identical reproducibility holds.  Diverged
sweep cells are flagged rows, never dropped.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .adjoint import (
    ButcherTableau,
    direct_backprop_grad,
    estimate_clean_rk,
    rk_direct_backprop_grad,
    symplectic_euler_grad,
    symplectic_rk_grad,
    vanilla_adjoint_grad,
)
from .estimator import (
    DivergenceError,
    MCurvePoint,
    estimate_clean,
    estimation_error_curve,
    m_curve_csv_text,
)
from .guidance import (
    GramStyleLoss,
    GuidanceConfig,
    GuidanceLoss,
    L2TargetLoss,
    SampleRecord,
    ddim_rollout,
    sag_sample,
)
from .models import AffineModel, GmmModel, MlpModel, ScoreModel
from .schedule import NoiseSchedule, build_linear_schedule
from .svgplot import line_plot_svg, table_svg

__all__ = [
    "ConfigError",
    "RunConfig",
    "ExperimentReport",
    "run_single_sample",
    "run_ablation_n",
    "run_ablation_rho",
    "run_window_and_repeats_study",
    "run_adjoint_comparison",
    "emit_plots",
]


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


def _require(obj: dict, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} section must be a JSON object, got {type(obj).__name__}")
    if key not in obj:
        raise ConfigError(f"missing key '{key}' in {where}")
    return obj[key]


def build_schedule(spec: dict) -> NoiseSchedule:
    try:
        if "alpha" in spec:
            return NoiseSchedule(np.asarray(spec["alpha"], dtype=np.float64))
        return build_linear_schedule(
            _require(spec, "T", "schedule"),
            _require(spec, "beta_min", "schedule"),
            _require(spec, "beta_max", "schedule"),
        )
    except ValueError as exc:
        raise ConfigError(f"bad schedule spec: {exc}") from exc


def build_model(spec: dict) -> ScoreModel:
    kind = _require(spec, "kind", "model")
    try:
        if kind == "gmm":
            return GmmModel(_require(spec, "weights", "model"), _require(spec, "means", "model"))
        if kind == "mlp":
            if "weights_file" in spec:
                path = Path(spec["weights_file"])
                if not path.exists():
                    raise ConfigError(f"mlp weights file not found: {path}")
                return MlpModel.from_json_dict(json.loads(path.read_text()))
            return MlpModel.random(_require(spec, "widths", "model"), int(spec.get("seed", 0)))
        if kind == "affine":
            return AffineModel(np.asarray(_require(spec, "matrix", "model")), spec.get("offset"))
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad model spec: {exc}") from exc
    raise ConfigError(f"unknown model kind '{kind}'")


def build_loss(spec: dict) -> GuidanceLoss:
    kind = _require(spec, "kind", "loss")
    try:
        if kind == "l2_target":
            return L2TargetLoss(np.asarray(_require(spec, "target", "loss"), dtype=np.float64))
        if kind == "gram_style":
            return GramStyleLoss(
                np.asarray(_require(spec, "target_gram", "loss"), dtype=np.float64),
                np.asarray(_require(spec, "feature_map", "loss"), dtype=np.float64),
            )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad loss spec: {exc}") from exc
    raise ConfigError(f"unknown loss kind '{kind}'")


def build_guidance(spec: dict) -> GuidanceConfig:
    try:
        window = tuple(_require(spec, "window", "guidance"))
        if len(window) != 2:
            raise ConfigError(f"guidance window must be a [K1, K2] pair, got {list(window)}")
        return GuidanceConfig(
            window=window,
            rho=float(_require(spec, "rho", "guidance")),
            repeats=int(spec.get("repeats", 1)),
            n_steps=int(spec.get("n_steps", 1)),
            rho_by_t=spec.get("rho_by_t"),
            repeats_by_t=spec.get("repeats_by_t"),
            n_by_t=spec.get("n_by_t"),
            grad_normalize=bool(spec.get("grad_normalize", False)),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, AttributeError) as exc:
        raise ConfigError(f"bad guidance spec: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Fully validated experiment configuration."""

    schedule_spec: dict
    model_spec: dict
    loss_spec: dict
    guidance_spec: dict
    sweep: dict = field(default_factory=dict)
    num_seeds: int = 10
    base_seed: int = 0
    out_dir: str = "runs/out"
    parallel: int = 1

    def __post_init__(self) -> None:
        if self.num_seeds < 1:
            raise ConfigError("num_seeds must be >= 1")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        for key, vals in self.sweep.items():
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"sweep axis '{key}' must be a non-empty list")
        # Fail fast: construct everything once so config errors surface
        # before any computation.
        schedule = build_schedule(self.schedule_spec)
        model = build_model(self.model_spec)
        loss = build_loss(self.loss_spec)
        guidance = build_guidance(self.guidance_spec)
        try:
            guidance.validate_for(schedule)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        try:
            grad = loss.grad(np.zeros(model.dim))
        except Exception as exc:
            raise ConfigError(
                f"loss incompatible with model dimension {model.dim}: {exc}"
            ) from exc
        if np.shape(grad) != (model.dim,):
            raise ConfigError(
                f"loss gradient has shape {np.shape(grad)} for model dimension {model.dim}"
            )

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config root must be a JSON object")
        return cls(
            schedule_spec=_require(obj, "schedule", "config"),
            model_spec=_require(obj, "model", "config"),
            loss_spec=_require(obj, "loss", "config"),
            guidance_spec=_require(obj, "guidance", "config"),
            sweep=obj.get("sweep", {}),
            num_seeds=int(obj.get("num_seeds", 10)),
            base_seed=int(obj.get("base_seed", 0)),
            out_dir=str(obj.get("out_dir", "runs/out")),
            parallel=int(obj.get("parallel", 1)),
        )

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)

    def to_resolved_dict(self) -> dict:
        return {
            "schedule": self.schedule_spec,
            "model": self.model_spec,
            "loss": self.loss_spec,
            "guidance": self.guidance_spec,
            "sweep": self.sweep,
            "num_seeds": self.num_seeds,
            "base_seed": self.base_seed,
            "out_dir": self.out_dir,
            "parallel": self.parallel,
        }

    def build(self) -> tuple[NoiseSchedule, ScoreModel, GuidanceLoss, GuidanceConfig]:
        return (
            build_schedule(self.schedule_spec),
            build_model(self.model_spec),
            build_loss(self.loss_spec),
            build_guidance(self.guidance_spec),
        )

    def with_guidance(self, **overrides) -> GuidanceConfig:
        spec = dict(self.guidance_spec)
        spec.update(overrides)
        return build_guidance(spec)


def _env_fingerprint() -> dict:
    import sys

    return {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
        "dtype": "float64",
        "machine_eps": repr(float(np.finfo(np.float64).eps)),
    }


def _json_cell(v: Any) -> Any:
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def _csv_cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if not np.isfinite(v) else repr(v)
    return str(v)


@dataclass
class ExperimentReport:
    """Rows plus optional curves; serialization is fully deterministic."""

    kind: str
    columns: list[str]
    rows: list[dict]
    curves: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    timings: list[dict] = field(default_factory=list)  # never serialized into report.*

    def __post_init__(self) -> None:
        self.meta.setdefault("env", _env_fingerprint())
        self.meta["kind"] = self.kind
        for i, row in enumerate(self.rows):
            if set(row) != set(self.columns):
                raise ValueError(f"row {i} keys {sorted(row)} do not match columns {self.columns}")

    def to_csv_text(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_csv_cell(row[c]) for c in self.columns))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "columns": self.columns,
            "rows": [{k: _json_cell(v) for k, v in row.items()} for row in self.rows],
            "curves": self.curves,
            "meta": self.meta,
        }

    def to_json_text(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "csv": out / "report.csv",
            "json": out / "report.json",
            "timing": out / "timing.json",
        }
        paths["csv"].write_text(self.to_csv_text())
        paths["json"].write_text(self.to_json_text())
        paths["timing"].write_text(json.dumps({"rows": self.timings}, sort_keys=True, indent=2) + "\n")
        m = self.curves.get("m_curve")
        if m:
            points = [
                MCurvePoint(n=int(n), mean_error=float(e), stderr=float(se),
                            num_samples=int(self.meta.get("m_curve_samples", 0)),
                            seed=int(self.meta.get("m_curve_seed", 0)))
                for n, e, se in zip(m["n"], m["mean_error"], m["stderr"])
            ]
            paths["m_curve"] = out / "m_curve.csv"
            paths["m_curve"].write_text(m_curve_csv_text(points))
        return paths


def _run_cells(cells: list[Callable[[], Any]], parallel: int) -> list[Any]:
    """Run independent sweep cells, preserving submission order."""
    if parallel <= 1 or len(cells) <= 1:
        return [cell() for cell in cells]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(lambda c: c(), cells))


def _sample_cell(model, schedule, loss, gcfg, seed) -> tuple[SampleRecord | None, str]:
    try:
        return sag_sample(model, schedule, loss, gcfg, seed), ""
    except DivergenceError as exc:
        return None, str(exc)


def _mean_loss_trajectory(records: list[SampleRecord]) -> tuple[list[int], list[float]]:
    """Average guided-step loss per t over completed runs (descending t)."""
    by_t: dict[int, list[float]] = {}
    for rec in records:
        for step in rec.guided_steps:
            by_t.setdefault(step["t"], []).append(step["loss"])
    ts = sorted(by_t, reverse=True)
    return ts, [float(np.mean(by_t[t])) for t in ts]


def run_single_sample(config: RunConfig, seed: int | None = None) -> ExperimentReport:
    """One guided run; raises DivergenceError rather than flagging."""
    schedule, model, loss, gcfg = config.build()
    use_seed = config.base_seed if seed is None else int(seed)
    record = sag_sample(model, schedule, loss, gcfg, use_seed)
    columns = ["seed", "n", "rho", "window", "final_loss", "steps_guided", "diverged"]
    row = {
        "seed": use_seed,
        "n": gcfg.n_steps,
        "rho": gcfg.rho,
        "window": f"{gcfg.window[0]}-{gcfg.window[1]}",
        "final_loss": record.final_loss,
        "steps_guided": record.steps_guided,
        "diverged": False,
    }
    ts, losses = _mean_loss_trajectory([record])
    report = ExperimentReport(
        kind="sample",
        columns=columns,
        rows=[row],
        curves={"guided_loss": {"label": f"n={gcfg.n_steps}", "t": ts, "loss": losses}},
        meta={"record": record.to_json_dict()},
        timings=[{"seed": use_seed, "wall_time_ns": record.wall_time_ns}],
    )
    return report


def run_ablation_n(config: RunConfig) -> ExperimentReport:
    """Sweep the estimate-step count with everything else fixed."""
    schedule, model, loss, _ = config.build()
    n_list = [int(n) for n in config.sweep.get("n_list", [1, 2, 4, 8])]
    seeds = [config.base_seed + i for i in range(config.num_seeds)]
    columns = ["seed", "n", "rho", "window", "final_loss", "steps_guided", "diverged"]
    rows: list[dict] = []
    timings: list[dict] = []
    curves: dict[str, dict] = {}
    for n in n_list:
        gcfg = config.with_guidance(n_steps=n)
        cells = [
            (lambda s=s, g=gcfg: _sample_cell(model, schedule, loss, g, s)) for s in seeds
        ]
        results = _run_cells(cells, config.parallel)
        records = [rec for rec, _ in results if rec is not None]
        for seed, (rec, err) in zip(seeds, results):
            rows.append(
                {
                    "seed": seed,
                    "n": n,
                    "rho": gcfg.rho,
                    "window": f"{gcfg.window[0]}-{gcfg.window[1]}",
                    "final_loss": rec.final_loss if rec else None,
                    "steps_guided": rec.steps_guided if rec else 0,
                    "diverged": rec is None,
                }
            )
            timings.append(
                {
                    "seed": seed,
                    "n": n,
                    "wall_time_ns": rec.wall_time_ns if rec else None,
                    "steps_guided": rec.steps_guided if rec else 0,
                    "error": err or None,
                }
            )
        ts, losses = _mean_loss_trajectory(records)
        curves[f"n={n}"] = {"t": ts, "loss": losses}
    m_samples = int(config.sweep.get("m_curve_samples", [200])[0])
    m_curve = estimation_error_curve(
        model,
        schedule,
        t=max(1, int(round(0.7 * schedule.num_steps))),
        n_list=n_list,
        n_ref=8 * max(n_list),
        num_samples=m_samples,
        seed=config.base_seed,
    )
    curves["m_curve"] = {
        "n": [p.n for p in m_curve],
        "mean_error": [p.mean_error for p in m_curve],
        "stderr": [p.stderr for p in m_curve],
    }
    return ExperimentReport(
        kind="ablation_n",
        columns=columns,
        rows=rows,
        curves=curves,
        meta={"m_curve_samples": m_samples, "m_curve_seed": config.base_seed},
        timings=timings,
    )


def run_ablation_rho(config: RunConfig) -> ExperimentReport:
    """Sweep the guidance strength; diverged runs become flagged rows."""
    schedule, model, loss, _ = config.build()
    rho_list = [float(r) for r in config.sweep.get("rho_list", [0.0, 0.05, 0.2, 1.0])]
    seeds = [config.base_seed + i for i in range(config.num_seeds)]
    columns = ["seed", "rho", "n", "window", "final_loss", "steps_guided", "diverged"]
    rows: list[dict] = []
    timings: list[dict] = []
    for rho in rho_list:
        gcfg = config.with_guidance(rho=rho)
        cells = [
            (lambda s=s, g=gcfg: _sample_cell(model, schedule, loss, g, s)) for s in seeds
        ]
        results = _run_cells(cells, config.parallel)
        for seed, (rec, err) in zip(seeds, results):
            rows.append(
                {
                    "seed": seed,
                    "rho": rho,
                    "n": gcfg.n_steps,
                    "window": f"{gcfg.window[0]}-{gcfg.window[1]}",
                    "final_loss": rec.final_loss if rec else None,
                    "steps_guided": rec.steps_guided if rec else 0,
                    "diverged": rec is None,
                }
            )
            timings.append({"seed": seed, "rho": rho, "wall_time_ns": rec.wall_time_ns if rec else None,
                            "error": err or None})
    return ExperimentReport(kind="ablation_rho", columns=columns, rows=rows, timings=timings)


def default_window_thirds(T: int) -> dict[str, tuple[int, int]]:
    """Late/middle/early thirds of the step range (early = noisiest steps)."""
    t1, t2 = T // 3, (2 * T) // 3
    return {"late": (1, t1), "middle": (t1 + 1, t2), "early": (t2 + 1, T - 1)}


def run_window_and_repeats_study(config: RunConfig) -> ExperimentReport:
    """Grid over window placement and time-travel repeats.

    Also records the distance of each guided final sample to the unguided
    rollout with the same seed (content-preservation proxy).
    """
    schedule, model, loss, _ = config.build()
    T = schedule.num_steps
    windows = config.sweep.get("windows")
    if windows:
        named = {f"w{i}": (int(w[0]), int(w[1])) for i, w in enumerate(windows)}
    else:
        named = default_window_thirds(T)
    repeats_list = [int(r) for r in config.sweep.get("repeats_list", [1, 2, 3])]
    seeds = [config.base_seed + i for i in range(config.num_seeds)]
    unguided = {s: ddim_rollout(model, schedule, s) for s in seeds}
    columns = [
        "seed", "window_name", "window", "repeats", "final_loss",
        "distance_to_unguided", "steps_guided", "diverged",
    ]
    rows: list[dict] = []
    timings: list[dict] = []
    for name, window in named.items():
        for r in repeats_list:
            gcfg = config.with_guidance(window=list(window), repeats=r)
            cells = [
                (lambda s=s, g=gcfg: _sample_cell(model, schedule, loss, g, s)) for s in seeds
            ]
            results = _run_cells(cells, config.parallel)
            for seed, (rec, err) in zip(seeds, results):
                dist = (
                    float(np.linalg.norm(rec.final_state - unguided[seed])) if rec else None
                )
                rows.append(
                    {
                        "seed": seed,
                        "window_name": name,
                        "window": f"{window[0]}-{window[1]}",
                        "repeats": r,
                        "final_loss": rec.final_loss if rec else None,
                        "distance_to_unguided": dist,
                        "steps_guided": rec.steps_guided if rec else 0,
                        "diverged": rec is None,
                    }
                )
                timings.append(
                    {"seed": seed, "window_name": name, "repeats": r,
                     "wall_time_ns": rec.wall_time_ns if rec else None, "error": err or None}
                )
    return ExperimentReport(kind="window_study", columns=columns, rows=rows, timings=timings)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(b))
    return float(np.linalg.norm(a - b)) / denom if denom > 0 else float(np.linalg.norm(a - b))


def run_adjoint_comparison(config: RunConfig) -> ExperimentReport:
    """Gradient accuracy and memory accounting per backward method.

    For each (model, d, n) cell: relative error of symplectic Euler,
    symplectic RK2 (Heun + conjugate coefficients) and the vanilla adjoint
    against the matching stored-activation oracle, plus checkpoint and tape
    counters.
    """
    schedule, _, _, _ = config.build()
    n_list = [int(n) for n in config.sweep.get("n_list", [1, 2, 4, 8])]
    d_list = [int(d) for d in config.sweep.get("d_list", [2, 4])]
    t = max(1, int(round(0.7 * schedule.num_steps)))
    heun = ButcherTableau.heun()
    rng = np.random.default_rng(config.base_seed)
    columns = [
        "model", "d", "n", "method", "rel_error_vs_oracle",
        "checkpoints_read", "tape_arrays", "peak_state_vectors",
    ]
    rows: list[dict] = []
    timings: list[dict] = []
    for d in d_list:
        models = {
            "gmm": GmmModel([0.5, 0.5], np.vstack([np.ones(d), -np.ones(d)])),
            "mlp": MlpModel.random([d, 16, 16, d], seed=config.base_seed + d),
        }
        for model_name, model in models.items():
            for n in n_list:
                x_t = rng.standard_normal(d)
                g0 = rng.standard_normal(d)
                traj = estimate_clean(model, schedule, x_t, t, n)
                t_ns = time.perf_counter_ns()
                oracle, o_stats = direct_backprop_grad(model, traj, g0, schedule, t, return_stats=True)
                oracle_ns = time.perf_counter_ns() - t_ns
                t_ns = time.perf_counter_ns()
                sym, s_stats = symplectic_euler_grad(model, traj, g0, schedule, t, return_stats=True)
                sym_ns = time.perf_counter_ns() - t_ns
                rk_traj = estimate_clean_rk(model, schedule, x_t, t, n, heun)
                rk_oracle = rk_direct_backprop_grad(model, rk_traj, g0, schedule, t)
                t_ns = time.perf_counter_ns()
                rk, rk_stats = symplectic_rk_grad(model, rk_traj, g0, schedule, t, return_stats=True)
                rk_ns = time.perf_counter_ns() - t_ns
                t_ns = time.perf_counter_ns()
                van = vanilla_adjoint_grad(model, traj.clean_output, g0, schedule, t, n_back=n)
                van_ns = time.perf_counter_ns() - t_ns
                entries = [
                    ("symplectic_euler", _rel_err(sym, oracle), s_stats, sym_ns),
                    ("symplectic_rk2", _rel_err(rk, rk_oracle), rk_stats, rk_ns),
                    ("vanilla", _rel_err(van, oracle), None, van_ns),
                    ("oracle_backprop", 0.0, o_stats, oracle_ns),
                ]
                for method, err, stats, ns in entries:
                    rows.append(
                        {
                            "model": model_name,
                            "d": d,
                            "n": n,
                            "method": method,
                            "rel_error_vs_oracle": err,
                            "checkpoints_read": stats.checkpoints_read if stats else n + 1,
                            "tape_arrays": stats.tape_arrays if stats else 0,
                            "peak_state_vectors": stats.peak_state_vectors if stats else 2,
                        }
                    )
                    timings.append(
                        {"model": model_name, "d": d, "n": n, "method": method, "wall_time_ns": ns}
                    )
    return ExperimentReport(kind="adjoint_comparison", columns=columns, rows=rows, timings=timings)


def emit_plots(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Render the report's figures as deterministic standalone SVG files."""
    if not report.rows:
        raise ValueError("cannot plot an empty report: it contains no rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []

    def _write(name: str, svg: str) -> None:
        p = out / name
        p.write_text(svg)
        paths.append(p)

    if report.kind in ("ablation_n", "sample"):
        series = []
        for label, curve in sorted(report.curves.items()):
            if "t" in curve and curve["t"]:
                lbl = curve.get("label", label)
                series.append((lbl, [float(v) for v in curve["t"]], [float(v) for v in curve["loss"]]))
        if series:
            _write("loss_curves.svg", line_plot_svg(
                "guided loss per step", "sampling step t", "guidance loss", series))
        m = report.curves.get("m_curve")
        if m:
            _write("m_curve.svg", line_plot_svg(
                "clean-estimate error vs steps", "estimate steps n", "mean error",
                [("m(n)", [float(v) for v in m["n"]], [float(v) for v in m["mean_error"]])]))
    elif report.kind == "ablation_rho":
        by_rho: dict[float, list[float]] = {}
        for row in report.rows:
            if not row["diverged"] and row["final_loss"] is not None:
                by_rho.setdefault(float(row["rho"]), []).append(float(row["final_loss"]))
        rhos = sorted(by_rho)
        if rhos:
            _write("rho_curve.svg", line_plot_svg(
                "final loss vs guidance strength", "rho", "mean final loss",
                [("mean final loss", rhos, [float(np.mean(by_rho[r])) for r in rhos])]))
    elif report.kind in ("window_study", "adjoint_comparison"):
        cells = [[_csv_cell(row[c]) for c in report.columns] for row in report.rows]
        _write(f"{report.kind}.svg", table_svg(report.kind.replace("_", " "), report.columns, cells))
    if not paths:
        raise ValueError(f"report of kind '{report.kind}' produced no plottable data")
    return paths
