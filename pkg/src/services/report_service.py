"""
Analysis runs: build the space and operator from a validated config, run the
requested analyses and write one JSON report plus CSV side files.

Reports are deterministic for a given (config, seed): keys are sorted,
numbers are rounded to Config.REPORT_SIGNIFICANT_DIGITS and nothing carries
a timestamp. Every numeric claim is a {"value", "tag"} pair with tag one of
exact | certified | sampled | heuristic.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Literal

import numpy as np

from config import Config
from errors import BandToolError, ConfigError, InvariantViolation
from logging_config import get_logger
from services.config_schema import AnalysisConfig, GridSpaceConfig
from services.fredholm_service import (
    FredholmSettings,
    ParametrixSettings,
    assemble_parametrix,
    fredholm_verdict,
    localization_radius,
    lower_norm,
    restricted_lower_norm,
)
from services.limits_service import (
    DirectionSequence,
    SpectrumSample,
    TailSpec,
    coordinate_rays,
    norm_approximation_gaps,
    reference_window,
    spectrum_sample,
)
from services.operator_service import (
    BandOperator,
    NormRegime,
    band_from_offsets,
    band_norm_bound,
    decompose_band,
    estimate_p_norm,
    export_coo_csv,
    import_coo_csv,
    op_norm,
    reconstruct,
)
from services.partition_service import build_partition, smooth
from services.quasilocal_service import (
    band_commutator_certificate,
    commutator,
    export_ql_curve_csv,
    extremizer,
    parametrix_quasilocality,
    ql_curve,
)
from services.space_service import Space, SupportSet, load_distance_table, make_grid_space, make_table_space

logger = get_logger("bdo_tool")

Tag = Literal["exact", "certified", "sampled", "heuristic"]

# canonical execution order, independent of the order in the config
ANALYSIS_ORDER = (
    "norms", "decompose", "quasilocality", "smoothing", "limits", "lower-norms", "parametrix", "fredholm"
)
DEFAULT_LOWER_NORM_RADIUS = 20


def claim(value: Any, tag: Tag) -> dict[str, Any]:
    return {"value": value, "tag": tag}


def normalize(value: Any, digits: int | None = None) -> Any:
    """JSON-ready copy with floats rounded to `digits` significant digits."""
    digits = digits or Config.REPORT_SIGNIFICANT_DIGITS
    if isinstance(value, dict):
        return {str(k): normalize(v, digits) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [normalize(v, digits) for v in value]
    if isinstance(value, np.ndarray):
        return [normalize(v, digits) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating, Fraction)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return float(f"{value:.{digits}g}")
    return value


def dumps_report(report: dict[str, Any]) -> str:
    return json.dumps(normalize(report), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


@dataclass
class RunResult:
    report: dict[str, Any]
    report_path: Path
    side_files: list[Path]
    failures: list[dict[str, str]]

    @property
    def invariant_violated(self) -> bool:
        return any(f["error"] == InvariantViolation.__name__ for f in self.failures)


@dataclass
class RunContext:
    """State shared by the analyses of one run."""

    cfg: AnalysisConfig
    space: Space
    operator: BandOperator
    regime: NormRegime
    out_dir: Path
    seed: int
    threads: int
    side_files: list[Path] = field(default_factory=list)
    _spectrum: SpectrumSample | BandToolError | None = None

    def rng(self, analysis: str) -> np.random.Generator:
        """Per-analysis stream so results do not depend on which analyses ran."""
        return np.random.default_rng([self.seed, ANALYSIS_ORDER.index(analysis)])

    def side_file(self, name: str) -> Path:
        path = self.out_dir / f"{self.cfg.label}_{name}.csv"
        self.side_files.append(path)
        return path

    @property
    def directions(self) -> list[DirectionSequence]:
        return build_directions(self.cfg)

    @property
    def tail(self) -> TailSpec:
        t = self.cfg.tail
        return TailSpec(t.start, t.stop, t.samples)

    def spectrum(self) -> SpectrumSample:
        """Limit operators along the configured directions, computed once."""
        if self._spectrum is None:
            try:
                refwin = reference_window(self.space, self.cfg.reference_radius)
                self._spectrum = spectrum_sample(
                    self.operator, self.directions, self.cfg.tolerances.richness, refwin, self.tail, self.threads
                )
            except BandToolError as e:
                self._spectrum = e
        if isinstance(self._spectrum, BandToolError):
            raise self._spectrum
        return self._spectrum


# -- building blocks -------------------------------------------------------

def build_space(cfg: AnalysisConfig, base_dir: Path) -> Space:
    space_cfg = cfg.space
    if isinstance(space_cfg, GridSpaceConfig):
        return make_grid_space(space_cfg.dim, space_cfg.lo, space_cfg.hi, space_cfg.metric)
    if space_cfg.path is not None:
        return load_distance_table(base_dir / space_cfg.path)
    return make_table_space(space_cfg.points, space_cfg.distances)


def build_operator(cfg: AnalysisConfig, space: Space, base_dir: Path) -> BandOperator:
    op_cfg = cfg.operator
    if op_cfg.coo_path is not None:
        return import_coo_csv(space, base_dir / op_cfg.coo_path, label=op_cfg.label)
    return band_from_offsets(space, [(t.offset, t.coefficient) for t in op_cfg.terms], label=op_cfg.label)


def build_directions(cfg: AnalysisConfig) -> list[DirectionSequence]:
    directions = []
    for d in cfg.directions or []:
        if d.ray is not None:
            directions.append(DirectionSequence.from_ray(d.ray, d.label))
        else:
            directions.append(DirectionSequence.from_points(d.points, d.label))
    if cfg.coordinate_rays and cfg.dim is not None:
        directions.extend(coordinate_rays(cfg.dim))
    labels = [d.label for d in directions]
    duplicates = sorted({l for l in labels if labels.count(l) > 1})
    if duplicates:
        raise ConfigError([f"directions: duplicate labels {duplicates}"])
    return directions


def _write_csv(path: Path, header: list[str], rows: list[list[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])
    return path


def _lower_norm_support(ctx: RunContext) -> SupportSet:
    space = ctx.space
    if not space.is_grid:
        return SupportSet.whole(space)
    radius = ctx.cfg.lower_norms.radius
    radius = min(space.radius, DEFAULT_LOWER_NORM_RADIUS) if radius is None else min(radius, space.radius)
    center = [(l + h) // 2 for l, h in zip(space.lo, space.hi)]
    return SupportSet.box(space, [c - radius for c in center], [c + radius for c in center])


# -- analyses --------------------------------------------------------------

def _norms(ctx: RunContext) -> dict[str, Any]:
    A = ctx.operator
    prop = A.propagation
    estimate = estimate_p_norm(A, 2.0, ctx.rng("norms"))
    return {
        "op_norm": {r.value: claim(op_norm(A, r), "exact") for r in NormRegime},
        "regime_norm": claim(op_norm(A, ctx.regime), "exact"),
        "propagation": claim(float(prop), "exact"),
        "geometry_profile": claim(ctx.space.geometry_profile(prop), "exact"),
        "sup_entry": claim(A.sup_entry, "exact"),
        "band_norm_bound": claim(band_norm_bound(A), "certified"),
        "nnz": A.nnz,
        "p2_estimate": {**claim(estimate["value"], "sampled"), "windows": estimate["windows"]},
    }


def _decompose(ctx: RunContext) -> dict[str, Any]:
    A = ctx.operator
    terms = decompose_band(A)
    error = abs(reconstruct(ctx.space, terms).matrix - A.matrix)
    N = ctx.space.geometry_profile(A.propagation)
    limit = N if ctx.space.is_grid else 2 * N - 1
    return {
        "term_count": claim(len(terms), "exact"),
        "term_limit": claim(limit, "exact"),
        "within_limit": len(terms) <= limit,
        "reconstruction_error": claim(float(error.max()) if error.nnz else 0.0, "exact"),
        "terms": [
            {
                "offset": None if t.offset is None else list(t.offset),
                "size": int(t.domain.size),
                "displacement": float(t.displacement),
                "sup_norm": t.sup_norm,
                "injective": t.is_injective,
            }
            for t in terms
        ],
    }


def _quasilocality(ctx: RunContext) -> dict[str, Any]:
    A, regime = ctx.operator, ctx.regime
    settings = ctx.cfg.quasilocality
    cert = band_commutator_certificate(A, settings.eps, regime)
    curve = ql_curve(A, settings.L_values, regime)
    result = {
        "certificate": {
            "L": claim(cert["L"], "certified"),
            "eps": cert["eps"],
            "modulus": claim(cert["modulus"], "exact"),
            "r": cert["r"],
            "M": cert["M"],
            "N": cert["N"],
            "sentinel": cert["sentinel"],
        },
        "curve": [{"L": L, **claim(value, "exact")} for L, value in curve],
    }
    if not cert["sentinel"]:
        f, x_star = extremizer(A, cert["L"], regime)
        attained = op_norm(commutator(A, f), regime)
        result["extremizer"] = {
            "point": ctx.space.point_id(x_star),
            "attained": claim(attained, "exact"),
            "gap": abs(attained - cert["modulus"]),
        }
    if ctx.cfg.output.csv:
        export_ql_curve_csv(curve, ctx.side_file("ql_curve"))
    return result


def _smoothing(ctx: RunContext) -> dict[str, Any]:
    A, regime = ctx.operator, ctx.regime
    settings = ctx.cfg.smoothing
    r = float(A.propagation)
    pou = build_partition(ctx.space, max(r, 1.0), settings.eps)
    norm_A = op_norm(A, regime)
    N = ctx.space.geometry_profile(A.propagation)
    rows = []
    for n in sorted(settings.n_values):
        Mn = smooth(A, n, regime, pou)
        rows.append({
            "n": n,
            "distance": claim(op_norm(Mn - A, regime), "exact"),
            "bound": claim(r * N * norm_A / n, "certified"),
            "norm": claim(op_norm(Mn, regime), "exact"),
        })
    distances = [row["distance"]["value"] for row in rows]
    if ctx.cfg.output.csv:
        _write_csv(
            ctx.side_file("smoothing"),
            ["n", "distance", "bound", "norm"],
            [[row["n"], row["distance"]["value"], row["bound"]["value"], row["norm"]["value"]] for row in rows],
        )
    return {
        "partition": {"size": len(pou), "width": pou.width, "multiplicity": pou.multiplicity},
        "norm_A": claim(norm_A, "exact"),
        "curve": rows,
        "within_bound": all(row["distance"]["value"] <= row["bound"]["value"] * (1 + 1e-9) + 1e-12 for row in rows),
        "contractive": all(row["norm"]["value"] <= norm_A * (1 + 1e-9) + 1e-12 for row in rows),
        "decreasing": all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(distances, distances[1:])),
    }


def _limits(ctx: RunContext) -> dict[str, Any]:
    A, regime = ctx.operator, ctx.regime
    spectrum = ctx.spectrum()
    norm_A = op_norm(A, regime)
    by_label = {d.label: d for d in ctx.directions}
    entries = []
    for result in spectrum.results:
        limit = result.operator
        entry = {
            "direction": result.direction,
            "tail": list(result.tail),
            "rich": result.rich,
            "cauchy_residual": claim(result.cauchy_residual, "sampled"),
            "norm": claim(op_norm(limit, regime), "exact"),
            "contractive": op_norm(limit, regime) <= norm_A * (1 + 1e-9) + result.tol,
            "propagation": claim(float(limit.propagation), "exact"),
            "provenance": result.provenance,
        }
        center = np.zeros(limit.space.size)
        center[limit.space.index_of((0,) * limit.space.dim)] = 1.0
        try:
            gaps = norm_approximation_gaps(A, result, center, by_label[result.direction],
                                           result.tail[-3:], regime)
            entry["norm_gaps"] = [{"index": g["index"], **claim(g["gap"], "sampled")} for g in gaps]
        except BandToolError as e:
            entry["norm_gaps_skipped"] = str(e)
        entries.append(entry)
        if ctx.cfg.output.csv and result in spectrum.members:
            path = ctx.side_file(f"limit_{_slug(result.direction)}")
            export_coo_csv(limit, path)
    return {
        "sampled": True,
        "rich": spectrum.rich,
        "reference_window": _limit_window_info(spectrum),
        "directions": entries,
        "distinct_members": [m.direction for m in spectrum.members],
    }


def _limit_window_info(spectrum: SpectrumSample) -> dict[str, Any]:
    space = spectrum.results[0].operator.space
    return {"dim": space.dim, "radius": space.radius, "size": space.size}


def _slug(label: str) -> str:
    """File-name form of a direction label; "+x0" and "-x0" stay distinct."""
    label = label.replace("+", "plus_").replace("-", "minus_")
    return "".join(c if c.isalnum() else "_" for c in label).strip("_") or "direction"


def _lower_norms(ctx: RunContext) -> dict[str, Any]:
    A, regime = ctx.operator, ctx.regime
    settings = ctx.cfg.lower_norms
    F = _lower_norm_support(ctx)
    rng = ctx.rng("lower-norms")
    nu = lower_norm(A, F, regime, settings.allow_sampling, rng, threads=ctx.threads)
    r = float(A.propagation)
    M = op_norm(A, regime)
    N = ctx.space.geometry_profile(A.propagation)
    rows = []
    for delta in sorted(settings.delta_values):
        if r == 0 or M == 0:
            rows.append({"delta": delta, "skipped": "diagonal or zero operator"})
            continue
        s = localization_radius(delta, M, r, N)
        nu_s = restricted_lower_norm(A, F, s, regime, settings.allow_sampling, rng, threads=ctx.threads)
        rows.append({
            "delta": delta,
            "s": claim(s, "certified"),
            "nu_s": claim(nu_s.value, nu_s.tag),
            "holds": nu.value - 1e-9 <= nu_s.value <= nu.value + delta + 1e-9,
        })
    if ctx.cfg.output.csv:
        _write_csv(
            ctx.side_file("nu_curve"),
            ["delta", "s", "nu", "nu_s", "holds"],
            [[row["delta"], row["s"]["value"], nu.value, row["nu_s"]["value"], row["holds"]]
             for row in rows if "s" in row],
        )
    return {
        "support_size": F.size,
        "nu": claim(nu.value, nu.tag),
        "method": nu.method,
        "localization": rows,
    }


def _parametrix(ctx: RunContext) -> dict[str, Any]:
    A, regime = ctx.operator, ctx.regime
    tol = ctx.cfg.tolerances
    result = assemble_parametrix(
        A,
        ctx.spectrum(),
        ParametrixSettings(regime=regime, max_buffer=tol.max_buffer, slack=tol.slack, threads=ctx.threads),
    )
    metrics = dict(result.metrics)
    left_curve = metrics.pop("defect_curve_left")
    right_curve = metrics.pop("defect_curve_right")
    exact = {"norm_A", "norm_T0", "norm_T0_right", "norm_A_L", "norm_A_R", "identity_defect_left",
             "identity_defect_right", "residual_left_norm", "residual_right_norm", "local_norm_bound"}
    tagged = {k: claim(v, "exact") if k in exact else v for k, v in metrics.items()}
    tagged["M"] = claim(metrics["M"], "certified")
    quasilocal = [parametrix_quasilocality(A, result.left, L, regime) for L in ctx.cfg.quasilocality.L_values]
    if ctx.cfg.output.csv:
        rows = [["left", p["radius"], p["size"], p["aq"], p["qa"]] for p in left_curve]
        rows += [["right", p["radius"], p["size"], p["aq"], p["qa"]] for p in right_curve]
        _write_csv(ctx.side_file("defect_curve"), ["side", "radius", "size", "aq", "qa"], rows)
    return {
        "metrics": tagged,
        "defect_curve_left": [{**p, "tag": "exact"} for p in left_curve],
        "defect_curve_right": [{**p, "tag": "exact"} for p in right_curve],
        "quasilocality": quasilocal,
    }


def _fredholm(ctx: RunContext) -> dict[str, Any]:
    tol = ctx.cfg.tolerances
    settings = FredholmSettings(
        directions=tuple(ctx.directions),
        regime=ctx.regime,
        tail=ctx.tail,
        richness_tol=tol.richness,
        residual_tol=tol.residual,
        reference_radius=ctx.cfg.reference_radius,
        max_buffer=tol.max_buffer,
        slack=tol.slack,
        delta=tol.delta,
        threads=ctx.threads,
    )
    report = fredholm_verdict(ctx.operator, settings).as_dict()
    if ctx.cfg.output.csv:
        _write_csv(
            ctx.side_file("finite_section"),
            ["radius", "size", "nu"],
            [[p["radius"], p["size"], p["nu"]] for p in report["finite_section"]],
        )
    return report


ANALYSES: dict[str, Callable[[RunContext], dict[str, Any]]] = {
    "norms": _norms,
    "decompose": _decompose,
    "quasilocality": _quasilocality,
    "smoothing": _smoothing,
    "limits": _limits,
    "lower-norms": _lower_norms,
    "parametrix": _parametrix,
    "fredholm": _fredholm,
}


# -- run -------------------------------------------------------------------

def _space_info(space: Space) -> dict[str, Any]:
    info = {"kind": space.kind, "size": space.size, "metric": space.metric_kind}
    if space.is_grid:
        info.update(dim=space.dim, lo=list(space.lo), hi=list(space.hi))
    return info


def _tolerances(cfg: AnalysisConfig) -> dict[str, Any]:
    return {
        **cfg.tolerances.model_dump(),
        "neumann": Config.NEUMANN_TOL,
        "identity": Config.IDENTITY_TOL,
        "inverse_norm": Config.INVERSE_NORM_TOL,
        "p1_exact_limit": Config.P1_EXACT_LIMIT,
        "symbol_grid_points": Config.SYMBOL_GRID_POINTS,
    }


def run(
    cfg: AnalysisConfig,
    out_dir: Path | str | None = None,
    seed: int | None = None,
    threads: int | None = None,
    base_dir: Path | str | None = None,
) -> RunResult:
    """
    Run every requested analysis and write the report.

    A failing analysis is recorded under "failures" and the run continues;
    analyses that share the limit-operator sample see the same failure.

    Raises:
        ConfigError: the space, operator or directions cannot be built.
    """
    base_dir = Path(base_dir or ".")
    if out_dir is not None:
        out_dir = Path(out_dir)
    elif cfg.output.dir is not None:
        out_dir = base_dir / cfg.output.dir
    else:
        out_dir = Config.REPORT_DIR
    seed = cfg.seed if seed is None else seed
    threads = cfg.threads if threads is None else threads

    try:
        space = build_space(cfg, base_dir)
        operator = build_operator(cfg, space, base_dir)
        directions = build_directions(cfg)
    except ConfigError:
        raise
    except BandToolError as e:
        raise ConfigError([f"{type(e).__name__}: {e}"]) from e

    # threads is logged, never reported
    logger.info(f"Running {cfg.label} with seed={seed} threads={threads}")
    ctx = RunContext(cfg, space, operator, NormRegime(cfg.regime), out_dir, seed, threads)
    out_dir.mkdir(parents=True, exist_ok=True)

    analyses: dict[str, Any] = {}
    failures: list[dict[str, str]] = []
    for name in ANALYSIS_ORDER:
        if name not in cfg.analyses:
            continue
        logger.info(f"Running analysis {name} on {operator!r}")
        try:
            analyses[name] = {"status": "ok", **ANALYSES[name](ctx)}
        except BandToolError as e:
            logger.warning(f"Analysis {name} failed: {type(e).__name__}: {e}")
            failure = {"analysis": name, "error": type(e).__name__, "message": str(e)}
            failures.append(failure)
            analyses[name] = {"status": "failed", "error": failure["error"], "message": failure["message"]}

    report_path = out_dir / f"{cfg.label}_report.json"
    report = {
        "tool": "bdo-tool",
        "version": Config.APP_VERSION,
        "label": cfg.label,
        "seed": seed,
        "regime": cfg.regime,
        "space": _space_info(space),
        "operator": {
            "label": operator.label,
            "nnz": operator.nnz,
            "notes": list(operator.notes),
            "terms": [
                {"offset": t.offset, "coefficient": str(t.coefficient), "node_count": t.node_count}
                for t in cfg.operator.terms or []
            ],
            "coo_path": cfg.operator.coo_path,
        },
        "directions": [d.label for d in directions],
        "tail": cfg.tail.model_dump(),
        "tolerances": _tolerances(cfg),
        "analyses": analyses,
        "failures": failures,
        "side_files": sorted(p.name for p in ctx.side_files),
    }
    report_path.write_text(dumps_report(report))
    logger.info(f"Report written to {report_path} ({len(failures)} failed analyses)")
    return RunResult(report=report, report_path=report_path, side_files=list(ctx.side_files), failures=failures)
