"""Monte-Carlo experiment runner, result rows and summary statistics."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import carrier_phase as cp
from . import sidelink as sl
from . import signals as sg
from .measurements import (
    Frame,
    Orientation,
    ReportingGrid,
    TimingKind,
    TimingMeasurement,
    measure_aoa,
    measure_rstd,
    measure_rtoa,
    measure_rxtx_diff,
    quantize_timing,
    rtt_from_pair,
)
from .scenario import NodeKind, Position3D, Scenario, ScenarioError, derive_rng, load_scenario
from .solvers import PositionEstimate, solve_aoa, solve_rtt, solve_tdoa

TECHNIQUES = (
    "dl_tdoa",
    "ul_tdoa",
    "rtt",
    "aoa",
    "carrier_phase_dd",
    "carrier_phase_rtt_like",
    "fh_tdoa",
    "bw_agg_tdoa",
    "sl_tdoa_dl",
    "sl_tdoa_ul",
    "sl_rtt",
    "sl_aoa",
)

CSV_COLUMNS = (
    "trial",
    "true_x",
    "true_y",
    "true_z",
    "est_x",
    "est_y",
    "est_z",
    "horizontal_error_m",
    "vertical_error_m",
    "converged",
    "aggregated",
    "hop_provenance",
    "arp_id",
    "sync_source_id",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HopPlanConfig:
    num_hops: int = 5
    hop_bandwidth_prb: int = 24
    overlap_prb: int = 4

    def build(self) -> sg.HopPlan:
        return sg.HopPlan.covering(self.num_hops, self.hop_bandwidth_prb, self.overlap_prb)


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte-Carlo experiment.

    Noise parameters: ``timing_noise_s`` (RSTD/RTOA/Rx-Tx, and SL ranges),
    ``phase_noise_deg`` (RSCP), ``angle_noise_deg`` (AoA), ``snr_db``
    (signal-level techniques, ``None`` = noiseless). Carrier-phase
    techniques start from a timing fix with ``coarse_timing_noise_s``; a
    ``search_radius_cycles`` of ``None`` sizes the integer search from that
    fix's geometry.
    """

    scenario: str | Path | Scenario
    technique: str
    trials: int = 1
    seed: int | None = None
    timing_noise_s: float = 0.0
    phase_noise_deg: float = 0.0
    angle_noise_deg: float = 0.0
    snr_db: float | None = None
    quantize: bool = False
    k: int = -1
    hop_plan: HopPlanConfig = field(default_factory=HopPlanConfig)
    num_ccs: int = 3
    cc_bandwidth_prb: int = 24
    oversampling: int = 16
    coarse_timing_noise_s: float = 5e-9
    search_radius_cycles: int | None = None
    dims: int = 2
    target: str | None = None
    target_jitter_m: float = 0.0
    compensate_sync: bool = True
    double_sided: bool = True
    sl_drift_ppm: float | None = None
    turnaround_s: float = 1e-3
    aoa_frame: str = "GCS"
    orientations: Mapping[str, tuple[float, float, float]] = field(default_factory=dict)
    output: str | Path = "results"

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ConfigError(f"unknown technique {self.technique!r}; expected one of {', '.join(TECHNIQUES)}")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError("trials must be a positive integer")
        if self.dims not in (2, 3):
            raise ConfigError("dims must be 2 or 3")
        if self.k not in range(-6, 0):
            raise ConfigError("k must be in -6..-1")
        if not 1 <= self.num_ccs <= 3:
            raise ConfigError("num_ccs must be 1, 2 or 3")
        for name in ("timing_noise_s", "phase_noise_deg", "angle_noise_deg", "coarse_timing_noise_s", "target_jitter_m"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a non-negative number")
        if self.aoa_frame not in ("GCS", "LCS"):
            raise ConfigError("aoa_frame must be GCS or LCS")
        if isinstance(self.hop_plan, Mapping):
            object.__setattr__(self, "hop_plan", HopPlanConfig(**self.hop_plan))

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base_dir: str | Path | None = None) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(doc) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {extra}")
        if "scenario" not in doc or "technique" not in doc:
            raise ConfigError("config needs 'scenario' and 'technique'")
        kw = dict(doc)
        scen = kw["scenario"]
        if isinstance(scen, str) and base_dir is not None and not Path(scen).is_absolute():
            kw["scenario"] = str(Path(base_dir) / scen)
        if isinstance(kw.get("hop_plan"), Mapping):
            try:
                kw["hop_plan"] = HopPlanConfig(**kw["hop_plan"])
            except TypeError as exc:
                raise ConfigError(f"bad hop_plan: {exc}") from None
        if "orientations" in kw:
            kw["orientations"] = {str(k): tuple(float(x) for x in v) for k, v in kw["orientations"].items()}
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)


@dataclass(frozen=True)
class ResultRow:
    trial: int
    true_position: Position3D
    estimate: Position3D | None
    horizontal_error_m: float
    vertical_error_m: float
    converged: bool
    aggregated: bool = False
    hop_provenance: str = "n/a"
    arp_id: str = ""
    sync_source_id: str = ""

    def __post_init__(self):
        if not (self.horizontal_error_m >= 0 and self.vertical_error_m >= 0):
            raise ValueError("errors must be non-negative")

    def csv_fields(self) -> list[str]:
        t = self.true_position
        e = self.estimate
        est = ("", "", "") if e is None else (repr(e.x), repr(e.y), repr(e.z))
        return [
            str(self.trial),
            repr(t.x),
            repr(t.y),
            repr(t.z),
            *est,
            repr(self.horizontal_error_m),
            repr(self.vertical_error_m),
            "true" if self.converged else "false",
            "true" if self.aggregated else "false",
            self.hop_provenance,
            self.arp_id,
            self.sync_source_id,
        ]


# --------------------------------------------------------------------------
# per-trial helpers


@dataclass
class _Outcome:
    estimate: PositionEstimate
    aggregated: bool = False
    hop_provenance: str = "n/a"


def _with_position(scenario: Scenario, node_id: str, pos: Position3D) -> Scenario:
    nodes = tuple(dataclasses.replace(n, position=pos) if n.node_id == node_id else n for n in scenario.nodes)
    return dataclasses.replace(scenario, nodes=nodes)


def _target_id(scenario: Scenario, config: ExperimentConfig) -> str:
    if config.target is not None:
        scenario.node(config.target)
        return config.target
    kinds = (NodeKind.SL_TARGET_UE,) if config.technique.startswith("sl_") else (NodeKind.UE,)
    found = scenario.nodes_of(*kinds)
    if not found:
        raise ConfigError(f"scenario has no {kinds[0].value} node for {config.technique}")
    return found[0].node_id


def _trps(scenario: Scenario) -> list[str]:
    return [n.node_id for n in scenario.nodes_of(NodeKind.TRP)]


def _sync_offsets(scenario: Scenario, ids, compensate: bool):
    if not compensate:
        return None
    out = {}
    for i in ids:
        src = scenario.node(i).sync_source_id
        out[i] = scenario.sync_sources.get(src, 0.0) if src is not None else 0.0
    return out


def _q(config: ExperimentConfig, m: TimingMeasurement) -> TimingMeasurement:
    if not config.quantize:
        return m
    return dataclasses.replace(m, value_s=quantize_timing(m.value_s, ReportingGrid(config.k)))


def _qs(config: ExperimentConfig, value_s: float) -> float:
    return quantize_timing(value_s, ReportingGrid(config.k)) if config.quantize else value_s


def _z(scenario, target, config):
    return None if config.dims == 3 else scenario.node(target).position.z


def _solve_tdoa_from_toas(scenario, toas: Mapping[str, float], target, config, negate_offsets: bool):
    ids = list(toas)
    ref = ids[0]
    rstds = [TimingMeasurement(TimingKind.RSTD, _qs(config, toas[i] - toas[ref]), ref, i) for i in ids[1:]]
    offs = _sync_offsets(scenario, ids, config.compensate_sync)
    if offs is not None and negate_offsets:
        offs = {k: -v for k, v in offs.items()}
    anchors = {i: scenario.node(i).position for i in ids}
    return solve_tdoa(anchors, rstds, dims=config.dims, z=_z(scenario, target, config), sync_offsets_s=offs)


def _dl_tdoa(scenario, target, config, rng, sigma=None):
    sigma = config.timing_noise_s if sigma is None else sigma
    trps = _trps(scenario)
    ref = trps[0]
    rstds = [_q(config, measure_rstd(scenario, target, ref, t, sigma, rng)) for t in trps[1:]]
    anchors = {t: scenario.node(t).position for t in trps}
    offs = _sync_offsets(scenario, trps, config.compensate_sync)
    return solve_tdoa(anchors, rstds, dims=config.dims, z=_z(scenario, target, config), sync_offsets_s=offs)


def _ul_tdoa(scenario, target, config, rng):
    toas = {t: measure_rtoa(scenario, t, target, config.timing_noise_s, rng).value_s for t in _trps(scenario)}
    return _solve_tdoa_from_toas(scenario, toas, target, config, negate_offsets=True)


def _rtt(scenario, target, config, rng, sigma=None):
    sigma = config.timing_noise_s if sigma is None else sigma
    trps = _trps(scenario)
    rtts = []
    for t in trps:
        ue = _q(config, measure_rxtx_diff(scenario, target, t, sigma, rng))
        gnb = _q(config, measure_rxtx_diff(scenario, t, target, sigma, rng))
        rtts.append(rtt_from_pair(ue, gnb))
    anchors = [scenario.node(t).position for t in trps]
    return solve_rtt(anchors, rtts, dims=config.dims, z=_z(scenario, target, config))


def _aoa(scenario, target, config, rng):
    trps = _trps(scenario)
    angles = [measure_aoa(scenario, t, target, noise_sigma_deg=config.angle_noise_deg, rng=rng) for t in trps]
    return solve_aoa([scenario.node(t).position for t in trps], angles, dims=2, z=scenario.node(target).position.z)


def _coarse_cov(coarse: PositionEstimate, sigma_s: float, c: float):
    if coarse.covariance_proxy is None or sigma_s <= 0:
        return None
    return np.asarray(coarse.covariance_proxy) * (c * sigma_s) ** 2


def _pfl(scenario: Scenario) -> str:
    return sorted(scenario.carrier_frequencies)[0]


def _phase(config, obs):
    if not config.quantize:
        return obs
    return dataclasses.replace(obs, value_deg=cp.quantize_phase(obs.value_deg, obs.range))


def _carrier_phase_dd(scenario, target, config, rng):
    prus = scenario.nodes_of(NodeKind.PRU)
    if not prus:
        raise ConfigError("carrier_phase_dd needs a PRU in the scenario")
    pru = prus[0].node_id
    pfl = _pfl(scenario)
    coarse = _dl_tdoa(scenario, target, config, rng, sigma=config.coarse_timing_noise_s)
    trps = _trps(scenario)
    ref = trps[0]
    sigma = config.phase_noise_deg

    def meas(trp, rx):
        return _phase(config, cp.measure_dl_rscp(scenario, trp, None, rx, None, pfl, noise_sigma_deg=sigma, rng=rng))

    ue = {t: meas(t, target) for t in trps}
    ref_unit = {t: meas(t, pru) for t in trps}
    dds, pairs = [], []
    for t in trps[1:]:
        a = _phase(config, cp.rscpd(ue[ref], ue[t]))
        b = _phase(config, cp.rscpd(ref_unit[ref], ref_unit[t]))
        dds.append(cp.double_difference(a, b))
        pairs.append((scenario.node(ref).position, scenario.node(t).position))
    lam = scenario.wavelength(pfl)
    cov = _coarse_cov(coarse, config.coarse_timing_noise_s, scenario.speed_of_light)
    radius = config.search_radius_cycles if config.search_radius_cycles is not None or cov is not None else 3
    sol = cp.solve_carrier_phase(coarse.position, dds, pairs, lam, scenario.node(pru).position, radius, dims=2,
                                 coarse_covariance=cov)
    return PositionEstimate(sol.position, sol.residual_deg, 1, sol.fixed and coarse.converged)


def _carrier_phase_rtt_like(scenario, target, config, rng):
    pfl = _pfl(scenario)
    coarse = _rtt(scenario, target, config, rng, sigma=config.coarse_timing_noise_s)
    trps = _trps(scenario)
    sigma = config.phase_noise_deg
    combined = []
    for t in trps:
        dl = _phase(config, cp.measure_dl_rscp(scenario, t, None, target, None, pfl, noise_sigma_deg=sigma, rng=rng))
        ul = _phase(config, cp.measure_ul_rscp(scenario, target, None, t, None, pfl, noise_sigma_deg=sigma, rng=rng))
        combined.append(cp.rtt_like_combine(dl, ul, same_oscillator=scenario.same_oscillator))
    lam = scenario.wavelength(pfl)
    # each RTT contributes (rxtx_ue + rxtx_gnb): noise variance doubles, range halves it
    cov = _coarse_cov(coarse, config.coarse_timing_noise_s * math.sqrt(2) / 2, scenario.speed_of_light)
    radius = config.search_radius_cycles if config.search_radius_cycles is not None or cov is not None else 3
    sol = cp.solve_rtt_like_phase(coarse.position, combined, [scenario.node(t).position for t in trps], lam, radius,
                                  coarse_covariance=cov)
    return PositionEstimate(sol.position, sol.residual_deg, 1, sol.fixed and coarse.converged)


def _next_prime(n: int) -> int:
    def is_prime(v):
        return v >= 2 and all(v % d for d in range(2, math.isqrt(v) + 1))

    while not is_prime(n):
        n += 1
    return n


def _fh_tdoa(scenario, target, config, rng):
    plan = config.hop_plan.build()
    ref_hops = sg.generate_srs_zc(plan, root_u=1, n_zc=_next_prime(plan.total_subcarriers))
    toas = {}
    for t in _trps(scenario):
        delay = measure_rtoa(scenario, t, target).value_s
        est = []
        for ref in ref_hops:
            rx = sg.apply_channel(ref, delay, per_hop_phase_rad=float(rng.uniform(-math.pi, math.pi)),
                                  snr_db=config.snr_db, rng=rng)
            est.append(sg.ls_estimate(rx, ref))
        stitched = sg.stitch_hops(est, plan)
        toas[t] = sg.estimate_toa(stitched, config.oversampling)
    return _Outcome(_solve_tdoa_from_toas(scenario, toas, target, config, negate_offsets=True),
                    hop_provenance="multi_hop" if plan.num_hops > 1 else "single_hop")


def _bw_agg_tdoa(scenario, target, config, rng):
    ccs = [
        sg.ResourceConfig(bandwidth_prb=config.cc_bandwidth_prb, start_prb=i * config.cc_bandwidth_prb,
                          pfl_or_cc_id=f"cc{i}", link_tag="agg")
        for i in range(config.num_ccs)
    ]
    linked = sg.link_resources(ccs, "agg") if len(ccs) > 1 else None
    refs = [sg.qpsk_sequence(cc.first_subcarrier, cc.num_subcarriers, seed=i, scs_hz=cc.scs_hz) for i, cc in enumerate(ccs)]
    trps = _trps(scenario)
    toas = {}
    for t in trps:
        # DL PRS arrival in the UE clock
        delay = measure_rtoa(scenario, target, t).value_s
        phase = float(rng.uniform(-math.pi, math.pi))
        est = [sg.ls_estimate(sg.apply_channel(r, delay, phase, snr_db=config.snr_db, rng=rng), r) for r in refs]
        toas[t] = sg.estimate_toa(sg.aggregate_linked(est, linked), config.oversampling)
    return _Outcome(_solve_tdoa_from_toas(scenario, toas, target, config, negate_offsets=False),
                    aggregated=len(ccs) > 1)


def _view(scenario, target, config):
    known = None if config.compensate_sync else {}
    return sl.SLScenarioView.from_scenario(scenario, target=target, known_sources=known)


def _sl_tdoa_dl(scenario, target, config, rng):
    view = _view(scenario, target, config)
    return sl.sl_tdoa_dl_like(view, noise_sigma_s=config.timing_noise_s, compensate=config.compensate_sync,
                              dims=config.dims, rng=rng).estimate


def _sl_tdoa_ul(scenario, target, config, rng):
    view = _view(scenario, target, config)
    return sl.sl_tdoa_ul_like(view, noise_sigma_s=config.timing_noise_s, compensate=config.compensate_sync,
                              dims=config.dims, rng=rng).estimate


def _sl_rtt(scenario, target, config, rng):
    view = _view(scenario, target, config)
    c = scenario.speed_of_light
    rtts = []
    for a in view.anchors:
        r = sl.sl_rtt(view, a, target, config.double_sided, config.sl_drift_ppm, config.turnaround_s)
        if config.timing_noise_s > 0:
            r += float(rng.normal(0.0, c * config.timing_noise_s / 2))
        rtts.append(_qs(config, 2 * r / c))
    anchors = [scenario.node(a).position for a in view.anchors]
    return solve_rtt(anchors, rtts, dims=config.dims, z=_z(scenario, target, config))


def _sl_aoa(scenario, target, config, rng):
    view = _view(scenario, target, config)
    orient = {k: Orientation(*v) for k, v in config.orientations.items()}
    return sl.sl_aoa(view, Frame(config.aoa_frame), orient, config.angle_noise_deg, rng).estimate


_RUNNERS = {
    "dl_tdoa": _dl_tdoa,
    "ul_tdoa": _ul_tdoa,
    "rtt": _rtt,
    "aoa": _aoa,
    "carrier_phase_dd": _carrier_phase_dd,
    "carrier_phase_rtt_like": _carrier_phase_rtt_like,
    "fh_tdoa": _fh_tdoa,
    "bw_agg_tdoa": _bw_agg_tdoa,
    "sl_tdoa_dl": _sl_tdoa_dl,
    "sl_tdoa_ul": _sl_tdoa_ul,
    "sl_rtt": _sl_rtt,
    "sl_aoa": _sl_aoa,
}


def _base_scenario(config: ExperimentConfig) -> Scenario:
    if isinstance(config.scenario, Scenario):
        sc = config.scenario
        return sc if config.seed is None else sc.with_seed(config.seed)
    try:
        return load_scenario(config.scenario, seed=config.seed)
    except ScenarioError as exc:
        raise ConfigError(f"scenario {config.scenario}: {exc}") from None


def run_trial(scenario: Scenario, target: str, config: ExperimentConfig, trial: int) -> ResultRow:
    rng = derive_rng(scenario.seed, f"trial/{config.technique}", trial)
    truth = scenario.node(target).position
    if config.target_jitter_m > 0:
        j = config.target_jitter_m
        dx, dy = rng.uniform(-j, j, size=2)
        truth = Position3D(truth.x + float(dx), truth.y + float(dy), truth.z)
        scenario = _with_position(scenario, target, truth)
    node = scenario.node(target)
    flags = dict(arp_id=node.panel().arp_id, sync_source_id=node.sync_source_id or "none")
    try:
        out = _RUNNERS[config.technique](scenario, target, config, rng)
    except (ValueError, np.linalg.LinAlgError, ArithmeticError):
        # a failed fix is a data point, not a crash
        inf = math.inf
        return ResultRow(trial, truth, None, inf, inf, False, **flags)
    if isinstance(out, PositionEstimate):
        out = _Outcome(out)
    p = out.estimate.position
    h = math.hypot(p.x - truth.x, p.y - truth.y)
    v = abs(p.z - truth.z)
    if not (math.isfinite(h) and math.isfinite(v)):
        return ResultRow(trial, truth, None, math.inf, math.inf, False, out.aggregated, out.hop_provenance, **flags)
    return ResultRow(trial, truth, p, h, v, out.estimate.converged, out.aggregated, out.hop_provenance, **flags)


def run_experiment(config: ExperimentConfig) -> list[ResultRow]:
    """Run ``config.trials`` independent trials; row ``i`` uses RNG stream ``i``."""
    scenario = _base_scenario(config)
    target = _target_id(scenario, config)
    return [run_trial(scenario, target, config, i) for i in range(config.trials)]


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


def write_results(rows: Sequence[ResultRow], path: str | Path) -> None:
    Path(path).write_text(rows_to_csv(rows), encoding="utf-8")


def read_results(path: str | Path) -> list[ResultRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for rec in reader:
            est = None
            if rec["est_x"] != "":
                est = Position3D(float(rec["est_x"]), float(rec["est_y"]), float(rec["est_z"]))
            rows.append(ResultRow(
                trial=int(rec["trial"]),
                true_position=Position3D(float(rec["true_x"]), float(rec["true_y"]), float(rec["true_z"])),
                estimate=est,
                horizontal_error_m=float(rec["horizontal_error_m"]),
                vertical_error_m=float(rec["vertical_error_m"]),
                converged=rec["converged"] == "true",
                aggregated=rec["aggregated"] == "true",
                hop_provenance=rec["hop_provenance"],
                arp_id=rec["arp_id"],
                sync_source_id=rec["sync_source_id"],
            ))
    return rows


# --------------------------------------------------------------------------
# statistics


def nearest_rank(sorted_values: Sequence[float], percent: float) -> float:
    if not sorted_values:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(percent / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass(frozen=True)
class Summary:
    count: int
    convergence_rate: float
    rmse_m: float
    mean_m: float
    p50_m: float
    p67_m: float
    p90_m: float
    p95_m: float

    def to_dict(self) -> dict[str, Any]:
        # failed fixes carry infinite error; JSON has no infinity, so they become null
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in dataclasses.asdict(self).items()}


def summarize(rows: Sequence[ResultRow]) -> Summary:
    """Horizontal-error statistics.

    RMSE and mean cover rows with a finite error; percentiles cover every
    row, so failed fixes push the upper percentiles to infinity.
    """
    if not rows:
        raise ValueError("cannot summarize zero rows")
    errs = sorted(r.horizontal_error_m for r in rows)
    finite = [e for e in errs if math.isfinite(e)]
    rmse = math.sqrt(sum(e * e for e in finite) / len(finite)) if finite else math.inf
    mean = sum(finite) / len(finite) if finite else math.inf
    return Summary(
        count=len(rows),
        convergence_rate=sum(r.converged for r in rows) / len(rows),
        rmse_m=rmse,
        mean_m=mean,
        p50_m=nearest_rank(errs, 50),
        p67_m=nearest_rank(errs, 67),
        p90_m=nearest_rank(errs, 90),
        p95_m=nearest_rank(errs, 95),
    )


def write_summary(summary: Summary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
