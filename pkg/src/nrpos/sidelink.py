"""Sidelink positioning: SL-TDOA (DL-like and UL-like), SL-RTT, SL-AoA, per-ARP reports.

Anchor UEs may follow different synchronization sources. Each source adds
its own offset to the clocks of the UEs that follow it (see
``Scenario.sync_sources``); the location server compensates only for the
sources it knows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .measurements import (
    AngleMeasurement,
    Frame,
    Orientation,
    TimingKind,
    TimingMeasurement,
    lcs_to_gcs,
    measure_aoa,
    measure_rstd,
    measure_rtoa,
)
from .scenario import NodeKind, Position3D, Scenario, distance
from .solvers import PositionEstimate, UnderdeterminedError, solve_aoa, solve_tdoa

COVERAGE_STATES = ("in_coverage", "partial", "out_of_coverage")
DEFAULT_BANDWIDTH_PRB = 52


class UnsupportedBandwidthError(ValueError):
    pass


def required_samples(bandwidth_prb: int) -> int:
    """Measurement samples needed for an SL PRS of the given bandwidth.

    One sample above 48 PRBs, four from 24 to 48 PRBs inclusive.
    """
    if bandwidth_prb > 48:
        return 1
    if bandwidth_prb >= 24:
        return 4
    raise UnsupportedBandwidthError(f"SL PRS bandwidth {bandwidth_prb} PRB is below 24 PRB")


@dataclass(frozen=True)
class SLMeasurementReport:
    measurement: TimingMeasurement | AngleMeasurement
    sync_source_id: str
    arp_id: str
    reporter: str
    bandwidth_prb: int = DEFAULT_BANDWIDTH_PRB
    sample_count: int = 1
    excluded: bool = False

    def __post_init__(self):
        if not self.sync_source_id:
            raise ValueError("SL reports carry the synchronization source used")
        if not self.arp_id:
            raise ValueError("SL reports carry the ARP identity")
        if self.sample_count != required_samples(self.bandwidth_prb):
            raise ValueError(
                f"{self.bandwidth_prb} PRB needs {required_samples(self.bandwidth_prb)} samples, got {self.sample_count}"
            )


@dataclass(frozen=True)
class SLScenarioView:
    scenario: Scenario
    target: str
    anchors: tuple[str, ...]
    coverage: Mapping[str, str] = field(default_factory=dict)
    # sync-source offsets the location server knows; None means "all of the scenario's"
    known_sources: Mapping[str, float] | None = None

    def __post_init__(self):
        sc = self.scenario
        if sc.node(self.target).kind not in (NodeKind.SL_TARGET_UE, NodeKind.UE):
            raise ValueError(f"{self.target} is not a sidelink target UE")
        for a in self.anchors:
            if sc.node(a).kind is not NodeKind.SL_ANCHOR_UE:
                raise ValueError(f"{a} is not a sidelink anchor UE")
        for ue, state in self.coverage.items():
            if state not in COVERAGE_STATES:
                raise ValueError(f"{ue}: coverage state must be one of {COVERAGE_STATES}")
        object.__setattr__(self, "anchors", tuple(self.anchors))

    @classmethod
    def from_scenario(cls, scenario: Scenario, **kw) -> "SLScenarioView":
        target = kw.pop("target", None)
        if target is None:
            target = scenario.nodes_of(NodeKind.SL_TARGET_UE)[0].node_id
        anchors = kw.pop("anchors", None)
        if anchors is None:
            anchors = tuple(n.node_id for n in scenario.nodes_of(NodeKind.SL_ANCHOR_UE))
        return cls(scenario, target, tuple(anchors), **kw)

    def sync_source(self, ue: str) -> str:
        return self.scenario.node(ue).sync_source_id or "none"

    def known_offsets(self) -> Mapping[str, float]:
        return dict(self.scenario.sync_sources) if self.known_sources is None else dict(self.known_sources)

    def source_known(self, ue: str) -> bool:
        src = self.scenario.node(ue).sync_source_id
        return src is None or src in self.known_offsets()

    def compensation(self, ue: str) -> float:
        src = self.scenario.node(ue).sync_source_id
        return self.known_offsets().get(src, 0.0) if src is not None else 0.0


@dataclass(frozen=True)
class SLPositioningResult:
    reports: tuple[SLMeasurementReport, ...]
    estimate: PositionEstimate
    transmissions: int


def _report(view, measurement, reporter, arp_id, bandwidth_prb, excluded=False):
    return SLMeasurementReport(
        measurement=measurement,
        sync_source_id=view.sync_source(reporter),
        arp_id=arp_id or view.scenario.node(reporter).panel().arp_id,
        reporter=reporter,
        bandwidth_prb=bandwidth_prb,
        sample_count=required_samples(bandwidth_prb),
        excluded=excluded,
    )


def _anchor_positions(view):
    # the target measures or transmits at its default ARP; shifting the anchors
    # by that panel's offset makes the fix refer to the node reference point
    offset = view.scenario.node(view.target).panel().offset
    return {a: view.scenario.node(a).position - offset for a in view.anchors}


def sl_tdoa_dl_like(
    view: SLScenarioView,
    ref_anchor: str | None = None,
    noise_sigma_s: float = 0.0,
    compensate: bool = True,
    dims: int = 2,
    rng: np.random.Generator | None = None,
    bandwidth_prb: int = DEFAULT_BANDWIDTH_PRB,
) -> SLPositioningResult:
    """Target measures SL RSTDs of the anchors' SL PRS against a reference anchor.

    With ``compensate`` the known sync-source offsets of each anchor pair are
    removed before solving; anchors on unknown sources are excluded.
    """
    sc = view.scenario
    usable = [a for a in view.anchors if not compensate or view.source_known(a)]
    ref = ref_anchor if ref_anchor is not None else usable[0] if usable else None
    if ref is None or len(usable) < dims + 2:
        raise UnderdeterminedError(f"DL-like SL-TDOA with {len(usable)} usable anchors in {dims}D")
    others = [a for a in view.anchors if a != ref]
    reports, rstds = [], []
    for a in others:
        m = measure_rstd(sc, view.target, ref, a, noise_sigma_s, rng)
        excluded = a not in usable
        reports.append(_report(view, m, view.target, m.arp_id, bandwidth_prb, excluded))
        if not excluded:
            rstds.append(m)
    offsets = {a: view.compensation(a) for a in usable} if compensate else None
    target_z = sc.node(view.target).position.z
    est = solve_tdoa(_anchor_positions(view), rstds, dims=dims, z=target_z, sync_offsets_s=offsets)
    return SLPositioningResult(tuple(reports), est, transmissions=len(view.anchors))


def sl_tdoa_ul_like(
    view: SLScenarioView,
    noise_sigma_s: float = 0.0,
    compensate: bool = True,
    dims: int = 2,
    rng: np.random.Generator | None = None,
    bandwidth_prb: int = DEFAULT_BANDWIDTH_PRB,
) -> SLPositioningResult:
    """Anchors measure SL RTOA of one SL PRS sent by the target.

    RTOAs are differenced against the first usable anchor, which removes the
    unknown transmit time; the anchors' receive clock offsets remain and are
    compensated from the known sync sources.
    """
    sc = view.scenario
    reports, rtoas = [], {}
    for a in view.anchors:
        m = measure_rtoa(sc, a, view.target, noise_sigma_s, rng)
        excluded = compensate and not view.source_known(a)
        reports.append(_report(view, m, a, m.arp_id, bandwidth_prb, excluded))
        if not excluded:
            rtoas[a] = m
    usable = list(rtoas)
    if len(usable) < dims + 2:
        raise UnderdeterminedError(f"UL-like SL-TDOA with {len(usable)} usable anchors in {dims}D")
    ref = usable[0]
    diffs = [
        TimingMeasurement(TimingKind.RSTD, rtoas[a].value_s - rtoas[ref].value_s, ref, a)
        for a in usable[1:]
    ]
    # an RTOA carries -o_rx, so the receive offsets enter the difference negated
    offsets = {a: -view.compensation(a) for a in usable} if compensate else None
    target_z = sc.node(view.target).position.z
    est = solve_tdoa(_anchor_positions(view), diffs, dims=dims, z=target_z, sync_offsets_s=offsets)
    return SLPositioningResult(tuple(reports), est, transmissions=1)


def _sl_rtt_exact(view, anchor, target, double_sided, drift_ppm, turnaround_s):
    sc = view.scenario
    target = view.target if target is None else target
    d = Fraction(distance(sc.node(anchor).position, sc.node(target).position))
    c = Fraction(sc.speed_of_light)
    tof = d / c
    if drift_ppm is None:
        e_a = Fraction(sc.node(anchor).clock_drift_ppm) / 10**6
        e_t = Fraction(sc.node(target).clock_drift_ppm) / 10**6
    else:
        e_a = Fraction(drift_ppm) / 10**6 / 2
        e_t = -e_a
    reply = Fraction(turnaround_s)
    # target initiates; a node with rate error e measures an interval T as T*(1+e)
    round_t = (2 * tof + reply) * (1 + e_t)  # target Rx-Tx (reception of the reply minus own Tx)
    reply_a = reply * (1 + e_a)  # anchor turnaround
    if not double_sided:
        return c * (round_t - reply_a) / 2, d
    round_a = (2 * tof + reply) * (1 + e_a)
    reply_t = reply * (1 + e_t)
    tof_est = (round_t * round_a - reply_a * reply_t) / (round_t + round_a + reply_a + reply_t)
    return c * tof_est, d


def sl_rtt(
    view: SLScenarioView,
    anchor: str,
    target: str | None = None,
    double_sided: bool = True,
    drift_ppm: float | None = None,
    turnaround_s: float = 1e-3,
) -> float:
    """Range between two UEs from UE Rx-Tx time differences.

    ``drift_ppm`` is the frequency offset of the anchor clock relative to the
    target clock, split symmetrically (+/- half on each side); when omitted
    the nodes' own ``clock_drift_ppm`` values are used. Single-sided ranging
    keeps a first-order ``c * drift * turnaround / 2`` error; the
    double-sided exchange removes every first-order term. Timestamps are kept
    as exact rationals so second-order residuals stay measurable.
    """
    est, _ = _sl_rtt_exact(view, anchor, target, double_sided, drift_ppm, turnaround_s)
    return float(est)


def sl_rtt_error(
    view: SLScenarioView,
    anchor: str,
    target: str | None = None,
    double_sided: bool = True,
    drift_ppm: float | None = None,
    turnaround_s: float = 1e-3,
) -> Fraction:
    """Exact range error of :func:`sl_rtt` (estimate minus true distance) in meters."""
    est, d = _sl_rtt_exact(view, anchor, target, double_sided, drift_ppm, turnaround_s)
    return est - d


def sl_aoa(
    view: SLScenarioView,
    frame: Frame | str = Frame.GCS,
    orientations: Mapping[str, Orientation] | None = None,
    noise_sigma_deg: float = 0.0,
    rng: np.random.Generator | None = None,
    bandwidth_prb: int = DEFAULT_BANDWIDTH_PRB,
) -> SLPositioningResult:
    """Anchors measure the arrival angle of the target's SL PRS; the server triangulates.

    LCS reports are rotated into the GCS with each anchor's orientation
    before triangulation. The fix refers to the target's node position, not
    to the panel it transmits from.
    """
    sc = view.scenario
    frame = Frame(frame)
    orientations = orientations or {}
    if len(view.anchors) < 2:
        raise UnderdeterminedError("SL-AoA needs at least two anchors")
    reports, gcs = [], []
    for a in view.anchors:
        orient = orientations.get(a)
        if frame is Frame.LCS and orient is None:
            raise ValueError(f"LCS report from {a} has no orientation to convert it with")
        m = measure_aoa(sc, a, view.target, frame, orient, noise_sigma_deg=noise_sigma_deg, rng=rng)
        reports.append(_report(view, m, a, m.arp_id, bandwidth_prb))
        gcs.append(lcs_to_gcs(m) if m.frame is Frame.LCS else m)
    positions = _anchor_positions(view)
    est = solve_aoa([positions[a] for a in view.anchors], gcs, dims=2, z=sc.node(view.target).position.z)
    return SLPositioningResult(tuple(reports), est, transmissions=1)


def measure_per_arp(
    view: SLScenarioView,
    target: str,
    peer: str,
    direction: str = "rx",
    noise_sigma_deg: float = 0.0,
    rng: np.random.Generator | None = None,
    bandwidth_prb: int = DEFAULT_BANDWIDTH_PRB,
) -> list[SLMeasurementReport]:
    """One angle report per target antenna panel, tagged with its ARP.

    ``direction="rx"``: each target panel measures the peer's SL PRS.
    ``direction="tx"``: the peer measures the SL PRS sent from each target panel.
    """
    sc = view.scenario
    node = sc.node(target)
    out = []
    for panel in node.panels:
        if direction == "rx":
            m = measure_aoa(sc, target, peer, rx_arp=panel.arp_id, noise_sigma_deg=noise_sigma_deg, rng=rng)
            reporter = target
        elif direction == "tx":
            m = measure_aoa(sc, peer, target, tx_arp=panel.arp_id, noise_sigma_deg=noise_sigma_deg, rng=rng)
            reporter = peer
        else:
            raise ValueError("direction must be 'rx' or 'tx'")
        out.append(_report(view, m, reporter, panel.arp_id, bandwidth_prb))
    return out


def locate_arp_reference(
    reports: Sequence[SLMeasurementReport],
    anchor_positions: Mapping[str, Position3D],
    panel_offsets: Mapping[str, Position3D],
    z: float = 0.0,
) -> PositionEstimate:
    """Node reference point from anchor-side angle reports of ARP-tagged transmissions.

    A bearing from anchor ``a`` to ARP ``p + o`` is a bearing from ``a - o``
    to ``p``, so each report is re-anchored by its panel offset and all are
    triangulated together.
    """
    anchors, angles = [], []
    for r in reports:
        if r.excluded:
            continue
        m = r.measurement
        if not isinstance(m, AngleMeasurement):
            raise TypeError("ARP reference location uses angle reports")
        m = lcs_to_gcs(m) if m.frame is Frame.LCS else m
        anchors.append(anchor_positions[r.reporter] - panel_offsets[r.arp_id])
        angles.append(m)
    return solve_aoa(anchors, angles, dims=2, z=z)
