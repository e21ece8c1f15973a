"""Timing and angle observables, reporting grids and LCS/GCS rotation.

Clock model: a node with offset ``o`` lags true time, stamping an event at
true time ``t`` as ``t - o``, and transmits its frame boundary at local time
zero (true time ``o``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .scenario import NodeKind, Scenario, distance

TC_S = 1.0 / (480000 * 4096)  # NR basic time unit
GRID_EXPONENTS = range(-6, 0)


class TimingKind(str, Enum):
    RSTD = "RSTD"
    RTOA = "RTOA"
    UE_RXTX = "UE_RXTX"
    GNB_RXTX = "GNB_RXTX"


class HopProvenance(str, Enum):
    SINGLE_HOP = "single_hop"
    MULTI_HOP = "multi_hop"
    NA = "n/a"


class Frame(str, Enum):
    GCS = "GCS"
    LCS = "LCS"


@dataclass(frozen=True)
class TimingMeasurement:
    kind: TimingKind
    value_s: float
    ref_node: str
    other_node: str
    arp_id: str | None = None
    time_s: float = 0.0
    hop_provenance: HopProvenance = HopProvenance.NA
    aggregated: bool = False
    pfl_set: tuple[str, ...] = ()

    def __post_init__(self):
        if not math.isfinite(self.value_s):
            raise ValueError("timing value must be finite")


@dataclass(frozen=True)
class Orientation:
    """LCS orientation: bearing, downtilt and slant, in degrees."""

    bearing_deg: float = 0.0
    downtilt_deg: float = 0.0
    slant_deg: float = 0.0


@dataclass(frozen=True)
class AngleMeasurement:
    azimuth_deg: float
    zenith_deg: float
    frame: Frame = Frame.GCS
    orientation: Orientation | None = None
    arp_id: str | None = None
    rx_node: str | None = None
    tx_node: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise ValueError(f"azimuth {self.azimuth_deg} outside [0, 360)")
        if not 0.0 <= self.zenith_deg <= 180.0:
            raise ValueError(f"zenith {self.zenith_deg} outside [0, 180]")
        if self.frame is Frame.LCS and self.orientation is None:
            raise ValueError("LCS angles need the orientation they are relative to")

    def direction(self) -> np.ndarray:
        return angles_to_unit(self.azimuth_deg, self.zenith_deg)


@dataclass(frozen=True)
class ReportingGrid:
    k: int = -1
    tc_s: float = field(default=TC_S, repr=False)

    def __post_init__(self):
        if self.k not in GRID_EXPONENTS:
            raise ValueError(f"k must be in -6..-1, got {self.k}")

    @property
    def step_s(self) -> float:
        return math.ldexp(self.tc_s, self.k)


def _gauss(scenario, label, sigma, rng):
    if sigma <= 0:
        return 0.0
    rng = scenario.rng(label) if rng is None else rng
    return float(rng.normal(0.0, sigma))


def _path(scenario, tx, rx, tx_arp=None, rx_arp=None):
    return distance(scenario.node(tx).arp_position(tx_arp), scenario.node(rx).arp_position(rx_arp))


def measure_rstd(
    scenario: Scenario,
    ue: str,
    trp_ref: str,
    trp_other: str,
    noise_sigma_s: float = 0.0,
    rng: np.random.Generator | None = None,
    ue_arp: str | None = None,
) -> TimingMeasurement:
    """Arrival-time difference ``other - ref`` at the UE."""
    c = scenario.speed_of_light
    d_ref = _path(scenario, trp_ref, ue, rx_arp=ue_arp)
    d_other = _path(scenario, trp_other, ue, rx_arp=ue_arp)
    sync = scenario.time_offset(trp_other) - scenario.time_offset(trp_ref)
    value = (d_other - d_ref) / c + sync
    value += _gauss(scenario, f"rstd/{ue}/{trp_ref}/{trp_other}", noise_sigma_s, rng)
    return TimingMeasurement(TimingKind.RSTD, value, trp_ref, trp_other, arp_id=ue_arp)


def measure_rtoa(
    scenario: Scenario,
    rx_node: str,
    tx_node: str,
    noise_sigma_s: float = 0.0,
    rng: np.random.Generator | None = None,
    rx_arp: str | None = None,
) -> TimingMeasurement:
    """Arrival time of ``tx_node``'s signal in ``rx_node``'s clock: ``d/c + o_tx - o_rx``."""
    c = scenario.speed_of_light
    d = _path(scenario, tx_node, rx_node, rx_arp=rx_arp)
    value = d / c + scenario.time_offset(tx_node) - scenario.time_offset(rx_node)
    value += _gauss(scenario, f"rtoa/{rx_node}/{tx_node}", noise_sigma_s, rng)
    return TimingMeasurement(TimingKind.RTOA, value, tx_node, rx_node, arp_id=rx_arp)


def measure_rxtx_diff(
    scenario: Scenario,
    node: str,
    peer: str,
    noise_sigma_s: float = 0.0,
    rng: np.random.Generator | None = None,
) -> TimingMeasurement:
    """Rx-Tx time difference at ``node``: reception of ``peer`` minus own transmission."""
    c = scenario.speed_of_light
    d = _path(scenario, peer, node)
    value = d / c + scenario.time_offset(peer) - scenario.time_offset(node)
    value += _gauss(scenario, f"rxtx/{node}/{peer}", noise_sigma_s, rng)
    kind = TimingKind.GNB_RXTX if scenario.node(node).kind is NodeKind.TRP else TimingKind.UE_RXTX
    return TimingMeasurement(kind, value, node, peer)


def rtt_from_pair(ue_rxtx: TimingMeasurement, gnb_rxtx: TimingMeasurement) -> float:
    return ue_rxtx.value_s + gnb_rxtx.value_s


# --------------------------------------------------------------------------
# angles


def angles_to_unit(azimuth_deg: float, zenith_deg: float) -> np.ndarray:
    az, ze = math.radians(azimuth_deg), math.radians(zenith_deg)
    return np.array([math.sin(ze) * math.cos(az), math.sin(ze) * math.sin(az), math.cos(ze)])


def unit_to_angles(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("direction undefined for a zero vector")
    x, y, z = v / n
    az = math.degrees(math.atan2(y, x)) % 360.0
    if az >= 360.0:
        az = 0.0
    ze = math.degrees(math.acos(max(-1.0, min(1.0, z))))
    return az, ze


def rotation_matrix(orientation: Orientation) -> np.ndarray:
    """LCS to GCS rotation, ``Rz(bearing) @ Ry(downtilt) @ Rx(slant)``."""
    a = math.radians(orientation.bearing_deg)
    b = math.radians(orientation.downtilt_deg)
    g = math.radians(orientation.slant_deg)
    rz = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[math.cos(b), 0.0, math.sin(b)], [0.0, 1.0, 0.0], [-math.sin(b), 0.0, math.cos(b)]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(g), -math.sin(g)], [0.0, math.sin(g), math.cos(g)]])
    return rz @ ry @ rx


def lcs_to_gcs(angles: AngleMeasurement, orientation: Orientation | None = None) -> AngleMeasurement:
    if angles.frame is not Frame.LCS:
        raise ValueError("input angles are not in a local coordinate system")
    orientation = angles.orientation if orientation is None else orientation
    v = rotation_matrix(orientation) @ angles.direction()
    az, ze = unit_to_angles(v)
    return AngleMeasurement(az, ze, Frame.GCS, None, angles.arp_id, angles.rx_node, angles.tx_node)


def gcs_to_lcs(angles: AngleMeasurement, orientation: Orientation) -> AngleMeasurement:
    if angles.frame is not Frame.GCS:
        raise ValueError("input angles are not in the global coordinate system")
    v = rotation_matrix(orientation).T @ angles.direction()
    az, ze = unit_to_angles(v)
    return AngleMeasurement(az, ze, Frame.LCS, orientation, angles.arp_id, angles.rx_node, angles.tx_node)


def measure_aoa(
    scenario: Scenario,
    rx_node: str,
    tx_node: str,
    frame: Frame | str = Frame.GCS,
    orientation: Orientation | None = None,
    rx_arp: str | None = None,
    tx_arp: str | None = None,
    noise_sigma_deg: float = 0.0,
    rng: np.random.Generator | None = None,
) -> AngleMeasurement:
    """Direction from the receiving ARP toward the transmitting ARP.

    Azimuth counts counter-clockwise from +x, zenith down from +z. Noise,
    when requested, perturbs both angles independently.
    """
    frame = Frame(frame)
    src = scenario.node(tx_node).arp_position(tx_arp)
    dst = scenario.node(rx_node).arp_position(rx_arp)
    v = (src - dst).as_array()
    if not np.any(v):
        raise ValueError(f"{rx_node} and {tx_node} coincide; arrival direction undefined")
    if frame is Frame.LCS:
        if orientation is None:
            raise ValueError("LCS measurement needs the receiver orientation")
        v = rotation_matrix(orientation).T @ v
    az, ze = unit_to_angles(v)
    if noise_sigma_deg > 0:
        rng = scenario.rng(f"aoa/{rx_node}/{rx_arp}/{tx_node}/{tx_arp}") if rng is None else rng
        az = (az + rng.normal(0.0, noise_sigma_deg)) % 360.0
        ze = min(180.0, max(0.0, ze + rng.normal(0.0, noise_sigma_deg)))
    if az >= 360.0:
        az = 0.0
    arp = rx_arp if rx_arp is not None else scenario.node(rx_node).panel().arp_id
    return AngleMeasurement(az, ze, frame, orientation if frame is Frame.LCS else None, arp, rx_node, tx_node)


def quantize_timing(value_s: float, grid: ReportingGrid) -> float:
    """Round to the nearest multiple of ``2**k * Tc``, ties away from zero."""
    step = grid.step_s
    q = value_s / step
    n = math.floor(abs(q) + 0.5)
    return math.copysign(n * step, value_s) if n else 0.0
