"""Frequency-domain reference-signal models.

Signals and channel estimates are both carried as values on a set of
absolute subcarrier indices (:class:`ChannelEstimate`). There is no
time-domain OFDM modulation: a delay ``tau`` is the per-subcarrier phase
ramp ``exp(-2j*pi*m*scs*tau)``, which is all a ToA estimator sees.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .scenario import derive_rng

SC_PER_PRB = 12
SCS_KHZ = (15, 30, 60, 120)
SL_SCS_KHZ = {"FR1": (15, 30, 60), "FR2": (60, 120)}
COMB_SIZES = {"DL": (2, 4, 6, 12), "SL": (1, 2, 4, 6), "UL": (1, 2, 4, 8)}
MAX_SYMBOLS = {"DL": 12, "SL": 8, "UL": 12}
# DL PRS symbol counts allowed per comb size
DL_SYMBOLS = {2: (2, 4, 6, 12), 4: (4, 12), 6: (6, 12), 12: (12,)}
# relative RE offset per symbol; one period of each covers every offset once
STAGGER = {
    1: (0,),
    2: (0, 1),
    4: (0, 2, 1, 3),
    6: (0, 3, 1, 4, 2, 5),
    8: (0, 4, 2, 6, 1, 5, 3, 7),
    12: (0, 6, 3, 9, 1, 7, 4, 10, 2, 8, 5, 11),
}
PRIORITY_WINDOW_SLOTS = (1, 2, 4, 6)


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class ResourceConfig:
    comb_size: int = 2
    num_symbols: int = 2
    bandwidth_prb: int = 24
    start_prb: int = 0
    subcarrier_spacing_khz: int = 30
    pfl_or_cc_id: str = "pfl0"
    re_offsets: tuple[int, ...] | None = None
    link: str = "DL"
    frequency_range: str = "FR1"
    comb_offset: int = 0
    # opaque QCL / spatial-relation tag used as the linking criterion
    link_tag: str | None = None

    def __post_init__(self):
        if self.link not in COMB_SIZES:
            raise SignalError(f"unknown link type {self.link!r}")
        if self.comb_size not in COMB_SIZES[self.link]:
            raise SignalError(f"{self.link} comb size must be one of {COMB_SIZES[self.link]}")
        if not 1 <= self.num_symbols <= MAX_SYMBOLS[self.link]:
            raise SignalError(f"{self.link} resources span 1..{MAX_SYMBOLS[self.link]} symbols")
        if self.link == "DL" and self.num_symbols not in DL_SYMBOLS[self.comb_size]:
            raise SignalError(f"DL comb-{self.comb_size} allows {DL_SYMBOLS[self.comb_size]} symbols")
        if self.subcarrier_spacing_khz not in SCS_KHZ:
            raise SignalError(f"subcarrier spacing must be one of {SCS_KHZ} kHz")
        if self.link == "SL":
            allowed = SL_SCS_KHZ.get(self.frequency_range)
            if allowed is None or self.subcarrier_spacing_khz not in allowed:
                raise SignalError(f"SL PRS in {self.frequency_range} supports {allowed} kHz")
        if self.bandwidth_prb < 1 or self.start_prb < 0:
            raise SignalError("bandwidth must be positive and start PRB non-negative")
        if self.re_offsets is None:
            pattern = STAGGER[self.comb_size]
            offsets = tuple((self.comb_offset + pattern[l % len(pattern)]) % self.comb_size for l in range(self.num_symbols))
            object.__setattr__(self, "re_offsets", offsets)
        else:
            offsets = tuple(int(o) for o in self.re_offsets)
            if len(offsets) != self.num_symbols or any(not 0 <= o < self.comb_size for o in offsets):
                raise SignalError("re_offsets needs one offset in [0, comb) per symbol")
            object.__setattr__(self, "re_offsets", offsets)

    @property
    def num_subcarriers(self) -> int:
        return self.bandwidth_prb * SC_PER_PRB

    @property
    def first_subcarrier(self) -> int:
        return self.start_prb * SC_PER_PRB

    @property
    def scs_hz(self) -> float:
        return self.subcarrier_spacing_khz * 1e3

    @property
    def fully_staggered(self) -> bool:
        return set(self.re_offsets) == set(range(self.comb_size))


@dataclass(frozen=True, eq=False)
class ChannelEstimate:
    """Complex values on strictly increasing absolute subcarrier indices."""

    subcarriers: np.ndarray
    values: np.ndarray
    scs_hz: float = 30e3
    aggregated: bool = False
    hop_provenance: str = "n/a"
    # (first, last) subcarrier of each phase-incoherent segment
    degraded_segments: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        sc = np.asarray(self.subcarriers, dtype=np.int64)
        v = np.asarray(self.values, dtype=complex)
        if sc.ndim != 1 or sc.shape != v.shape:
            raise SignalError("subcarriers and values must be 1-D and equally long")
        if sc.size > 1 and np.any(np.diff(sc) <= 0):
            raise SignalError("subcarrier index map must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise SignalError("channel estimate has non-finite values")
        object.__setattr__(self, "subcarriers", sc)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.subcarriers.size

    @property
    def degraded(self) -> bool:
        return bool(self.degraded_segments)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subcarrier_index", "re", "im"])
            for m, v in zip(self.subcarriers, self.values):
                w.writerow([int(m), repr(float(v.real)), repr(float(v.imag))])

    @classmethod
    def from_csv(cls, path: str | Path, scs_hz: float = 30e3) -> "ChannelEstimate":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        sc = np.array([int(r["subcarrier_index"]) for r in rows], dtype=np.int64)
        v = np.array([complex(float(r["re"]), float(r["im"])) for r in rows])
        return cls(sc, v, scs_hz)


def occupancy(config: ResourceConfig) -> np.ndarray:
    """Boolean (symbols, subcarriers) map of occupied resource elements."""
    k = np.arange(config.num_subcarriers)
    offs = np.array(config.re_offsets)[:, None]
    return (k[None, :] - offs) % config.comb_size == 0


def _qpsk(rng, n):
    bits = rng.integers(0, 4, size=n)
    return np.exp(1j * (np.pi / 4 + np.pi / 2 * bits))


def generate_prs_grid(config: ResourceConfig, sequence_seed: int = 0) -> np.ndarray:
    """Comb-patterned PRS grid with unit-modulus pseudo-random symbols on occupied REs.

    A QPSK stand-in replaces the exact Gold sequence; positioning only needs
    known unit-modulus symbols.
    """
    mask = occupancy(config)
    grid = np.zeros(mask.shape, dtype=complex)
    grid[mask] = _qpsk(derive_rng(sequence_seed, f"prs/{config.pfl_or_cc_id}"), int(mask.sum()))
    return grid


def combine_symbols(grid: np.ndarray, config: ResourceConfig) -> ChannelEstimate:
    """Fold a staggered grid into one symbol of contiguous subcarriers (comb 1).

    Subcarriers never occupied are left out of the result.
    """
    mask = occupancy(config)
    counts = mask.sum(axis=0)
    keep = counts > 0
    folded = np.where(mask, grid, 0).sum(axis=0)[keep] / counts[keep]
    sc = config.first_subcarrier + np.flatnonzero(keep)
    return ChannelEstimate(sc, folded, config.scs_hz)


def qpsk_sequence(first_subcarrier: int, count: int, seed: int, scs_hz: float = 30e3) -> ChannelEstimate:
    """Wideband comb-1 reference sequence, e.g. the full-band DL PRS behind a hop plan."""
    sc = np.arange(first_subcarrier, first_subcarrier + count)
    return ChannelEstimate(sc, _qpsk(derive_rng(seed, "wideband_prs"), count), scs_hz)


# --------------------------------------------------------------------------
# frequency hopping


@dataclass(frozen=True)
class HopPlan:
    """Frequency segmentation of a wideband resource into overlapping hops.

    Hops are indexed in frequency order. ``hop_order`` lists those indices in
    transmission order (defaults to ascending). Overlap is ``overlap_elements``
    subcarriers when given (UL ZC sharing), otherwise ``overlap_prb`` PRBs.
    """

    hop_bandwidth_prb: int
    total_bandwidth_prb: int
    overlap_prb: int = 4
    overlap_elements: int | None = None
    symbols_per_hop: int = 2
    retune_symbols: int = 2
    hop_order: tuple[int, ...] | None = None
    start_prb: int = 0
    scs_khz: int = 30
    resource_symbols: int | None = None

    def __post_init__(self):
        hop, total, ov = self.hop_subcarriers, self.total_subcarriers, self.overlap_subcarriers
        if hop <= 0 or total < hop:
            raise SignalError("hop bandwidth must be positive and no wider than the total band")
        if total > hop and not 0 < ov < hop:
            raise SignalError("overlap must be positive and smaller than a hop")
        if total > hop and (total - hop) % (hop - ov):
            raise SignalError(
                f"{self.total_bandwidth_prb} PRB cannot be tiled by {self.hop_bandwidth_prb}-PRB hops "
                f"overlapping by {ov} subcarriers"
            )
        n = self.num_hops
        order = tuple(range(n)) if self.hop_order is None else tuple(self.hop_order)
        if sorted(order) != list(range(n)):
            raise SignalError(f"hop_order must be a permutation of 0..{n - 1}")
        object.__setattr__(self, "hop_order", order)
        if self.resource_symbols is not None and self.duration_symbols > self.resource_symbols:
            raise SignalError(
                f"{n} hops need {self.duration_symbols} symbols, resource has {self.resource_symbols}"
            )

    @classmethod
    def covering(cls, num_hops: int, hop_bandwidth_prb: int, overlap_prb: int = 4, **kw) -> "HopPlan":
        total = hop_bandwidth_prb + (num_hops - 1) * (hop_bandwidth_prb - overlap_prb)
        return cls(hop_bandwidth_prb, total, overlap_prb, **kw)

    @property
    def hop_subcarriers(self) -> int:
        return self.hop_bandwidth_prb * SC_PER_PRB

    @property
    def total_subcarriers(self) -> int:
        return self.total_bandwidth_prb * SC_PER_PRB

    @property
    def overlap_subcarriers(self) -> int:
        return self.overlap_elements if self.overlap_elements is not None else self.overlap_prb * SC_PER_PRB

    @property
    def first_subcarrier(self) -> int:
        return self.start_prb * SC_PER_PRB

    @property
    def num_hops(self) -> int:
        hop, total = self.hop_subcarriers, self.total_subcarriers
        return 1 if total == hop else 1 + (total - hop) // (hop - self.overlap_subcarriers)

    @property
    def scs_hz(self) -> float:
        return self.scs_khz * 1e3

    def hop_range(self, i: int) -> tuple[int, int]:
        """Half-open absolute subcarrier range of hop ``i`` (frequency order)."""
        step = self.hop_subcarriers - self.overlap_subcarriers
        lo = self.first_subcarrier + i * step
        return lo, lo + self.hop_subcarriers

    @property
    def duration_symbols(self) -> int:
        n = self.num_hops
        return n * self.symbols_per_hop + (n - 1) * self.retune_symbols

    def timeline(self) -> list[tuple[int, int, int]]:
        """``(hop_index, first_symbol, num_symbols)`` in transmission order; retuning fills the gaps."""
        period = self.symbols_per_hop + self.retune_symbols
        return [(h, j * period, self.symbols_per_hop) for j, h in enumerate(self.hop_order)]

    def split(self, wideband: ChannelEstimate) -> list[ChannelEstimate]:
        """Cut a wideband signal into hop segments, returned in transmission order."""
        out = []
        for h in self.hop_order:
            lo, hi = self.hop_range(h)
            sel = (wideband.subcarriers >= lo) & (wideband.subcarriers < hi)
            out.append(ChannelEstimate(wideband.subcarriers[sel], wideband.values[sel], wideband.scs_hz))
        return out


def zadoff_chu(root_u: int, n_zc: int, n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.int64)
    # reduce u*n*(n+1) mod 2*N_zc before scaling; keeps the phase exact for long sequences
    arg = (root_u * n * (n + 1)) % (2 * n_zc)
    return np.exp(-1j * np.pi * arg / n_zc)


def generate_srs_zc(hop_plan: HopPlan, root_u: int, n_zc: int) -> list[ChannelEstimate]:
    """Per-hop segments of one ZC sequence laid over the plan's whole virtual band.

    Element ``n`` sits on virtual subcarrier ``first_subcarrier + n``, so
    adjacent hops carry identical elements on their shared subcarriers.
    Segments are returned in transmission order.
    """
    total = hop_plan.total_subcarriers
    if n_zc < total:
        raise SignalError(f"N_ZC={n_zc} shorter than the {total} virtual subcarriers")
    if not 1 <= root_u < n_zc or math.gcd(root_u, n_zc) != 1:
        raise SignalError(f"root {root_u} is not coprime with N_ZC={n_zc}")
    n = np.arange(total)
    full = ChannelEstimate(hop_plan.first_subcarrier + n, zadoff_chu(root_u, n_zc, n), hop_plan.scs_hz)
    return hop_plan.split(full)


def apply_channel(
    signal: ChannelEstimate,
    delay_s: float = 0.0,
    carrier_phase_offset_rad: float = 0.0,
    per_hop_phase_rad: float = 0.0,
    snr_db: float | None = None,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
    max_delay_s: float | None = None,
) -> ChannelEstimate:
    """Delay, rotate and (optionally) add complex Gaussian noise at ``snr_db`` per subcarrier."""
    if max_delay_s is not None and abs(delay_s) > max_delay_s:
        raise SignalError(f"delay {delay_s} s exceeds the {max_delay_s} s bound")
    f = signal.subcarriers * signal.scs_hz
    rot = np.exp(-2j * np.pi * f * delay_s) * np.exp(1j * (carrier_phase_offset_rad + per_hop_phase_rad))
    y = signal.values * rot
    if snr_db is not None:
        if rng is None:
            rng = derive_rng(0 if seed is None else seed, "apply_channel")
        p = np.mean(np.abs(signal.values) ** 2) / 10 ** (snr_db / 10)
        y = y + np.sqrt(p / 2) * (rng.standard_normal(y.size) + 1j * rng.standard_normal(y.size))
    return replace(signal, values=y)


def ls_estimate(received: ChannelEstimate, reference: ChannelEstimate) -> ChannelEstimate:
    """Least-squares channel estimate ``received / reference`` on common subcarriers."""
    common, ia, ib = np.intersect1d(received.subcarriers, reference.subcarriers, return_indices=True)
    if common.size == 0:
        raise SignalError("received and reference signals share no subcarriers")
    return replace(received, subcarriers=common, values=received.values[ia] / reference.values[ib])


def estimate_hop_phase_offset(hop_a: ChannelEstimate, hop_b: ChannelEstimate) -> float:
    """Phase of hop_b relative to hop_a over their shared subcarriers, in (-pi, pi]."""
    common, ia, ib = np.intersect1d(hop_a.subcarriers, hop_b.subcarriers, return_indices=True)
    if common.size == 0:
        raise SignalError("hops do not overlap")
    acc = np.sum(np.conj(hop_a.values[ia]) * hop_b.values[ib])
    if acc == 0:
        raise SignalError("overlapping subcarriers carry no energy")
    theta = float(np.angle(acc))
    return theta + 2 * np.pi if theta <= -np.pi else theta


def stitch_hops(hops: Sequence[ChannelEstimate], plan: HopPlan | None = None) -> ChannelEstimate:
    """Rebuild a wideband estimate from hops received in sequence.

    ``hops[0]`` (the first hop received) is the phase reference. Moving
    outward in frequency, each hop is rotated onto its already aligned
    neighbour using their overlap; overlapping subcarriers are then averaged.
    """
    if not hops:
        raise SignalError("no hops to stitch")
    if len(hops) == 1:
        return replace(hops[0], hop_provenance="single_hop")
    by_freq = sorted(range(len(hops)), key=lambda i: int(hops[i].subcarriers[0]))
    pos = by_freq.index(0)
    aligned: dict[int, ChannelEstimate] = {0: hops[0]}
    for direction in (1, -1):
        j = pos
        while 0 <= j + direction < len(by_freq):
            prev, cur = by_freq[j], by_freq[j + direction]
            theta = estimate_hop_phase_offset(aligned[prev], hops[cur])
            aligned[cur] = replace(hops[cur], values=hops[cur].values * np.exp(-1j * theta))
            j += direction
    sc = np.unique(np.concatenate([h.subcarriers for h in hops]))
    acc = np.zeros(sc.size, dtype=complex)
    cnt = np.zeros(sc.size)
    for h in aligned.values():
        idx = np.searchsorted(sc, h.subcarriers)
        acc[idx] += h.values
        cnt[idx] += 1
    if plan is not None:
        lo, hi = plan.first_subcarrier, plan.first_subcarrier + plan.total_subcarriers
        missing = np.setdiff1d(np.arange(lo, hi), sc)
        if missing.size:
            raise SignalError(f"hops leave {missing.size} subcarriers of the plan uncovered")
    elif np.any(np.diff(sc) != 1):
        raise SignalError("stitched band has a coverage gap")
    return ChannelEstimate(sc, acc / cnt, hops[0].scs_hz, hop_provenance="multi_hop")


# --------------------------------------------------------------------------
# bandwidth aggregation


@dataclass(frozen=True)
class LinkedResourceSet:
    members: tuple[ResourceConfig, ...]
    link_criteria_tag: str | None
    phase_continuity: bool = True

    def __len__(self):
        return len(self.members)

    @property
    def pfl_ids(self) -> tuple[str, ...]:
        return tuple(m.pfl_or_cc_id for m in self.members)


def _check_contiguous(sets: Sequence[ResourceConfig]) -> None:
    for a, b in zip(sets, sets[1:]):
        if a.subcarrier_spacing_khz != b.subcarrier_spacing_khz:
            raise SignalError("linked resources must share one subcarrier spacing")
        if b.start_prb != a.start_prb + a.bandwidth_prb:
            raise SignalError(f"{a.pfl_or_cc_id} and {b.pfl_or_cc_id} are not intra-band contiguous")


def link_resources(resource_sets: Sequence[ResourceConfig], criteria: str | None) -> LinkedResourceSet:
    """Link the resources whose tag matches ``criteria`` for bandwidth aggregation.

    Two or three contiguous resource sets are required. Fewer than two
    matching tags yield an empty set rather than an error.
    """
    if not 2 <= len(resource_sets) <= 3:
        raise SignalError(f"BW aggregation combines two or three resource sets, got {len(resource_sets)}")
    ordered = sorted(resource_sets, key=lambda r: r.start_prb)
    _check_contiguous(ordered)
    members = [r for r in ordered if r.link_tag == criteria]
    if len(members) < 2:
        return LinkedResourceSet((), criteria, phase_continuity=False)
    _check_contiguous(members)
    return LinkedResourceSet(tuple(members), criteria, phase_continuity=True)


def aggregate_linked(
    estimates: Sequence[ChannelEstimate],
    linked: LinkedResourceSet | None = None,
    phase_continuous: bool = True,
) -> ChannelEstimate:
    """Combine per-CC estimates into one wideband estimate.

    With phase continuity the CCs are simply concatenated. Without it the
    result is flagged as degraded and :func:`estimate_toa` combines the CCs
    non-coherently.
    """
    if len(estimates) == 1:
        return estimates[0]
    if linked is None or len(linked) != len(estimates):
        raise SignalError("need exactly one estimate per linked resource")
    for est, member in zip(estimates, linked.members):
        lo = member.first_subcarrier
        if est.subcarriers[0] < lo or est.subcarriers[-1] >= lo + member.num_subcarriers:
            raise SignalError(f"estimate does not lie inside {member.pfl_or_cc_id}")
    sc = np.concatenate([e.subcarriers for e in estimates])
    v = np.concatenate([e.values for e in estimates])
    order = np.argsort(sc, kind="stable")
    segments = () if phase_continuous else tuple((int(e.subcarriers[0]), int(e.subcarriers[-1])) for e in estimates)
    return ChannelEstimate(sc[order], v[order], estimates[0].scs_hz, aggregated=True, degraded_segments=segments)


# --------------------------------------------------------------------------
# time of arrival


def _power_profile(est: ChannelEstimate, nfft: int, lo: int, segments) -> np.ndarray:
    offs = est.subcarriers - lo
    if not segments:
        h = np.zeros(nfft, dtype=complex)
        h[offs] = est.values
        return np.abs(np.fft.ifft(h)) ** 2
    p = np.zeros(nfft)
    for a, b in segments:
        sel = (est.subcarriers >= a) & (est.subcarriers <= b)
        h = np.zeros(nfft, dtype=complex)
        h[offs[sel]] = est.values[sel]
        p += np.abs(np.fft.ifft(h)) ** 2
    return p


def estimate_toa(estimate: ChannelEstimate, oversampling_factor: int = 16) -> float:
    """Delay of the strongest path, via zero-padded IDFT and a 3-point parabola.

    The unambiguous range is one OFDM symbol, ``1/scs``; delays beyond
    half of it come back negative.
    """
    if len(estimate) < 2:
        raise SignalError("ToA estimation needs at least two subcarriers")
    lo = int(estimate.subcarriers[0])
    span = int(estimate.subcarriers[-1]) - lo + 1
    nfft = int(oversampling_factor) * span
    p = _power_profile(estimate, nfft, lo, estimate.degraded_segments)
    k = int(np.argmax(p))
    ym, y0, yp = p[k - 1], p[k], p[(k + 1) % nfft]
    denom = ym - 2 * y0 + yp
    delta = 0.5 * (ym - yp) / denom if denom != 0 else 0.0
    pos = k + delta
    if pos > nfft / 2:
        pos -= nfft
    return pos / (nfft * estimate.scs_hz)


def sample_period(estimate: ChannelEstimate) -> float:
    """Time resolution ``1/(N*scs)`` of the band spanned by an estimate."""
    span = int(estimate.subcarriers[-1] - estimate.subcarriers[0]) + 1
    return 1.0 / (span * estimate.scs_hz)


# --------------------------------------------------------------------------
# SRS collision handling


@dataclass(frozen=True)
class SrsOccasion:
    resource_id: str
    slot: int
    carrier_id: str


@dataclass(frozen=True)
class UplinkGrant:
    slot: int
    carrier_id: str
    channel: str = "PUSCH"

    def __post_init__(self):
        if self.channel not in ("PUSCH", "PUCCH"):
            raise SignalError(f"unknown uplink channel {self.channel!r}")


@dataclass(frozen=True)
class PriorityWindow:
    start_slot: int
    length_slots: int

    def __post_init__(self):
        if self.length_slots not in PRIORITY_WINDOW_SLOTS:
            raise SignalError(f"priority window must be {PRIORITY_WINDOW_SLOTS} slots")

    def __contains__(self, slot: int) -> bool:
        return self.start_slot <= slot < self.start_slot + self.length_slots


def check_srs_collision(
    occasions: Sequence[SrsOccasion],
    uplink_schedule: Sequence[UplinkGrant],
    priority_window: PriorityWindow | None = None,
) -> Mapping[str, bool]:
    """Transmit decision per linked or hopped SRS resource.

    A collision with PUSCH/PUCCH outside a priority window drops every SRS
    of the group; inside the window SRS wins and everything is sent.
    """
    busy = {(g.slot, g.carrier_id) for g in uplink_schedule}
    colliding = [o for o in occasions if (o.slot, o.carrier_id) in busy]
    send = all(priority_window is not None and o.slot in priority_window for o in colliding)
    return {o.resource_id: send for o in occasions}
