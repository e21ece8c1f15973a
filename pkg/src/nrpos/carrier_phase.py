"""Carrier-phase observables and their differencing schemes.

Every phase measurement follows one rule: the receiver's Rx bias enters with
a plus sign and the transmitter's Tx bias with a minus sign,

    phase = geometric + rx_bias(receiver) - tx_bias(transmitter).

Differencing across transmitters at one receiver removes the Rx bias,
differencing a UE against a reference unit removes the Tx biases, and
adding a DL and a UL phase between the same pair removes both when each
side runs a single oscillator.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .scenario import NodeKind, Position3D, Scenario, Side, distance, sample_phase_bias

PHASE_STEP_DEG = Decimal("0.1")


class PreconditionError(ValueError):
    """Raised when inputs to a differencing scheme do not satisfy its pairing rules."""


class PhaseRange(str, Enum):
    RSCP = "RSCP"  # [0, 360)
    RSCPD = "RSCPD"  # [-180, 180)


def wrap_360(value):
    """Wrap degrees into [0, 360)."""
    out = np.mod(value, 360.0)
    # np.mod(-1e-17, 360) == 360.0
    out = np.where(out >= 360.0, 0.0, out)
    return float(out) if np.ndim(out) == 0 else out


def wrap_180(value):
    """Wrap degrees into [-180, 180)."""
    out = np.mod(np.asarray(value) + 180.0, 360.0)
    out = np.where(out >= 360.0, 0.0, out) - 180.0
    return float(out) if np.ndim(out) == 0 else out


def wrap_to(value, range: PhaseRange):
    return wrap_360(value) if PhaseRange(range) is PhaseRange.RSCP else wrap_180(value)


def in_range(value: float, range: PhaseRange) -> bool:
    if PhaseRange(range) is PhaseRange.RSCP:
        return 0.0 <= value < 360.0
    return -180.0 <= value < 180.0


@dataclass(frozen=True)
class PhaseObservation:
    value_deg: float
    range: PhaseRange
    tx_node: str
    tx_arp: str
    rx_node: str
    rx_arp: str
    pfl_id: str
    time_s: float = 0.0
    # set on RSCPD values: the transmitter the difference is taken against
    ref_tx_node: str | None = None
    ref_tx_arp: str | None = None

    def __post_init__(self):
        if not in_range(self.value_deg, self.range):
            raise ValueError(f"{self.value_deg} outside the {self.range.value} range")


@dataclass(frozen=True)
class CarrierPhaseSolution:
    position: Position3D
    ambiguities: tuple[int, ...]
    residual_deg: float
    fixed: bool = True
    candidates: int = 0

    def __post_init__(self):
        if not self.residual_deg >= 0:
            raise ValueError("residual must be non-negative")


def geometric_phase(
    scenario: Scenario,
    tx_node: str,
    rx_node: str,
    pfl: str,
    tx_arp: str | None = None,
    rx_arp: str | None = None,
) -> float:
    """Fractional-cycle phase of the path between two ARPs, in [0, 360)."""
    tx, rx = scenario.node(tx_node), scenario.node(rx_node)
    lam = scenario.wavelength(pfl)
    tx_arp = tx.panel_for_pfl(pfl).arp_id if tx_arp is None else tx_arp
    rx_arp = rx.panel_for_pfl(pfl).arp_id if rx_arp is None else rx_arp
    d = distance(tx.arp_position(tx_arp), rx.arp_position(rx_arp))
    cycles = d / lam
    return wrap_360((cycles - math.floor(cycles)) * 360.0)


def _noise(scenario, label, sigma, rng):
    if sigma <= 0:
        return 0.0
    rng = scenario.rng(label) if rng is None else rng
    return float(rng.normal(0.0, sigma))


def _measure(scenario, tx, tx_arp, rx, rx_arp, pfl, time_s, sigma, rng, label):
    tx_node, rx_node = scenario.node(tx), scenario.node(rx)
    tx_arp = tx_node.panel_for_pfl(pfl).arp_id if tx_arp is None else tx_arp
    rx_arp = rx_node.panel_for_pfl(pfl).arp_id if rx_arp is None else rx_arp
    geo = geometric_phase(scenario, tx, rx, pfl, tx_arp, rx_arp)
    raw = (
        geo
        + sample_phase_bias(rx_node, rx_arp, Side.RX, time_s)
        - sample_phase_bias(tx_node, tx_arp, Side.TX, time_s)
        + _noise(scenario, f"{label}/{tx}/{tx_arp}/{rx}/{rx_arp}/{pfl}/{time_s!r}", sigma, rng)
    )
    return PhaseObservation(wrap_360(raw), PhaseRange.RSCP, tx, tx_arp, rx, rx_arp, pfl, time_s)


def measure_dl_rscp(
    scenario: Scenario,
    trp: str,
    trp_arp: str | None,
    ue: str,
    ue_arp: str | None,
    pfl: str,
    time_s: float = 0.0,
    noise_sigma_deg: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PhaseObservation:
    """DL RSCP at a UE or PRU: geometric phase + UE Rx bias - TRP Tx bias + noise."""
    if scenario.node(trp).kind is not NodeKind.TRP:
        raise ValueError(f"{trp} is not a TRP")
    if scenario.node(ue).kind not in (NodeKind.UE, NodeKind.PRU):
        raise ValueError(f"{ue} is not a UE or PRU")
    return _measure(scenario, trp, trp_arp, ue, ue_arp, pfl, time_s, noise_sigma_deg, rng, "dl_rscp")


def measure_ul_rscp(
    scenario: Scenario,
    ue: str,
    ue_arp: str | None,
    trp: str,
    trp_arp: str | None,
    pfl: str,
    time_s: float = 0.0,
    noise_sigma_deg: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PhaseObservation:
    """UL RSCP at a TRP: geometric phase + TRP Rx bias - UE Tx bias + noise.

    Under a single oscillator per side this is ``geo - ue_bias + trp_bias``,
    the mirror image of the DL observable.
    """
    if scenario.node(trp).kind is not NodeKind.TRP:
        raise ValueError(f"{trp} is not a TRP")
    if scenario.node(ue).kind not in (NodeKind.UE, NodeKind.PRU):
        raise ValueError(f"{ue} is not a UE or PRU")
    return _measure(scenario, ue, ue_arp, trp, trp_arp, pfl, time_s, noise_sigma_deg, rng, "ul_rscp")


def rscpd(ref_obs: PhaseObservation, other_obs: PhaseObservation, time_window_s: float = 0.0) -> PhaseObservation:
    """Phase difference ``other - ref`` of two transmitters seen by one receiver antenna."""
    for obs in (ref_obs, other_obs):
        if obs.range is not PhaseRange.RSCP:
            raise PreconditionError("RSCPD is formed from RSCP values")
    if (ref_obs.rx_node, ref_obs.rx_arp) != (other_obs.rx_node, other_obs.rx_arp):
        raise PreconditionError("RSCPD needs both measurements on the same receive antenna")
    if ref_obs.pfl_id != other_obs.pfl_id:
        raise PreconditionError("RSCPD needs both PRS on the same positioning frequency layer")
    if abs(ref_obs.time_s - other_obs.time_s) > time_window_s:
        raise PreconditionError("measurement times fall outside the alignment window")
    return PhaseObservation(
        value_deg=wrap_180(other_obs.value_deg - ref_obs.value_deg),
        range=PhaseRange.RSCPD,
        tx_node=other_obs.tx_node,
        tx_arp=other_obs.tx_arp,
        rx_node=ref_obs.rx_node,
        rx_arp=ref_obs.rx_arp,
        pfl_id=ref_obs.pfl_id,
        time_s=ref_obs.time_s,
        ref_tx_node=ref_obs.tx_node,
        ref_tx_arp=ref_obs.tx_arp,
    )


def double_difference(ue_rscpd: PhaseObservation, pru_rscpd: PhaseObservation, time_window_s: float = 0.0) -> float:
    """UE RSCPD minus reference-unit RSCPD over the same TRP pair, in [-180, 180)."""
    for obs in (ue_rscpd, pru_rscpd):
        if obs.range is not PhaseRange.RSCPD:
            raise PreconditionError("double difference is formed from RSCPD values")
    ue_pair = (ue_rscpd.ref_tx_node, ue_rscpd.tx_node)
    pru_pair = (pru_rscpd.ref_tx_node, pru_rscpd.tx_node)
    if ue_pair != pru_pair:
        raise PreconditionError(f"TRP pair mismatch: {ue_pair} vs {pru_pair}")
    if (ue_rscpd.ref_tx_arp, ue_rscpd.tx_arp) != (pru_rscpd.ref_tx_arp, pru_rscpd.tx_arp):
        raise PreconditionError("UE and PRU observed different TRP transmit antennas")
    if ue_rscpd.pfl_id != pru_rscpd.pfl_id:
        raise PreconditionError("UE and PRU measured different frequency layers")
    if abs(ue_rscpd.time_s - pru_rscpd.time_s) > time_window_s:
        raise PreconditionError("UE and PRU measurement times fall outside the alignment window")
    return wrap_180(ue_rscpd.value_deg - pru_rscpd.value_deg)


def rtt_like_combine(dl_obs: PhaseObservation, ul_obs: PhaseObservation, *, same_oscillator: bool) -> float:
    """Sum of DL and UL RSCP between one UE/TRP pair; equals twice the geometric phase.

    Only valid when UE and TRP each use one local oscillator for both
    directions, which the standard does not mandate.
    """
    if not same_oscillator:
        raise PreconditionError("RTT-like combining requires a single oscillator per side")
    if (dl_obs.tx_node, dl_obs.rx_node) != (ul_obs.rx_node, ul_obs.tx_node):
        raise PreconditionError("DL and UL observations are not between the same UE/TRP pair")
    if dl_obs.pfl_id != ul_obs.pfl_id:
        raise PreconditionError("DL and UL observations are on different carriers")
    if dl_obs.time_s != ul_obs.time_s:
        raise PreconditionError("DL and UL measurement times differ")
    return wrap_360(dl_obs.value_deg + ul_obs.value_deg)


def quantize_phase(value_deg: float, range: PhaseRange | str = PhaseRange.RSCP) -> float:
    """Round to the 0.1 degree reporting grid (ties away from zero), then wrap."""
    if not math.isfinite(value_deg):
        raise ValueError("phase must be finite")
    q = float(Decimal(repr(float(value_deg))).quantize(PHASE_STEP_DEG, rounding=ROUND_HALF_UP))
    # re-round after wrapping so the result is the exact nearest double to k*0.1
    return round(wrap_to(q, PhaseRange(range)), 1) + 0.0


def phase_to_meters(value_deg: float, wavelength_m: float) -> float:
    return value_deg / 360.0 * wavelength_m


# --------------------------------------------------------------------------
# ambiguity resolution

Model = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def _dd_model(trp_pairs, pru: np.ndarray, lam: float, z: float, dims: int) -> Model:
    ref = np.array([p[0].as_array() for p in trp_pairs])
    oth = np.array([p[1].as_array() for p in trp_pairs])
    pru_term = np.linalg.norm(pru - oth, axis=1) - np.linalg.norm(pru - ref, axis=1)

    def model(xy: np.ndarray):
        p = _lift(xy, z, dims)  # (K, 3)
        vo = p[:, None, :] - oth[None]
        vr = p[:, None, :] - ref[None]
        no = np.linalg.norm(vo, axis=2)
        nr = np.linalg.norm(vr, axis=2)
        f = (no - nr - pru_term[None]) / lam
        jac = (vo / no[..., None] - vr / nr[..., None]) / lam
        return f, jac[..., :dims]

    return model


def _range_model(anchors: np.ndarray, scale: float, z: float, dims: int) -> Model:
    def model(xy: np.ndarray):
        p = _lift(xy, z, dims)
        v = p[:, None, :] - anchors[None]
        n = np.linalg.norm(v, axis=2)
        return n * scale, (v / n[..., None] * scale)[..., :dims]

    return model


def _lift(xy: np.ndarray, z: float, dims: int) -> np.ndarray:
    if dims == 3:
        return xy
    return np.concatenate([xy, np.full((xy.shape[0], 1), z)], axis=1)


def _solve_batch(jb: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched square solve; closed form for 2x2 systems."""
    if jb.shape[1] == 2:
        a, b, c, d = jb[:, 0, 0], jb[:, 0, 1], jb[:, 1, 0], jb[:, 1, 1]
        det = a * d - b * c
        good = np.abs(det) > 1e-12
        inv = np.where(good, 1.0 / np.where(good, det, 1.0), 0.0)
        step = np.stack([(d * r[:, 0] - b * r[:, 1]) * inv, (a * r[:, 1] - c * r[:, 0]) * inv], axis=1)
        return step, good
    det = np.linalg.det(jb)
    good = np.abs(det) > 1e-12
    step = np.zeros(r.shape)
    step[good] = np.linalg.solve(jb[good], r[good][..., None])[..., 0]
    return step, good


def _newton_square(model, basis, targets, x0, iterations=30):
    """Solve model(x)[basis] == targets for each row of targets (square systems)."""
    f0, j0 = model(x0[None])
    # linearized start per candidate, then Newton on the rows still moving
    step0, _ = _solve_batch(np.repeat(j0[:, basis, :], len(targets), axis=0), targets - f0[:, basis])
    x = x0[None] + step0
    ok = np.ones(len(targets), dtype=bool)
    active = np.arange(len(targets))
    for _ in range(iterations):
        if active.size == 0:
            break
        f, jac = model(x[active])
        step, good = _solve_batch(jac[:, basis, :], targets[active] - f[:, basis])
        ok[active[~good]] = False
        # cap steps at 5 m to keep branches from jumping sheets
        norm = np.linalg.norm(step, axis=1)
        step *= np.minimum(1.0, 5.0 / np.maximum(norm, 1e-300))[:, None]
        x[active] += step
        active = active[good & (norm >= 1e-10)]
    f, _ = model(x)
    ok &= np.max(np.abs(f[:, basis] - targets), axis=1) < 1e-6
    return x, ok


def _refine_fixed(model, x0, targets, iterations=20):
    x = x0.copy()
    for _ in range(iterations):
        f, jac = model(x[None])
        r = targets - f[0]
        step = np.linalg.lstsq(jac[0], r, rcond=None)[0]
        x = x + step
        if np.linalg.norm(step) < 1e-12:
            break
    f, _ = model(x[None])
    return x, targets - f[0]


def _resolve(
    model: Model,
    frac: np.ndarray,
    coarse: np.ndarray,
    radius: int | None,
    dims: int,
    max_residual_deg: float,
    cov: np.ndarray | None = None,
    k_sigma: float = 4.0,
    wavelength_m: float = math.inf,
):
    m = len(frac)
    if m < dims + 1:
        raise ValueError(f"under-determined: {m} phase observations for a {dims}D fix (need {dims + 1})")
    f0, j0 = model(coarse[None])
    f0, j0 = f0[0], j0[0]
    n0 = np.round(f0 - frac)
    # basis: best-conditioned square subset at the coarse point
    basis = max(itertools.combinations(range(m), dims), key=lambda b: abs(np.linalg.det(j0[list(b)])))
    basis = list(basis)
    rest = [i for i in range(m) if i not in basis]
    jb = j0[basis]
    if cov is not None:
        cov = np.asarray(cov, dtype=float)[:dims, :dims]
        info = np.linalg.inv(cov)
        if radius is None:
            spread = np.sqrt(np.diag(jb @ cov @ jb.T))
            radius = int(math.ceil(k_sigma * float(np.max(spread)))) + 1
    elif radius is None:
        raise ValueError("give search_radius_cycles or a coarse covariance")
    offsets = np.array(list(itertools.product(range(-radius, radius + 1), repeat=dims)), dtype=float)
    targets = n0[basis][None] + offsets + frac[basis][None]
    if cov is not None:
        # keep only integer sets whose linearized position lies inside the coarse error ellipse
        dx = np.linalg.solve(jb, (targets - f0[basis][None]).T).T
        inside = np.einsum("ij,jk,ik->i", dx, info, dx) <= (k_sigma + 1.0) ** 2
        targets = targets[inside]
    x, ok = _newton_square(model, basis, targets, coarse)
    f, _ = model(x)
    n_rest = np.round(f[:, rest] - frac[rest][None])
    if cov is None:
        ok &= np.all(np.abs(n_rest - n0[rest][None]) <= radius, axis=1)
        # the coarse fix is trusted to within radius wavelengths; farther candidates are spurious
        ok &= np.linalg.norm(x - coarse[None], axis=1) <= radius * wavelength_m
    else:
        d = x - coarse[None]
        ok &= np.einsum("ij,jk,ik->i", d, info, d) <= k_sigma**2
    misfit = f[:, rest] - (n_rest + frac[rest][None])
    score = np.where(ok, np.sum(misfit**2, axis=1), np.inf)
    order = np.argsort(score, kind="stable")[: min(16, len(score))]
    best = None
    for idx in order:
        if not np.isfinite(score[idx]):
            break
        ints = np.empty(m)
        ints[basis] = targets[idx] - frac[basis]
        ints[rest] = n_rest[idx]
        xr, res = _refine_fixed(model, x[idx], ints + frac)
        rms_deg = float(np.sqrt(np.mean(res**2)) * 360.0)
        if best is None or rms_deg < best[0]:
            best = (rms_deg, xr, ints)
    n_candidates = int(np.count_nonzero(np.isfinite(score)))
    if best is None or best[0] > max_residual_deg:
        return None, (np.inf if best is None else best[0]), n_candidates
    return best, best[0], n_candidates


def _solution(best, residual, n_candidates, coarse: Position3D, dims: int) -> CarrierPhaseSolution:
    if best is None:
        return CarrierPhaseSolution(coarse, (), residual if math.isfinite(residual) else 0.0, False, n_candidates)
    _, x, ints = best
    z = x[2] if dims == 3 else coarse.z
    pos = Position3D(x[0], x[1], z)
    return CarrierPhaseSolution(pos, tuple(int(v) for v in ints), residual, True, n_candidates)


def solve_carrier_phase(
    coarse: Position3D,
    dd_observations: Sequence[float],
    trp_pairs: Sequence[tuple[Position3D, Position3D]],
    wavelength_m: float,
    pru: Position3D,
    search_radius_cycles: int | None = 3,
    dims: int = 2,
    max_residual_deg: float = 6.0,
    coarse_covariance: np.ndarray | None = None,
) -> CarrierPhaseSolution:
    """Fix a position from UE/PRU double-differenced phases.

    ``trp_pairs[i]`` is the ``(reference, other)`` TRP pair of
    ``dd_observations[i]`` (degrees). Integers are enumerated in a box of
    ``search_radius_cycles`` around the values implied by ``coarse``; the
    candidate with the smallest post-fit RMS residual wins, and the fix
    fails (``fixed=False``) when even that exceeds ``max_residual_deg``.
    In 2D mode the height is held at ``coarse.z``.

    With ``coarse_covariance`` (m^2) the search is restricted to integer
    sets whose position falls within four sigma of the coarse fix, and a
    ``search_radius_cycles`` of ``None`` is sized from that ellipse.
    """
    if len(dd_observations) != len(trp_pairs):
        raise ValueError("one TRP pair per observation")
    frac = np.asarray(dd_observations, dtype=float) / 360.0
    model = _dd_model(trp_pairs, pru.as_array(), wavelength_m, coarse.z, dims)
    x0 = coarse.as_array()[:dims]
    best, residual, n = _resolve(model, frac, x0, search_radius_cycles, dims, max_residual_deg, coarse_covariance, wavelength_m=wavelength_m)
    return _solution(best, residual, n, coarse, dims)


def solve_rtt_like_phase(
    coarse: Position3D,
    combined_deg: Sequence[float],
    trp_positions: Sequence[Position3D],
    wavelength_m: float,
    search_radius_cycles: int | None = 3,
    dims: int = 2,
    max_residual_deg: float = 6.0,
    coarse_covariance: np.ndarray | None = None,
) -> CarrierPhaseSolution:
    """Fix a position from RTT-like combined phases (twice the one-way phase).

    Each combined value is ``2 d / wavelength`` modulo one cycle, so the
    integer search runs on a half-wavelength range grid.
    """
    if len(combined_deg) != len(trp_positions):
        raise ValueError("one TRP per observation")
    frac = np.asarray(combined_deg, dtype=float) / 360.0
    anchors = np.array([p.as_array() for p in trp_positions])
    model = _range_model(anchors, 2.0 / wavelength_m, coarse.z, dims)
    x0 = coarse.as_array()[:dims]
    best, residual, n = _resolve(model, frac, x0, search_radius_cycles, dims, max_residual_deg, coarse_covariance, wavelength_m=wavelength_m)
    return _solution(best, residual, n, coarse, dims)
