"""Location solvers for TDOA, RTT and AoA measurement sets.

All iterative solvers work in meters and use Gauss-Newton with step halving
whenever a step would increase the residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .measurements import AngleMeasurement, Frame, TimingKind, TimingMeasurement
from .scenario import SPEED_OF_LIGHT, Position3D


class UnderdeterminedError(ValueError):
    pass


class SingularGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PositionEstimate:
    position: Position3D
    residual_norm: float
    iterations: int
    converged: bool
    covariance_proxy: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if not self.residual_norm >= 0:
            raise ValueError("residual norm must be non-negative")


def _as_array(p) -> np.ndarray:
    return p.as_array() if isinstance(p, Position3D) else np.asarray(p, dtype=float)


def _lift(x: np.ndarray, dims: int, z: float) -> np.ndarray:
    return x if dims == 3 else np.array([x[0], x[1], z])


def gauss_newton(
    residual: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    x0: np.ndarray,
    max_iterations: int = 50,
    step_tol: float = 1e-9,
    damping: float = 1e-12,
) -> tuple[np.ndarray, float, int, bool, np.ndarray]:
    """Minimize ``|r(x)|^2`` given ``residual(x) -> (r, J)``.

    Returns ``(x, |r|, iterations, step_converged, J^T J)``.
    """
    x = np.array(x0, dtype=float)
    r, jac = residual(x)
    cost = float(r @ r)
    it = 0
    converged = False
    for it in range(1, max_iterations + 1):
        jtj = jac.T @ jac
        # a tiny ridge keeps near-singular geometries solvable
        step = -np.linalg.solve(jtj + damping * max(1.0, np.trace(jtj)) * np.eye(len(x)), jac.T @ r)
        t = 1.0
        while True:
            cand = x + t * step
            r_new, j_new = residual(cand)
            new_cost = float(r_new @ r_new)
            if new_cost <= cost or t < 1e-6:
                break
            t *= 0.5
        if new_cost > cost:
            converged = True  # no descent direction left at this scale
            break
        moved = t * np.linalg.norm(step)
        x, r, jac, cost = cand, r_new, j_new, new_cost
        if moved < step_tol:
            converged = True
            break
    return x, math.sqrt(cost), it, converged, jac.T @ jac


def _estimate(x, dims, z, res_norm, it, step_ok, jtj, n_obs, max_rms_m):
    rms = res_norm / math.sqrt(n_obs)
    try:
        cov = np.linalg.inv(jtj)
        cov_t = tuple(tuple(float(v) for v in row) for row in cov)
    except np.linalg.LinAlgError:
        cov_t = None
    p = _lift(x, dims, z)
    return PositionEstimate(Position3D(*p), res_norm, it, bool(step_ok and rms <= max_rms_m), cov_t)


def _plane_starts(points: np.ndarray) -> list[np.ndarray]:
    """Extra 3D starts on both sides of the anchors' best-fit plane.

    Near-coplanar anchors give a mirrored local minimum on the far side of
    the plane; the minimum from one of these starts is then the global one.
    """
    centroid = points.mean(axis=0)
    _, sv, vt = np.linalg.svd(points - centroid)
    spread = float(sv[0]) / math.sqrt(len(points)) or 1.0
    normal = vt[-1]
    return [centroid + spread * normal, centroid - spread * normal]


def _multi_start(residual, starts, max_iterations):
    best = None
    for x0 in starts:
        out = gauss_newton(residual, x0, max_iterations)
        if best is None or out[1] < best[1]:
            best = out
    return best


def _check_count(n: int, dims: int, what: str) -> None:
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    if n < dims + 1:
        raise UnderdeterminedError(f"{n} {what} cannot fix a {dims}D position (need {dims + 1})")


def solve_tdoa(
    anchors: Mapping[str, Position3D],
    rstds: Sequence[TimingMeasurement],
    init: Position3D | None = None,
    dims: int = 3,
    z: float | None = None,
    sync_offsets_s: Mapping[str, float] | None = None,
    max_iterations: int = 50,
    max_rms_m: float = 5.0,
    c: float = SPEED_OF_LIGHT,
) -> PositionEstimate:
    """Hyperbolic least squares on RSTDs ``(d_other - d_ref)/c``.

    Starts from the anchor centroid; in 3D without an explicit ``init`` two
    more starts off the anchor plane guard against mirrored minima.

    ``sync_offsets_s`` holds known per-anchor transmit-time offsets; their
    difference is removed from each RSTD before solving. In 2D mode the
    height is fixed to ``z`` (default: the initial point's height).
    """
    _check_count(len(rstds), dims, "RSTDs")
    auto_init = init is None
    for m in rstds:
        if m.kind is not TimingKind.RSTD:
            raise ValueError(f"expected RSTD measurements, got {m.kind}")
    ids = sorted({m.ref_node for m in rstds} | {m.other_node for m in rstds})
    missing = [i for i in ids if i not in anchors]
    if missing:
        raise KeyError(f"no anchor position for {missing}")
    pos = {i: _as_array(anchors[i]) for i in ids}
    if init is None:
        init_arr = np.mean([pos[i] for i in ids], axis=0)
    else:
        init_arr = _as_array(init)
    z = float(init_arr[2]) if z is None else float(z)
    offs = sync_offsets_s or {}
    meas = np.array([
        c * (m.value_s - (offs.get(m.other_node, 0.0) - offs.get(m.ref_node, 0.0))) for m in rstds
    ])
    ref = np.array([pos[m.ref_node] for m in rstds])
    oth = np.array([pos[m.other_node] for m in rstds])

    def residual(x):
        p = _lift(x, dims, z)
        vr, vo = p - ref, p - oth
        nr = np.maximum(np.linalg.norm(vr, axis=1), 1e-12)
        no = np.maximum(np.linalg.norm(vo, axis=1), 1e-12)
        r = (no - nr) - meas
        jac = vo / no[:, None] - vr / nr[:, None]
        return r, jac[:, :dims]

    starts = [init_arr[:dims]]
    if dims == 3 and auto_init:
        starts += _plane_starts(np.array([pos[i] for i in ids]))
    x, rn, it, ok, jtj = _multi_start(residual, starts, max_iterations)
    return _estimate(x, dims, z, rn, it, ok, jtj, len(rstds), max_rms_m)


def solve_rtt(
    anchors: Sequence[Position3D],
    rtts: Sequence[float],
    init: Position3D | None = None,
    dims: int = 3,
    z: float | None = None,
    max_iterations: int = 50,
    max_rms_m: float = 5.0,
    c: float = SPEED_OF_LIGHT,
) -> PositionEstimate:
    """Trilateration on ranges ``c * RTT / 2``."""
    if len(anchors) != len(rtts):
        raise ValueError("one RTT per anchor")
    _check_count(len(rtts), dims, "ranges")
    auto_init = init is None
    a = np.array([_as_array(p) for p in anchors])
    ranges = c * np.asarray(rtts, dtype=float) / 2.0
    if init is None:
        z0 = float(a[:, 2].mean()) if z is None else float(z)
        init_arr = _linear_range_init(a, ranges, dims, z0)
    else:
        init_arr = _as_array(init)
    z = float(init_arr[2]) if z is None else float(z)

    def residual(x):
        p = _lift(x, dims, z)
        v = p - a
        n = np.maximum(np.linalg.norm(v, axis=1), 1e-12)
        return n - ranges, (v / n[:, None])[:, :dims]

    starts = [init_arr[:dims]]
    if dims == 3 and auto_init:
        starts += _plane_starts(a)
    x, rn, it, ok, jtj = _multi_start(residual, starts, max_iterations)
    return _estimate(x, dims, z, rn, it, ok, jtj, len(rtts), max_rms_m)


def _linear_range_init(a: np.ndarray, ranges: np.ndarray, dims: int, z: float) -> np.ndarray:
    """Closed-form start point from differencing squared range equations."""
    az = a.copy()
    if dims == 2:
        # fold the known height into the ranges
        ranges = np.sqrt(np.maximum(ranges**2 - (a[:, 2] - z) ** 2, 0.0))
        az[:, 2] = z
    m = az[1:, :dims] - az[0, :dims]
    rhs = 0.5 * (ranges[0] ** 2 - ranges[1:] ** 2 + np.sum(az[1:, :dims] ** 2, axis=1) - np.sum(az[0, :dims] ** 2))
    x = np.linalg.lstsq(m, rhs, rcond=None)[0]
    out = np.array([x[0], x[1], z])
    if dims == 3:
        out[2] = x[2]
    return out


def solve_aoa(
    anchors: Sequence[Position3D],
    angles: Sequence[AngleMeasurement],
    dims: int = 2,
    z: float = 0.0,
    max_rms_m: float = 5.0,
    cond_limit: float = 1e10,
) -> PositionEstimate:
    """Least-squares intersection of bearing lines (2D) or direction rays (3D).

    Minimizes the summed squared perpendicular distance from the estimate to
    each line; closed form, so ``iterations`` is always 1.
    """
    if len(anchors) != len(angles):
        raise ValueError("one angle report per anchor")
    if len(angles) < 2:
        raise UnderdeterminedError("AoA triangulation needs at least two bearings")
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    a_mat = np.zeros((dims, dims))
    b_vec = np.zeros(dims)
    projs = []
    for anchor, ang in zip(anchors, angles):
        if ang.frame is not Frame.GCS:
            raise ValueError("convert LCS angles to GCS before triangulating")
        u = ang.direction()
        if dims == 2:
            u = u[:2]
            nu = np.linalg.norm(u)
            if nu == 0:
                raise SingularGeometryError("vertical arrival carries no horizontal bearing")
            u = u / nu
        pa = _as_array(anchor)[:dims]
        proj = np.eye(dims) - np.outer(u, u)
        a_mat += proj
        b_vec += proj @ pa
        projs.append((proj, pa))
    if np.linalg.cond(a_mat) > cond_limit:
        raise SingularGeometryError("bearings are parallel; intersection undefined")
    x = np.linalg.solve(a_mat, b_vec)
    res = np.array([np.linalg.norm(proj @ (x - pa)) for proj, pa in projs])
    rn = float(np.linalg.norm(res))
    cov = tuple(tuple(float(v) for v in row) for row in np.linalg.inv(a_mat))
    p = _lift(x, dims, z)
    return PositionEstimate(Position3D(*p), rn, 1, rn / math.sqrt(len(angles)) <= max_rms_m, cov)
