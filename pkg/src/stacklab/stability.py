"""Stability labels from simulation traces and a quasi-static equilibrium oracle."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .geometry import axis_aligned_half_extents

TAU = 0.25
MARGIN_EPSILON = 0.05
MARGIN_RANGE = 3.0


class MissingTrace(ValueError):
    pass


class UnsupportedGeometry(ValueError):
    pass


@dataclass(frozen=True)
class StabilityLabel:
    unstable: bool
    per_block_displacement: tuple
    tau: float

    @property
    def max_displacement(self) -> float:
        return max(self.per_block_displacement) if self.per_block_displacement else 0.0


def block_displacements(trace) -> np.ndarray:
    if trace.diverged:
        return np.full(len(trace.initial_poses), np.inf)
    return np.linalg.norm(trace.final_positions - trace.initial_positions, axis=1)


def label_from_displacements(displacements, tau: float = TAU) -> StabilityLabel:
    d = tuple(float(v) for v in displacements)
    return StabilityLabel(any(v > tau for v in d), d, float(tau))


def label_stability(trace, tau: float = TAU) -> StabilityLabel:
    """S = OR_i (|p_i(T) - p_i(0)| > tau); diverged traces count as unstable."""
    return label_from_displacements(block_displacements(trace), tau)


@dataclass(frozen=True)
class DisplacementMap:
    magnitudes: tuple
    onset_block: int | None
    onset_time: float | None


def displacement_map(scene, trace, tau: float = TAU, require_steps: bool = False) -> DisplacementMap:
    """Per-block displacement plus the first block whose center moves more than tau/2."""
    mags = tuple(float(v) for v in block_displacements(trace))
    rec = trace.per_step_positions
    if rec is None or trace.record_every <= 0:
        if require_steps:
            raise MissingTrace("per-step positions were not recorded")
        return DisplacementMap(mags, None, None)
    start = rec[0]
    for k in range(1, rec.shape[0]):
        if np.isnan(rec[k]).any():
            break
        moved = np.linalg.norm(rec[k] - start, axis=1)
        over = np.nonzero(moved > tau / 2)[0]
        if over.size:
            # ties resolved by the larger displacement, then the lower index
            first = int(over[np.argmax(moved[over])])
            return DisplacementMap(mags, first, k * trace.record_every * _dt_of(trace))
    return DisplacementMap(mags, None, None)


def _dt_of(trace) -> float:
    return trace.final_time / trace.steps if trace.steps else 0.0


class Verdict(enum.Enum):
    STABLE = "Stable"
    UNSTABLE = "Unstable"
    MARGINAL = "Marginal"


@dataclass(frozen=True)
class EquilibriumVerdict:
    verdict: Verdict
    margin: float

    @property
    def is_stable(self) -> bool:
        return self.verdict is Verdict.STABLE


@dataclass(frozen=True)
class _Contact:
    lower: int  # -1 for the ground
    upper: int
    axis: int  # normal direction (world axis), pointing from lower to upper
    plane: float
    lo: tuple  # rectangle in the two tangent axes
    hi: tuple


def _boxes(scene):
    out = []
    for c, p in scene.blocks:
        h = axis_aligned_half_extents(c, p)
        if h is None:
            raise UnsupportedGeometry("quasi-static check needs axis-aligned block poses")
        out.append((p.position - h, p.position + h, c.volume))
    return out


def _contacts(boxes, tol):
    contacts = []
    for i, (lo, hi, _) in enumerate(boxes):
        if abs(lo[2]) <= tol:
            contacts.append(_Contact(-1, i, 2, 0.0, (lo[0], lo[1]), (hi[0], hi[1])))
    for i, (lo_i, hi_i, _) in enumerate(boxes):
        for j, (lo_j, hi_j, _) in enumerate(boxes):
            if i == j:
                continue
            for axis in range(3):
                if abs(lo_j[axis] - hi_i[axis]) > tol:
                    continue
                t = [a for a in range(3) if a != axis]
                rlo = tuple(max(lo_i[a], lo_j[a]) for a in t)
                rhi = tuple(min(hi_i[a], hi_j[a]) for a in t)
                if rlo[0] < rhi[0] and rlo[1] < rhi[1]:
                    contacts.append(_Contact(i, j, axis, hi_i[axis], rlo, rhi))
    return contacts


def _feasible(boxes, contacts, shrink, mu, gravity):
    """LP feasibility of non-negative corner forces balancing every block."""
    nb = len(boxes)
    centers = [0.5 * (lo + hi) for lo, hi, _ in boxes]
    columns = []  # (body_lower, body_upper, point, force direction)
    ub_rows = []
    for c in contacts:
        lo = (c.lo[0] + shrink, c.lo[1] + shrink)
        hi = (c.hi[0] - shrink, c.hi[1] - shrink)
        if lo[0] > hi[0] or lo[1] > hi[1] or (shrink > 0 and (lo[0] == hi[0] or lo[1] == hi[1])):
            continue
        t = [a for a in range(3) if a != c.axis]
        nrm = np.zeros(3)
        nrm[c.axis] = 1.0
        for u in (lo[0], hi[0]):
            for v in (lo[1], hi[1]):
                pt = np.zeros(3)
                pt[c.axis] = c.plane
                pt[t[0]], pt[t[1]] = u, v
                base = len(columns)
                columns.append((c.lower, c.upper, pt, nrm))
                for a in t:
                    for sgn in (1.0, -1.0):
                        d = np.zeros(3)
                        d[a] = sgn
                        columns.append((c.lower, c.upper, pt, d))
                row = {base: -mu}
                for k in range(1, 5):
                    row[base + k] = 1.0
                ub_rows.append(row)
    nv = len(columns)
    if nv == 0:
        return False
    a_eq = np.zeros((6 * nb, nv))
    b_eq = np.zeros(6 * nb)
    for k, (lower, upper, pt, d) in enumerate(columns):
        for body, sgn in ((upper, 1.0), (lower, -1.0)):
            if body < 0:
                continue
            f = sgn * d
            a_eq[6 * body:6 * body + 3, k] += f
            a_eq[6 * body + 3:6 * body + 6, k] += np.cross(pt - centers[body], f)
    for b, (_, _, mass) in enumerate(boxes):
        b_eq[6 * b:6 * b + 3] = -mass * np.asarray(gravity)
    a_ub = np.zeros((len(ub_rows), nv))
    for r, row in enumerate(ub_rows):
        for k, v in row.items():
            a_ub[r, k] = v
    res = linprog(np.zeros(nv), A_ub=a_ub, b_ub=np.zeros(len(ub_rows)), A_eq=a_eq, b_eq=b_eq,
                  bounds=(0, None), method="highs")
    return res.status == 0


def equilibrium_margin(scene, mu: float = 0.5, gravity=(0.0, 0.0, -9.81), tol: float = 1e-4,
                       iterations: int = 24) -> float:
    """Largest inset of every contact region that still admits static equilibrium.

    Negative values are the outset needed to become feasible; for a single
    block this is the signed distance from its center of mass to the edge of
    its footprint.
    """
    boxes = _boxes(scene)
    contacts = _contacts(boxes, tol)
    supported = {c.upper for c in contacts}
    if len(supported) < len(boxes):
        return -MARGIN_RANGE
    if _feasible(boxes, contacts, 0.0, mu, gravity):
        lo, hi = 0.0, MARGIN_RANGE
    elif not _feasible(boxes, contacts, -MARGIN_RANGE, mu, gravity):
        return -MARGIN_RANGE
    else:
        lo, hi = -MARGIN_RANGE, 0.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if _feasible(boxes, contacts, mid, mu, gravity):
            lo = mid
        else:
            hi = mid
    return lo


def quasi_static_check(scene, mu: float = 0.5, margin_epsilon: float = MARGIN_EPSILON,
                       **kwargs) -> EquilibriumVerdict:
    m = equilibrium_margin(scene, mu=mu, **kwargs)
    if m >= margin_epsilon:
        return EquilibriumVerdict(Verdict.STABLE, m)
    if m <= -margin_epsilon:
        return EquilibriumVerdict(Verdict.UNSTABLE, m)
    return EquilibriumVerdict(Verdict.MARGINAL, m)
