"""Invariant-manifold geometry for unstable periodic orbits.

Grows unstable/stable manifold polylines adaptively, locates and refines
transversal crossings, evaluates action differences and circuit areas,
forms shadowing (curvature) corrections and crossing-partner pairs, and
transports Gaussian phase-space states along the linearized dynamics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import stadium
from .dynamics import MapSystem, PhasePoint, step, inverse_step, step_action
from .orbits import PeriodicOrbit, monodromy_power
from .stability import (StabilityMatrix, propagate_tangent,
                        monodromy_directions, caustic_count_map)
from .symbolic import SIDE_LETTERS, stadium_side

DEFAULT_SPACING = 1e-3        # maximum gap between adjacent polyline points
DEFAULT_TURNING = 0.05        # maximum turning angle (radians) at a vertex
SEED_EPS = 1e-8               # displacement of the seed segment from the orbit
MAX_GENERATIONS = 60
CROSSING_TOL = 1e-10          # refinement target for crossing locations
TANGENTIAL_ANGLE = 1e-6       # crossings flatter than this are flagged


class ManifoldBudgetError(RuntimeError):
    """Raised when the requested arclength cannot be reached; carries the
    partial segment grown so far in ``segment``."""

    def __init__(self, message: str, segment: "ManifoldSegment"):
        super().__init__(message)
        self.segment = segment


class ConvergenceError(RuntimeError):
    """An iterative limit failed to settle within its step budget."""


def _q_period(system: MapSystem) -> Optional[float]:
    if system.kind == "stadium":
        return stadium.perimeter(system.params["gamma"])
    if system.kind in ("standard", "baker"):
        return 1.0
    return None


def _wrap_delta(dq, period):
    """Difference folded to the nearest chart image."""
    if period is None:
        return dq
    return (dq + 0.5 * period) % period - 0.5 * period


def _advance(system: MapSystem, q, p, steps: int, forward: bool):
    """Apply `steps` map iterations (or inverses) to coordinate arrays."""
    for _ in range(steps):
        if forward:
            q, p = step(system, q, p)
        else:
            q, p = inverse_step(system, q, p)
    return q, p


@dataclass
class _GrowthSource:
    """Seed-segment description allowing any grown point to be recomputed."""
    system: MapSystem
    forward: bool
    steps_per_gen: int         # map steps per growth application
    base: np.ndarray           # seed start (q, p)
    delta: np.ndarray          # seed end minus seed start

    def points_at(self, params, generation: int):
        params = np.asarray(params, dtype=float)
        q = self.base[0] + params * self.delta[0]
        p = self.base[1] + params * self.delta[1]
        for _ in range(generation):
            q, p = _advance(self.system, q, p, self.steps_per_gen, self.forward)
        return q, p


@dataclass
class ManifoldSegment:
    """Polyline approximation of one side of an invariant manifold branch.

    Points are chart coordinates (q, p) in the fundamental domain;
    `arclength` is cumulative with chart-wrap-aware gaps, and `generation`
    records how many period-map applications produced each point.
    """
    orbit: PeriodicOrbit
    branch: str                # "unstable" or "stable"
    side: int                  # +1 / -1 along the eigendirection
    points: np.ndarray         # (N, 2)
    arclength: np.ndarray      # (N,)
    generation: np.ndarray     # (N,) int
    params: np.ndarray         # (N,) seed-segment parameter of each point
    source: _GrowthSource = field(repr=False)
    start_index: int = 0

    def __len__(self) -> int:
        return len(self.points)

    @property
    def system(self) -> MapSystem:
        return self.orbit.system

    def total_arclength(self) -> float:
        return float(self.arclength[-1])

    def point_on(self, s: float) -> np.ndarray:
        """Interpolated point at arclength s."""
        s = float(np.clip(s, 0.0, self.arclength[-1]))
        i = int(np.searchsorted(self.arclength, s, side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        span = self.arclength[i + 1] - self.arclength[i]
        t = 0.0 if span == 0 else (s - self.arclength[i]) / span
        period = _q_period(self.system)
        dq = _wrap_delta(self.points[i + 1, 0] - self.points[i, 0], period)
        dp = self.points[i + 1, 1] - self.points[i, 1]
        return np.array([self.points[i, 0] + t * dq, self.points[i, 1] + t * dp])

    def slice_between(self, s0: float, s1: float) -> np.ndarray:
        """Polyline portion between two arclengths (endpoints interpolated)."""
        if s1 < s0:
            pts = self.slice_between(s1, s0)
            return pts[::-1]
        mask = (self.arclength > s0) & (self.arclength < s1)
        body = self.points[mask]
        return np.vstack([self.point_on(s0), body, self.point_on(s1)])


def _eigendirection(system, point, steps, branch):
    mono, _ = propagate_tangent(system, point, steps)
    vu, vs, lu, ls = monodromy_directions(mono)
    if branch == "unstable":
        vec, lam = vu, lu
    else:
        vec, lam = vs, 1.0 / ls
    # tangent data is (delta_p, delta_q); phase-plane direction is (dq, dp)
    direction = np.array([vec[1], vec[0]])
    direction /= np.linalg.norm(direction)
    return direction, lam


def grow_manifold(orbit: PeriodicOrbit, branch: str = "unstable",
                  side: int = 1, arclength_budget: float = 10.0, *,
                  start_index: int = 0, spacing: float = DEFAULT_SPACING,
                  turning: float = DEFAULT_TURNING, seed_eps: float = SEED_EPS,
                  max_generations: int = MAX_GENERATIONS) -> ManifoldSegment:
    """Grow one side of an invariant-manifold branch to a target arclength.

    The seed is the segment between x + eps*e and its period-map image
    (e the monodromy eigendirection); each growth application maps the seed
    one more period forward (backward for the stable branch).  Points are
    inserted adaptively wherever the gap exceeds `spacing` or the local
    turning angle exceeds `turning`.  Source parameters are nested across
    generations, so the image of every vertex is again a vertex.
    """
    if branch not in ("unstable", "stable"):
        raise ValueError("branch must be 'unstable' or 'stable'")
    if side not in (1, -1):
        raise ValueError("side must be +1 or -1")
    system = orbit.system
    if system.is_flow:
        raise ValueError("manifold growth applies to discrete maps")
    x0 = orbit.points[start_index % orbit.period]
    forward = branch == "unstable"
    direction, lam = _eigendirection(system, x0, orbit.period, branch)
    direction = side * direction
    # a reflection-hyperbolic map flips the branch side each period; grow
    # with the doubled map so one side stays on one polyline
    apps = 1 if lam > 0 else 2
    steps_per_gen = apps * orbit.period
    base = np.array([x0.q, x0.p]) + seed_eps * direction
    qe, pe = _advance(system, np.array([base[0]]), np.array([base[1]]),
                      steps_per_gen, forward)
    seed_end = np.array([qe[0], pe[0]])
    period = _q_period(system)
    delta = np.array([_wrap_delta(seed_end[0] - base[0], period),
                      seed_end[1] - base[1]])
    source = _GrowthSource(system, forward, steps_per_gen, base, delta)

    all_pts = [np.array([x0.q, x0.p])]
    all_gen = [-1]
    all_par = [0.0]
    all_arc = [0.0]
    total = seed_eps

    def _append(qs, ps, gens, pars, skip_first):
        nonlocal total
        rng = range(1 if skip_first else 0, len(qs))
        for i in rng:
            prev = all_pts[-1]
            gap = math.hypot(_wrap_delta(qs[i] - prev[0], period), ps[i] - prev[1])
            total += gap
            all_pts.append(np.array([qs[i], ps[i]]))
            all_gen.append(gens)
            all_par.append(pars[i])
            all_arc.append(total)
            if total >= arclength_budget:
                return True
        return False

    params = list(np.linspace(0.0, 1.0, 9))
    prev_cache: dict[float, tuple[float, float]] = {}
    done = False
    gen = 0
    while not done:
        if gen > max_generations:
            seg = _finish_segment(orbit, branch, side, all_pts, all_arc,
                                  all_gen, all_par, source, start_index)
            raise ManifoldBudgetError(
                f"arclength {arclength_budget} unreachable within "
                f"{max_generations} generations (grew {total:.3g})", seg)
        # advance inherited params from the previous generation; compute
        # fresh ones from the seed segment
        cache: dict[float, tuple[float, float]] = {}
        inherited = [t for t in params if t in prev_cache]
        if inherited:
            qs = np.array([prev_cache[t][0] for t in inherited])
            ps = np.array([prev_cache[t][1] for t in inherited])
            qs, ps = _advance(system, qs, ps, steps_per_gen, forward)
            cache.update({t: (qs[i], ps[i]) for i, t in enumerate(inherited)})
        fresh = [t for t in params if t not in cache]
        if fresh:
            qs, ps = source.points_at(fresh, gen)
            cache.update({t: (qs[i], ps[i]) for i, t in enumerate(fresh)})

        # adaptive insertion until spacing and turning limits hold
        for _ in range(60):
            params.sort()
            pts = np.array([cache[t] for t in params])
            dq = _wrap_delta(np.diff(pts[:, 0]), period)
            dp = np.diff(pts[:, 1])
            gaps = np.hypot(dq, dp)
            need = set()
            for i in np.nonzero(gaps > spacing)[0]:
                need.add(i)
            if len(params) > 2:
                segdir = np.stack([dq, dp], axis=1)
                norms = np.maximum(gaps, 1e-150)
                cosang = np.sum(segdir[:-1] * segdir[1:], axis=1) / (norms[:-1] * norms[1:])
                angles = np.arccos(np.clip(cosang, -1.0, 1.0))
                for i in np.nonzero(angles > turning)[0]:
                    need.add(i)
                    need.add(i + 1)
            new_params = []
            for i in sorted(need):
                lo, hi = params[i], params[i + 1]
                if hi - lo > 1e-12:
                    new_params.append(0.5 * (lo + hi))
            if not new_params:
                break
            qs, ps = source.points_at(new_params, gen)
            cache.update({t: (qs[i], ps[i]) for i, t in enumerate(new_params)})
            params.extend(new_params)
        params.sort()
        pts = [cache[t] for t in params]
        done = _append(np.array([x[0] for x in pts]), np.array([x[1] for x in pts]),
                       gen, params, skip_first=(gen > 0))
        prev_cache = cache
        gen += 1
    return _finish_segment(orbit, branch, side, all_pts, all_arc, all_gen,
                           all_par, source, start_index)


def _finish_segment(orbit, branch, side, pts, arc, gens, pars, source,
                    start_index) -> ManifoldSegment:
    return ManifoldSegment(orbit, branch, side, np.array(pts),
                           np.array(arc), np.array(gens, dtype=int),
                           np.array(pars), source, start_index)


# --- homoclinic crossings ---------------------------------------------------

@dataclass
class HomoclinicPoint:
    """Transversal crossing of an unstable and a stable polyline."""
    location: PhasePoint
    u_arclength: float
    s_arclength: float
    u_index: float             # fractional segment index along U
    s_index: float
    angle: float               # crossing angle (radians, acute)
    tangential: bool
    orbit_u: PeriodicOrbit
    orbit_s: PeriodicOrbit
    relative_action: Optional[float] = None


def _segment_cross(a0, a1, b0, b1):
    """Intersection parameters (t, s) of two segments, or None."""
    u = a1 - a0
    v = b1 - b0
    den = u[0] * v[1] - u[1] * v[0]
    scale = max(np.hypot(*u), np.hypot(*v))
    if abs(den) <= 1e-14 * scale * scale:
        return None
    w = b0 - a0
    t = (w[0] * v[1] - w[1] * v[0]) / den
    s = (w[0] * u[1] - w[1] * u[0]) / den
    if -1e-9 <= t <= 1.0 + 1e-9 and -1e-9 <= s <= 1.0 + 1e-9:
        return t, s
    return None


def _segment_arrays(seg: ManifoldSegment):
    period = _q_period(seg.system)
    pts = seg.points
    a0 = pts[:-1].copy()
    dq = _wrap_delta(np.diff(pts[:, 0]), period)
    dp = np.diff(pts[:, 1])
    return a0, np.stack([dq, dp], axis=1)


def _raw_crossings(useg: ManifoldSegment, sseg: ManifoldSegment):
    """Candidate segment pairs via a spatial hash over chart cells."""
    period = _q_period(useg.system)
    ua, ud = _segment_arrays(useg)
    sa, sd = _segment_arrays(sseg)
    h = max(DEFAULT_SPACING * 8, 1e-6)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i in range(len(ua)):
        qlo = min(ua[i, 0], ua[i, 0] + ud[i, 0])
        qhi = max(ua[i, 0], ua[i, 0] + ud[i, 0])
        plo = min(ua[i, 1], ua[i, 1] + ud[i, 1])
        phi = max(ua[i, 1], ua[i, 1] + ud[i, 1])
        for ci in range(int(qlo // h), int(qhi // h) + 1):
            key_i = ci if period is None else ci % max(int(period / h), 1)
            for cj in range(int(plo // h), int(phi // h) + 1):
                buckets.setdefault((key_i, cj), []).append(i)
    hits = []
    ncells = None if period is None else max(int(period / h), 1)
    for j in range(len(sa)):
        qlo = min(sa[j, 0], sa[j, 0] + sd[j, 0])
        qhi = max(sa[j, 0], sa[j, 0] + sd[j, 0])
        plo = min(sa[j, 1], sa[j, 1] + sd[j, 1])
        phi = max(sa[j, 1], sa[j, 1] + sd[j, 1])
        cand: set[int] = set()
        for ci in range(int(qlo // h) - 1, int(qhi // h) + 2):
            key_i = ci if ncells is None else ci % ncells
            for cj in range(int(plo // h) - 1, int(phi // h) + 2):
                cand.update(buckets.get((key_i, cj), ()))
        b0 = sa[j]
        for i in cand:
            if period is None:
                shifts = (0.0,)
            else:
                # a discontinuity chord spanning half the chart wraps
                # ambiguously, so try both neighbouring images as well
                base = round((ua[i, 0] - b0[0]) / period) * period
                shifts = (base, base - period, base + period)
            for shift in shifts:
                res = _segment_cross(ua[i], ua[i] + ud[i],
                                     b0 + np.array([shift, 0.0]),
                                     b0 + np.array([shift, 0.0]) + sd[j])
                if res is not None:
                    hits.append((i, j, res[0], res[1]))
                    break
    return hits, (ua, ud), (sa, sd)


def _refine_crossing(useg, sseg, iu, js, depth: int = 4, fan: int = 8):
    """Shrink the crossing bracket by resampling both source intervals."""
    period = _q_period(useg.system)
    if useg.generation[iu] < 0 or sseg.generation[js] < 0:
        return None
    gu = int(useg.generation[iu + 1])
    gs = int(sseg.generation[js + 1])
    ulo, uhi = useg.params[iu], useg.params[iu + 1]
    slo, shi = sseg.params[js], sseg.params[js + 1]
    # a generation junction joins param 1.0 of the old level to the first
    # fresh param of the new one; in new-level source coordinates the old
    # endpoint is param 0.0
    if useg.generation[iu] != gu:
        ulo = 0.0
    if sseg.generation[js] != gs:
        slo = 0.0
    best = None
    for _ in range(depth):
        tu = np.linspace(min(ulo, uhi), max(ulo, uhi), fan + 1)
        ts = np.linspace(min(slo, shi), max(slo, shi), fan + 1)
        qu, pu = useg.source.points_at(tu, gu)
        qs_, ps_ = sseg.source.points_at(ts, gs)
        upts = np.stack([qu, pu], axis=1)
        spts = np.stack([qs_, ps_], axis=1)
        if period is not None:
            ref = upts[0, 0]
            upts[:, 0] = ref + _wrap_delta(upts[:, 0] - ref, period)
            spts[:, 0] = ref + _wrap_delta(spts[:, 0] - ref, period)
        found = None
        for i in range(fan):
            for j in range(fan):
                res = _segment_cross(upts[i], upts[i + 1], spts[j], spts[j + 1])
                if res is not None:
                    found = (i, j, res[0], res[1])
                    break
            if found:
                break
        if found is None:
            break
        i, j, t, s = found
        pt = upts[i] + t * (upts[i + 1] - upts[i])
        udir = upts[i + 1] - upts[i]
        sdir = spts[j + 1] - spts[j]
        best = (pt, udir, sdir)
        ulo, uhi = tu[i], tu[i + 1]
        slo, shi = ts[j], ts[j + 1]
    return best


def find_homoclinic_points(useg: ManifoldSegment, sseg: ManifoldSegment, *,
                           refine: bool = True,
                           angle_tol: float = TANGENTIAL_ANGLE,
                           dedup: float = DEFAULT_SPACING / 4):
    """All transversal crossings of two manifold polylines, ordered along U.

    Raw polyline intersections are refined against the true map by bracket
    resampling of the source segments; near-tangential crossings are kept
    but flagged.
    """
    if useg.branch == sseg.branch:
        raise ValueError("need one unstable and one stable segment")
    hits, (ua, ud), (sa, sd) = _raw_crossings(useg, sseg)
    period = _q_period(useg.system)
    base_pts = np.vstack([np.column_stack([useg.orbit.q, useg.orbit.p]),
                          np.column_stack([sseg.orbit.q, sseg.orbit.p])])
    out = []
    for (i, j, t, s) in hits:
        pt = ua[i] + t * ud[i]
        udir, sdir = ud[i], sd[j]
        if refine:
            fine = _refine_crossing(useg, sseg, i, j)
            if fine is not None:
                pt, udir, sdir = fine
        cosang = np.dot(udir, sdir) / (np.linalg.norm(udir) * np.linalg.norm(sdir))
        ang = math.acos(min(1.0, max(-1.0, abs(cosang))))
        if period is not None:
            pt = np.array([pt[0] % period, pt[1]])
        # both branches emanate from their cycle points, so a coincidence
        # there is the anchor itself, not a homoclinic intersection
        d_base = np.hypot(_wrap_delta(base_pts[:, 0] - pt[0], period),
                          base_pts[:, 1] - pt[1])
        if float(d_base.min()) < 10.0 * SEED_EPS:
            continue
        u_arc = float(useg.arclength[i] + t * np.linalg.norm(ud[i]))
        s_arc = float(sseg.arclength[j] + s * np.linalg.norm(sd[j]))
        out.append(HomoclinicPoint(PhasePoint(float(pt[0]), float(pt[1])),
                                   u_arc, s_arc, i + t, j + s, ang,
                                   ang < angle_tol, useg.orbit, sseg.orbit))
    out.sort(key=lambda hp: hp.u_arclength)
    deduped: list[HomoclinicPoint] = []
    for hp in out:
        if deduped and abs(hp.u_arclength - deduped[-1].u_arclength) < dedup \
                and abs(hp.s_arclength - deduped[-1].s_arclength) < dedup:
            continue
        deduped.append(hp)
    return deduped


# --- action differences -----------------------------------------------------

def _orbit_cycle_arrays(orbit: PeriodicOrbit):
    return orbit.q, orbit.p


def _nearest_cycle_index(orbit, q, p):
    period = _q_period(orbit.system)
    dq = _wrap_delta(orbit.q - q, period)
    dp = orbit.p - p
    return int(np.argmin(np.hypot(dq, dp)))


def _asymptotic_segment(orbit, point, k_back, k_fwd):
    """Initial guess for the connecting orbit: iterate while approaching,
    then pad with periodic-orbit points."""
    system = orbit.system
    period = _q_period(system)

    def _march(x, steps, forward):
        qs = [x[0]]
        ps = [x[1]]
        q = np.array([x[0]])
        p = np.array([x[1]])
        best = np.inf
        frozen = None
        step_dir = 1 if forward else -1
        for _ in range(steps):
            q, p = _advance(system, q, p, 1, forward)
            if frozen is None:
                idx = _nearest_cycle_index(orbit, q[0], p[0])
                d = math.hypot(_wrap_delta(orbit.q[idx] - q[0], period),
                               orbit.p[idx] - p[0])
                if d > 4.0 * best:
                    # leaving the orbit again: snap here, pad with cycle points
                    frozen = idx
                    qs.append(orbit.q[idx])
                    ps.append(orbit.p[idx])
                else:
                    best = min(best, d)
                    qs.append(q[0])
                    ps.append(p[0])
            else:
                frozen = (frozen + step_dir) % orbit.period
                qs.append(orbit.q[frozen])
                ps.append(orbit.p[frozen])
        return qs, ps

    x0 = (point.q, point.p)
    fq, fp = _march(x0, k_fwd, True)
    bq, bp = _march(x0, k_back, False)
    qs = list(reversed(bq[1:])) + fq
    ps = list(reversed(bp[1:])) + fp
    return np.array(qs), np.array(ps)


def _polish_connecting_orbit(orbit, qs, ps, iterations: int = 40,
                             tol: float = 1e-13):
    """Newton-solve the discrete boundary-value problem: interior points obey
    the map; the ends lie on the local unstable/stable eigenlines."""
    system = orbit.system
    period = _q_period(system)
    npts = len(qs)
    ib = _nearest_cycle_index(orbit, qs[0], ps[0])
    ifw = _nearest_cycle_index(orbit, qs[-1], ps[-1])
    xb = np.array([orbit.q[ib], orbit.p[ib]])
    xf = np.array([orbit.q[ifw], orbit.p[ifw]])
    vu, _ = _eigendirection(system, PhasePoint(*xb), orbit.period, "unstable")
    vs, _ = _eigendirection(system, PhasePoint(*xf), orbit.period, "stable")
    for _ in range(iterations):
        q1, p1, M = _step_with_jacobian(system, qs[:-1], ps[:-1])
        rq = _wrap_delta(q1 - qs[1:], period)
        rp = p1 - ps[1:]
        # end constraints: displacement parallel to the eigendirection
        db = np.array([_wrap_delta(qs[0] - xb[0], period), ps[0] - xb[1]])
        df = np.array([_wrap_delta(qs[-1] - xf[0], period), ps[-1] - xf[1]])
        cb = vu[0] * db[1] - vu[1] * db[0]
        cf = vs[0] * df[1] - vs[1] * df[0]
        resid = np.concatenate([rq, rp, [cb, cf]])
        if np.max(np.abs(resid)) < tol:
            break
        A = np.zeros((2 * npts, 2 * npts))
        rows_q = np.arange(npts - 1)
        for k in range(npts - 1):
            # tangent matrices act on (delta_p, delta_q)
            m = M[k]
            A[rows_q[k], 2 * k] = m[1, 1]        # dq1/dq
            A[rows_q[k], 2 * k + 1] = m[1, 0]    # dq1/dp
            A[rows_q[k], 2 * (k + 1)] = -1.0
            A[npts - 1 + k, 2 * k] = m[0, 1]
            A[npts - 1 + k, 2 * k + 1] = m[0, 0]
            A[npts - 1 + k, 2 * (k + 1) + 1] = -1.0
        A[2 * npts - 2, 0] = -vu[1]
        A[2 * npts - 2, 1] = vu[0]
        A[2 * npts - 1, 2 * npts - 2] = -vs[1]
        A[2 * npts - 1, 2 * npts - 1] = vs[0]
        try:
            delta = np.linalg.solve(A, -resid)
        except np.linalg.LinAlgError:
            delta, *_ = np.linalg.lstsq(A, -resid, rcond=None)
        step_cap = 0.25
        mx = np.max(np.abs(delta))
        if mx > step_cap:
            delta *= step_cap / mx
        qs = qs + delta[0::2]
        ps = ps + delta[1::2]
    return qs, ps


def _step_with_jacobian(system, q, p):
    if system.kind == "stadium":
        q1, p1, _chord, M = stadium.step(system.params["gamma"], q, p,
                                         with_jacobian=True)
        return q1, p1, M
    q1, p1, M = step(system, q, p, with_jacobian=True)
    return q1, p1, M


def _segment_action(system, qs, ps):
    total = 0.0
    for k in range(len(qs) - 1):
        total += float(np.atleast_1d(step_action(system, qs[k], ps[k],
                                                 qs[k + 1], ps[k + 1]))[0])
    return total


def mmp_action_difference(orbit: PeriodicOrbit, point, *,
                          max_steps: int = 200, tol: float = 1e-12) -> float:
    """Action difference between the periodic orbit and the connecting orbit
    through a homoclinic point, over a matched bounce count.

    Reported as orbit-minus-excursion, which is positive for the excursions
    bounding a resonance from inside and equals the area of the manifold
    circuit through the point.  The window grows a period per side until the
    difference changes by less than `tol`; each window is polished as a
    discrete boundary-value problem so roundoff does not leak along the
    unstable direction.
    """
    if isinstance(point, HomoclinicPoint):
        point = point.location
    system = orbit.system
    n = orbit.period
    per_period = orbit.action
    prev = None
    k = 3
    while True:
        if 2 * k * n > max_steps:
            raise ConvergenceError(
                f"action difference not settled within {max_steps} steps")
        qs, ps = _asymptotic_segment(orbit, point, k * n, k * n)
        qs, ps = _polish_connecting_orbit(orbit, qs, ps)
        value = 2 * k * per_period - _segment_action(system, qs, ps)
        if prev is not None and abs(value - prev) < tol:
            return float(value)
        prev = value
        k += 1


# --- circuit areas ----------------------------------------------------------

def area_between_manifolds(u_path, s_path, corners=(), *,
                           closure_tol: float = 1e-6,
                           q_period: Optional[float] = None) -> float:
    """Signed area (loop integral of p dq) of the circuit made of a manifold
    arc, a returning arc, and optional straight closing corners.

    The two arcs are joined head-to-tail (the second is reversed if that
    makes it fit) and must meet within `closure_tol`.  `corners` lists
    explicit extra vertices whose straight edges close the polygon; without
    them, a circuit whose ends do not meet is rejected.  The q differences
    are unfolded to the nearest chart image so seam-crossing circuits
    integrate correctly.
    """
    chain = np.asarray(u_path, dtype=float).reshape(-1, 2)
    nxt = np.asarray(s_path, dtype=float).reshape(-1, 2)
    d_fwd = _chain_gap(chain[-1], nxt[0], q_period)
    d_rev = _chain_gap(chain[-1], nxt[-1], q_period)
    if d_rev < d_fwd:
        nxt = nxt[::-1]
        d_fwd = d_rev
    if d_fwd > closure_tol:
        raise ValueError(f"open circuit: arcs meet with gap {d_fwd:.3g}")
    chain = np.vstack([chain, nxt])
    if corners is not None and len(corners):
        chain = np.vstack([chain, np.asarray(corners, dtype=float).reshape(-1, 2)])
    elif _chain_gap(chain[-1], chain[0], q_period) > closure_tol:
        raise ValueError("open circuit: endpoints do not close")
    if len(chain) < 3:
        return 0.0
    closed = np.vstack([chain, chain[:1]])
    dq = _wrap_delta(np.diff(closed[:, 0]), q_period)
    pm = 0.5 * (closed[:-1, 1] + closed[1:, 1])
    return float(np.sum(pm * dq))


def _chain_gap(a, b, q_period):
    return math.hypot(_wrap_delta(b[0] - a[0], q_period), b[1] - a[1])


# --- shadowing (curvature) corrections --------------------------------------

class CurvatureCorrection(NamedTuple):
    action_defect: float       # W_shadow - W_1 - W_2
    det_ratio: float           # weight(shadow) / (weight_1 * weight_2)
    relative_defect: float     # |action defect| / W_shadow


def _orbit_word(orbit: PeriodicOrbit) -> str:
    if orbit.system.kind != "stadium":
        raise ValueError("bounce itineraries are defined on the stadium chart")
    gamma = orbit.system.params["gamma"]
    return "".join(SIDE_LETTERS[int(s)] for s in stadium_side(gamma, orbit.q))


def _rotations(word: str):
    return {word[i:] + word[:i] for i in range(len(word))}


def curvature_correction(orbit1: PeriodicOrbit, orbit2: PeriodicOrbit,
                         shadow: PeriodicOrbit) -> CurvatureCorrection:
    """Action and weight defects of a long orbit against the pair of short
    orbits it shadows.

    Requires period(shadow) = period(1) + period(2) and the shadow itinerary
    to be a cyclic concatenation of the two short itineraries.  The weight is
    Tr(M) - 2 per orbit.
    """
    if shadow.period != orbit1.period + orbit2.period:
        raise ValueError("shadow period must equal the summed periods")
    w1, w2, w12 = (_orbit_word(o) for o in (orbit1, orbit2, shadow))
    rots12 = _rotations(w12)
    if not any(a + b in rots12 for a in _rotations(w1) for b in _rotations(w2)):
        raise ValueError("shadow itinerary is not a concatenation of the pair")
    d_w = shadow.action - orbit1.action - orbit2.action
    weight = lambda o: o.monodromy.trace - 2.0
    det_ratio = weight(shadow) / (weight(orbit1) * weight(orbit2))
    return CurvatureCorrection(float(d_w), float(det_ratio),
                               abs(d_w) / shadow.action)


# --- crossing-partner (loop-reversal) scan ----------------------------------

class PartnerPair(NamedTuple):
    crossing: PeriodicOrbit
    partner: PeriodicOrbit
    repeats: tuple[int, int]
    action_difference: float   # W(crossing) - W(partner)
    trace_ratio: float         # Tr(crossing) / Tr(partner) over the window
    crossing_angle: float
    caustic_counts: tuple[int, int]
    word: str


def _cartesian_polygon(orbit: PeriodicOrbit) -> np.ndarray:
    gamma = orbit.system.params["gamma"]
    xy = [stadium.boundary_frame(gamma, q)[:2] for q in orbit.q]
    return np.array([[float(np.atleast_1d(x)[0]), float(np.atleast_1d(y)[0])]
                     for x, y in xy])


def _self_crossings(xy: np.ndarray):
    """Transversal self-intersections of the closed bounce polygon."""
    n = len(xy)
    count = 0
    min_angle = math.pi
    for i in range(n):
        a0, a1 = xy[i], xy[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b0, b1 = xy[j], xy[(j + 1) % n]
            res = _segment_cross(a0, a1, b0, b1)
            if res is None:
                continue
            t, s = res
            if 1e-9 < t < 1.0 - 1e-9 and 1e-9 < s < 1.0 - 1e-9:
                u = a1 - a0
                v = b1 - b0
                c = abs(np.dot(u, v)) / (np.linalg.norm(u) * np.linalg.norm(v))
                ang = math.acos(min(1.0, c))
                if ang < 1e-6:
                    continue    # retraced chord, not a transversal crossing
                count += 1
                min_angle = min(min_angle, ang)
    return count, min_angle


def _canonical_word(word: str) -> str:
    return min(min(_rotations(word)), min(_rotations(word[::-1])))


def sieber_richter_scan(census, angle_max: float = math.pi / 2):
    """Self-crossing orbits paired with non-crossing partners that share the
    same coarse itinerary up to rotation and time reversal.

    Candidates include r-fold repeats of shorter census orbits so a doubled
    orbit can partner a longer one.  Pairs must agree in caustic count over
    the full window and differ in self-crossing count; the member with more
    crossings is reported first, with the action difference and trace ratio
    taken crossing-over-partner.
    """
    if census.system.kind != "stadium":
        raise ValueError("the partner scan is defined on the stadium chart")
    n = census.n
    cands = []
    for orb in census.orbits:
        if n % orb.period:
            continue
        r = n // orb.period
        word = _orbit_word(orb) * r
        poly = _cartesian_polygon(orb)
        cross, angle = _self_crossings(poly)
        caus = caustic_count_map(census.system, orb.points[0], n)
        tr = monodromy_power(orb.monodromy, r).trace if r > 1 else orb.monodromy.trace
        cands.append((orb, r, _canonical_word(word), cross, angle, caus,
                      r * orb.action, tr))
    pairs = []
    seen = set()
    for i in range(len(cands)):
        for j in range(len(cands)):
            if i == j:
                continue
            oa, ra, wa, xa, anga, ca, wacta, tra = cands[i]
            ob, rb, wb, xb, angb, cb, wactb, trb = cands[j]
            if xa <= xb or wa != wb or ca != cb:
                continue            # i must be the (more) crossing member
            if anga > angle_max:
                continue
            # symmetry copies repeat the same numbers; keep one per family
            key = (round(wacta * 1e8), round(wactb * 1e8),
                   round(tra / trb * 1e8))
            if key in seen:
                continue
            seen.add(key)
            pairs.append(PartnerPair(oa, ob, (ra, rb),
                                     float(wacta - wactb),
                                     float(tra / trb), float(anga),
                                     (ca, cb), wa))
    pairs.sort(key=lambda pr: abs(pr.action_difference))
    return pairs


# --- Gaussian states --------------------------------------------------------

@dataclass(frozen=True)
class GaussianState:
    """Localized phase-space Gaussian with complex shape parameter b = c + id.

    The associated quadratic-form matrix (on (dq, dp), unit determinant) is
    A = [[c + d^2/c, d/c], [d/c, 1/c]], and the state's phase-space density
    is exp(-x A x / hbar) / (pi hbar).
    """
    centroid: PhasePoint
    b: complex = 1.0 + 0.0j
    hbar: float = 0.01

    def __post_init__(self):
        if not isinstance(self.centroid, PhasePoint):
            object.__setattr__(self, "centroid", PhasePoint(*self.centroid))
        if self.b.real <= 0:
            raise ValueError("shape parameter must have positive real part")
        if self.hbar <= 0:
            raise ValueError("hbar must be positive")

    def quadratic_form(self) -> np.ndarray:
        c, d = self.b.real, self.b.imag
        return np.array([[c + d * d / c, d / c], [d / c, 1.0 / c]])

    def covariance(self) -> np.ndarray:
        c, d = self.b.real, self.b.imag
        inv_a = np.array([[1.0 / c, -d / c], [-d / c, c + d * d / c]])
        return 0.5 * self.hbar * inv_a

    def density(self, q, p, q_period: Optional[float] = None):
        dq = _wrap_delta(np.asarray(q, dtype=float) - self.centroid.q, q_period)
        dp = np.asarray(p, dtype=float) - self.centroid.p
        a = self.quadratic_form()
        quad = a[0, 0] * dq * dq + 2.0 * a[0, 1] * dq * dp + a[1, 1] * dp * dp
        return np.exp(-quad / self.hbar) / (math.pi * self.hbar)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        mean = np.array([self.centroid.q, self.centroid.p])
        return rng.multivariate_normal(mean, self.covariance(), size=size)


def evolve_gaussian(system: MapSystem, state: GaussianState,
                    steps) -> GaussianState:
    """Transport a Gaussian state: centroid by the nonlinear map, shape by
    the linearized (Moebius) action on the slope parameter."""
    mono, end = propagate_tangent(system, state.centroid, steps)
    m = mono.entries
    ib = 1j * state.b
    ib_new = (m[0, 0] * ib + m[0, 1]) / (m[1, 0] * ib + m[1, 1])
    return GaussianState(end, complex(-1j * ib_new), state.hbar)


class OverlapTerm(NamedTuple):
    label: str
    value: float


def _gaussian_product_integral(mu_f, a_f, mu_i, a_i, hbar):
    diff = mu_f - mu_i
    s = a_f + a_i
    c_mat = a_f @ np.linalg.solve(s, a_i)
    quad = float(diff @ c_mat @ diff)
    return math.exp(-quad / hbar) / (math.pi * hbar * math.sqrt(np.linalg.det(s)))


def heteroclinic_overlap(state_f: GaussianState, state_i: GaussianState,
                         system: MapSystem, n: int, *,
                         support_sigmas: float = 10.0,
                         term_cutoff: float = 1e-300):
    """Overlap of a target Gaussian with the n-step image of another,
    decomposed into per-branch (per-excursion) Gaussian integrals.

    For the binary shift map the branches are exact affine pieces indexed by
    length-n symbol words; for smooth maps a single linearization about the
    centroid trajectory is used.  Returns (total, terms).
    """
    if state_f.hbar != state_i.hbar:
        raise ValueError("states must share hbar")
    hbar = state_f.hbar
    a_f = state_f.quadratic_form()
    mu_f = np.array([state_f.centroid.q, state_f.centroid.p])
    a_i = state_i.quadratic_form()
    mu_i = np.array([state_i.centroid.q, state_i.centroid.p])
    if n == 0:
        val = _gaussian_product_integral(mu_f, a_f, mu_i, a_i, hbar)
        return val, [OverlapTerm("identity", val)]
    if system.kind != "baker":
        mono, end = propagate_tangent(system, state_i.centroid, n)
        m = mono.entries
        # (delta_q, delta_p) block of the tangent map
        mt = np.array([[m[1, 1], m[1, 0]], [m[0, 1], m[0, 0]]])
        mt_inv = np.linalg.inv(mt)
        b_w = mt_inv.T @ a_i @ mt_inv
        mu_w = np.array([end.q, end.p])
        val = _gaussian_product_integral(mu_f, a_f, mu_w, b_w, hbar)
        return val, [OverlapTerm("linearized", val)]
    sigma_q = math.sqrt(state_i.covariance()[0, 0])
    reach = support_sigmas * sigma_q
    scale = 2.0 ** n
    d_mat = np.array([[scale, 0.0], [0.0, 1.0 / scale]])
    d_inv = np.array([[1.0 / scale, 0.0], [0.0, scale]])
    b_w = d_inv.T @ a_i @ d_inv
    terms = []
    total = 0.0
    stack = [(0, 0)]           # (prefix value, prefix length)
    while stack:
        val, length = stack.pop()
        width = 0.5 ** length
        lo = val * width
        hi = lo + width
        if mu_i[0] < lo - reach or mu_i[0] > hi + reach:
            continue
        if length < n:
            stack.append((val * 2, length + 1))
            stack.append((val * 2 + 1, length + 1))
            continue
        rev = int(format(val, f"0{n}b")[::-1], 2)
        shift = np.array([-float(val), rev / scale])
        mu_w = d_mat @ mu_i + shift
        term = _gaussian_product_integral(mu_f, a_f, mu_w, b_w, hbar)
        if term > term_cutoff:
            terms.append(OverlapTerm(format(val, f"0{n}b"), term))
            total += term
    terms.sort(key=lambda t: -t.value)
    return total, terms


def polyline_rows(segment: ManifoldSegment):
    """Rows (branch, side, generation, q, p, arclength) for CSV export."""
    return [(segment.branch, segment.side, int(g), float(q), float(p), float(s))
            for (q, p), g, s in zip(segment.points, segment.generation,
                                    segment.arclength)]
