"""Periodic-orbit search, censuses, actions, symmetry classes, uniformity sums.

Orbits are found by a damped Newton iteration on T^n(x) - x running over a
seed grid in parallel (numpy arrays), deduplicated by cyclic-shift distance,
closed under the chart symmetry group, and re-verified for map closure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import stadium
from .dynamics import MapSystem, PhasePoint, step
from .stability import StabilityClass, StabilityMatrix, classify

DEDUP_TOL = 1e-8
CLOSURE_TOL = 1e-10
MARGINAL_TRACE_TOL = 1e-6


def _chart_ranges(system: MapSystem):
    if system.kind == "stadium":
        P = stadium.perimeter(system.params["gamma"])
        return (0.0, P), (-1.0, 1.0), True, False
    if system.kind == "standard":
        wrap_p = system.chart == "torus"
        return (0.0, 1.0), (0.0, 1.0), True, wrap_p
    raise ValueError(f"no Newton chart for {system.kind!r}")


def _wrap_diff(a, span):
    return (a + 0.5 * span) % span - 0.5 * span


def _merge_close(q, p, decimals: int = 9):
    """Drop seeds identical to another after rounding (same Newton basin)."""
    _, idx = np.unique(np.stack([np.round(q, decimals), np.round(p, decimals)], axis=1),
                       axis=0, return_index=True)
    return q[idx], p[idx]


def _point_dist(system, q0, p0, q1, p1):
    (qlo, qhi), _, wrap_q, wrap_p = _chart_ranges(system)
    dq = q1 - q0
    if wrap_q:
        dq = _wrap_diff(dq, qhi - qlo)
    dp = p1 - p0
    if wrap_p:
        dp = _wrap_diff(dp, 1.0)
    return np.hypot(dq, dp)


@dataclass
class PeriodicOrbit:
    """A primitive periodic orbit; `points` holds one full cycle."""
    system: MapSystem
    period: int
    points: list[PhasePoint]
    action: float
    monodromy: StabilityMatrix
    stability: StabilityClass
    symmetry_class: str = ""
    multiplicity: int = 0
    itinerary: Optional[str] = None

    @property
    def q(self) -> np.ndarray:
        return np.array([pt.q for pt in self.points])

    @property
    def p(self) -> np.ndarray:
        return np.array([pt.p for pt in self.points])


@dataclass
class FixedPointCensus:
    system: MapSystem
    n: int
    orbits: list[PeriodicOrbit]
    excluded_marginal: int
    seeds_total: int
    seeds_converged: int
    extra: dict = field(default_factory=dict)

    def fixed_point_count(self) -> int:
        return sum(o.period for o in self.orbits if self.n % o.period == 0)


def _propagate_n(system, q, p, n):
    """n-step map with accumulated tangent matrix, vectorized."""
    M = np.zeros(q.shape + (2, 2))
    M[..., 0, 0] = 1.0
    M[..., 1, 1] = 1.0
    for _ in range(n):
        q, p, Mstep = step(system, q, p, with_jacobian=True)
        M = Mstep @ M
    return q, p, M


def newton_polish(system: MapSystem, n: int, q, p, iterations: int = 50,
                  tol: float = 1e-13, max_step: float = 0.25):
    """Damped Newton on T^n(x) - x for arrays of seeds.

    Converged seeds drop out of the working set, and seeds that have
    collapsed onto the same point (within 1e-9) are merged periodically, so
    large grids cost little more than the number of distinct basins.
    Returns (q, p, converged, M_n) with the monodromy of the final iterate;
    duplicates removed.
    """
    (qlo, qhi), (plo, phi), wrap_q, wrap_p = _chart_ranges(system)
    span_q = qhi - qlo
    qa = np.array(q, dtype=float).ravel()
    pa = np.array(p, dtype=float).ravel()
    done_q: list[np.ndarray] = []
    done_p: list[np.ndarray] = []
    eps_p = 1e-9
    for it in range(iterations):
        if qa.size == 0:
            break
        qn, pn, M = _propagate_n(system, qa, pa, n)
        fq = qn - qa
        if wrap_q:
            fq = _wrap_diff(fq, span_q)
        fp = pn - pa
        if wrap_p:
            fp = _wrap_diff(fp, 1.0)
        res = np.maximum(np.abs(fq), np.abs(fp))
        settled = res < tol
        if np.any(settled):
            done_q.append(qa[settled])
            done_p.append(pa[settled])
            keep = ~settled
            qa, pa, fq, fp, M = qa[keep], pa[keep], fq[keep], fp[keep], M[keep]
        if qa.size == 0:
            break
        J11 = M[:, 0, 0] - 1.0
        J12 = M[:, 0, 1]
        J21 = M[:, 1, 0]
        J22 = M[:, 1, 1] - 1.0
        det = J11 * J22 - J12 * J21
        ok = np.abs(det) > 1e-300
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        dp = -(J22 * fp - J12 * fq) * inv_det
        dq = -(-J21 * fp + J11 * fq) * inv_det
        norm = np.hypot(dp, dq)
        scale = np.where(norm > max_step, max_step / np.where(norm > 0, norm, 1.0), 1.0)
        qa = qa + dq * scale
        pa = pa + dp * scale
        if wrap_q:
            qa = np.mod(qa - qlo, span_q) + qlo
        else:
            qa = np.clip(qa, qlo, qhi)
        if wrap_p:
            pa = np.mod(pa, 1.0)
        else:
            pa = np.clip(pa, plo + eps_p, phi - eps_p)
        if it >= 6 and it % 4 == 2:
            qa, pa = _merge_close(qa, pa)
    done_q.append(qa)
    done_p.append(pa)
    q, p = _merge_close(np.concatenate(done_q), np.concatenate(done_p))
    qn, pn, M = _propagate_n(system, q, p, n)
    fq = qn - q
    if wrap_q:
        fq = _wrap_diff(fq, span_q)
    fp = pn - p
    if wrap_p:
        fp = _wrap_diff(fp, 1.0)
    converged = np.maximum(np.abs(fq), np.abs(fp)) < CLOSURE_TOL
    return q, p, converged, M


def _orbit_cycle(system, q0, p0, n):
    qs = np.empty(n)
    ps = np.empty(n)
    acts = np.empty(n)
    q = np.atleast_1d(q0)
    p = np.atleast_1d(p0)
    for i in range(n):
        qs[i], ps[i] = q[0], p[0]
        if system.kind == "stadium":
            q, p, chord = stadium.step(system.params["gamma"], q, p)
            acts[i] = chord[0]
        else:
            from .dynamics import step_action
            q1, p1 = step(system, q, p)
            acts[i] = float(step_action(system, q, p, q1, p1)[0])
            q, p = q1, p1
    return qs, ps, acts


def _primitive_period(system, qs, ps, n):
    for d in range(1, n):
        if n % d:
            continue
        if np.all(_point_dist(system, qs, ps, np.roll(qs, -d), np.roll(ps, -d)) < 1e-9):
            return d
    return n


def _canonical_shift(qs, ps):
    key = np.round(qs, 9) + 1e-5 * np.round(ps, 9)
    return int(np.argmin(key))


def orbits_equal(system, orb_a_qp, orb_b_qp, tol: float = DEDUP_TOL) -> bool:
    """Cyclic-shift match: min over shifts of the max pointwise distance."""
    qa, pa = orb_a_qp
    qb, pb = orb_b_qp
    if len(qa) != len(qb):
        return False
    d = len(qa)
    idx = (np.arange(d)[:, None] + np.arange(d)[None, :]) % d
    dist = _point_dist(system, np.asarray(qa)[None, :], np.asarray(pa)[None, :],
                       np.asarray(qb)[idx], np.asarray(pb)[idx])
    return bool(np.any(np.max(dist, axis=1) < tol))


def _build_orbit(system, q0, p0, n) -> Optional[PeriodicOrbit]:
    qs, ps, acts = _orbit_cycle(system, q0, p0, n)
    d = _primitive_period(system, qs, ps, n)
    qs, ps, acts = qs[:d], ps[:d], acts[:d]
    (qlo, qhi), _, wrap_q, _ = _chart_ranges(system)
    if wrap_q:
        # q just below the wrap point is the same boundary point as q = qlo;
        # snap so the canonical shift cannot depend on which side we landed.
        qs = np.mod(qs - qlo, qhi - qlo) + qlo
        qs = np.where(qs > qhi - 1e-9, qlo, qs)
    k = _canonical_shift(qs, ps)
    qs, ps, acts = np.roll(qs, -k), np.roll(ps, -k), np.roll(acts, -k)
    qn, pn, M = _propagate_n(system, np.atleast_1d(qs[0]), np.atleast_1d(ps[0]), d)
    if _point_dist(system, qs[0], ps[0], qn[0], pn[0]) > CLOSURE_TOL:
        return None
    mat = StabilityMatrix(M[0], float(d))
    pts = [PhasePoint(float(a), float(b)) for a, b in zip(qs, ps)]
    return PeriodicOrbit(system, d, pts, float(np.sum(acts)), mat, classify(mat))


class _OrbitPool:
    """Dedup structure: cyclic-shift comparison bucketed by invariants.

    Equal orbits share period, action, and trace, so candidates are compared
    only against pool members in the same (period, ~action, ~trace) bucket
    (with neighbour probing against rounding seams).
    """

    def __init__(self, system):
        self.system = system
        self.buckets: dict[tuple, list[PeriodicOrbit]] = {}

    @staticmethod
    def _key(orb):
        return (orb.period, round(orb.action * 1e5), round(orb.monodromy.trace * 1e2))

    def add(self, orb) -> bool:
        d, ka, kt = self._key(orb)
        for da in (-1, 0, 1):
            for dt in (-1, 0, 1):
                for other in self.buckets.get((d, ka + da, kt + dt), ()):
                    if orbits_equal(self.system, (orb.q, orb.p), (other.q, other.p)):
                        return False
        self.buckets.setdefault((d, ka, kt), []).append(orb)
        return True

    def all(self):
        return [o for lst in self.buckets.values() for o in lst]


def touches_joint(system: MapSystem, qs, tol: float = 1e-9) -> bool:
    """True when any bounce sits at an arc/edge joint of the stadium chart.

    The tangent map jumps across a joint (curvature is discontinuous), so the
    stability of such an orbit depends on the tie-break side; censuses keep
    them out of the hyperbolic tally by default.
    """
    if system.kind != "stadium":
        return False
    g = system.params["gamma"]
    P = stadium.perimeter(g)
    breaks = np.array(stadium.piece_breaks(g))
    d = np.abs(_wrap_diff(np.asarray(qs)[:, None] - breaks[None, :], P))
    return bool(np.any(d < tol))


def symmetry_classify(orbit: PeriodicOrbit) -> tuple[str, int]:
    """Stabilizer of a stadium orbit inside the eight-element chart group.

    Returns (class label, multiplicity); multiplicity = 8 / |stabilizer| is
    the number of distinct symmetry copies of the orbit.
    """
    system = orbit.system
    if system.kind != "stadium":
        return "", 1
    g = system.params["gamma"]
    qs, ps = orbit.q, orbit.p
    stab = []
    for name in stadium.SYMMETRY_NAMES:
        qi, pi = stadium.symmetry_image(g, name, qs, ps)
        if stadium.is_reversing(name):
            qi, pi = qi[::-1], pi[::-1]
            qi, pi = np.roll(qi, 1), np.roll(pi, 1)  # forward-time order
        if orbits_equal(system, (qs, ps), (qi, pi), tol=1e-7):
            stab.append(name)
    label = "+".join(s for s in stab if s != "identity") or "asymmetric"
    return label, 8 // max(len(stab), 1)


def default_seed_grid(system: MapSystem, nq: int = 400, npn: int = 400):
    (qlo, qhi), (plo, phi), _, wrap_p = _chart_ranges(system)
    eps = 0.0 if wrap_p else 1e-3
    qg = qlo + (qhi - qlo) * (np.arange(nq) + 0.5) / nq
    pg = plo + eps + (phi - plo - 2 * eps) * (np.arange(npn) + 0.5) / npn
    Q, P = np.meshgrid(qg, pg, indexing="ij")
    return Q.ravel(), P.ravel()


def find_periodic_orbits(system: MapSystem, n: int, seed_grid=None,
                         extra_seeds=None, symmetry_close: bool = True,
                         compute_symmetry: bool = True,
                         include_joint_orbits: bool = False) -> FixedPointCensus:
    """Census of fixed points of T^n (all primitive periods dividing n).

    Marginal (bouncing-ball) solutions with |Tr M - 2| below tolerance are
    counted and excluded, as are stadium orbits touching an arc/edge joint
    (their count is in `extra["excluded_joint"]`).  Stadium censuses are
    closed under the symmetry group: every image of a found orbit is
    polished and added.
    """
    if system.kind == "baker":
        raise ValueError("baker fixed points are enumerated symbolically")
    if seed_grid is None:
        sq, sp = default_seed_grid(system)
    else:
        sq, sp = seed_grid
    sq = np.asarray(sq, dtype=float).ravel()
    sp = np.asarray(sp, dtype=float).ravel()
    if extra_seeds is not None:
        eq, ep = extra_seeds
        sq = np.concatenate([sq, np.ravel(eq)])
        sp = np.concatenate([sp, np.ravel(ep)])
    seeds_total = sq.size

    q, p, conv, M = newton_polish(system, n, sq, sp)
    q, p, M = q[conv], p[conv], M[conv]
    seeds_converged = int(np.count_nonzero(conv))

    tr = M[:, 0, 0] + M[:, 1, 1]
    marginal = np.abs(tr - 2.0) < MARGINAL_TRACE_TOL
    excluded = int(np.count_nonzero(marginal))
    q, p = q[~marginal], p[~marginal]

    pool = _OrbitPool(system)
    joint_pool = _OrbitPool(system)
    for qi, pi in zip(q, p):
        orb = _build_orbit(system, qi, pi, n)
        if orb is None or abs(orb.monodromy.trace - 2.0) < MARGINAL_TRACE_TOL:
            continue
        if not include_joint_orbits and touches_joint(system, orb.q):
            joint_pool.add(orb)
            continue
        pool.add(orb)

    # Orbits of period d | n are fixed points of T^n too, but their Newton
    # basins shrink as n grows; census them at their own period explicitly.
    for d in range(1, n):
        if n % d or (d == 1 and system.kind == "stadium"):
            continue
        sub = find_periodic_orbits(system, d, seed_grid=(sq, sp),
                                   symmetry_close=symmetry_close,
                                   compute_symmetry=False,
                                   include_joint_orbits=include_joint_orbits)
        for orb in sub.orbits:
            pool.add(orb)

    if symmetry_close and system.kind == "stadium":
        g = system.params["gamma"]
        frontier = pool.all()
        for _round in range(3):
            seeds: dict[int, list[tuple[float, float]]] = {}
            for orb in frontier:
                d, ka, kt = _OrbitPool._key(orb)
                for name in stadium.SYMMETRY_NAMES[1:]:
                    qi, pi = stadium.symmetry_image(g, name, orb.q, orb.p)
                    if stadium.is_reversing(name):
                        qi, pi = np.roll(qi[::-1], 1), np.roll(pi[::-1], 1)
                    present = any(
                        orbits_equal(system, (qi, pi), (other.q, other.p))
                        for da in (-1, 0, 1) for dt in (-1, 0, 1)
                        for other in pool.buckets.get((d, ka + da, kt + dt), ()))
                    if not present:
                        seeds.setdefault(d, []).append((qi[0], pi[0]))
            if not seeds:
                break
            new = []
            for d, pts in seeds.items():
                arr = np.array(pts)
                qq, pp, c2, _ = newton_polish(system, d, arr[:, 0], arr[:, 1],
                                              iterations=8)
                for j in np.nonzero(c2)[0]:
                    img = _build_orbit(system, qq[j], pp[j], d)
                    if (img is not None and img.period == d
                            and not touches_joint(system, img.q)
                            and pool.add(img)):
                        new.append(img)
            if not new:
                break
            frontier = new

    orbits = pool.all()
    if compute_symmetry:
        for orb in orbits:
            orb.symmetry_class, orb.multiplicity = symmetry_classify(orb)
    orbits.sort(key=lambda o: (o.period, round(o.points[0].q, 9), round(o.points[0].p, 9)))
    return FixedPointCensus(system, n, orbits, excluded, seeds_total, seeds_converged,
                            extra={"excluded_joint": len(joint_pool.all())})


def orbit_action(orbit: PeriodicOrbit) -> float:
    """Action of one primitive traversal (total chord length for billiards)."""
    return orbit.action


def monodromy_power(mat: StabilityMatrix, r: int) -> StabilityMatrix:
    out = np.eye(2)
    for _ in range(r):
        out = mat.entries @ out
    return StabilityMatrix(out, mat.steps * r)


def uniformity_sum(census: FixedPointCensus, cells: tuple[int, int] = (1, 1)):
    """Fixed-point sums F_n(cell) = sum 1/|det(M_n - 1)| against cell volume.

    Returns a dict with per-cell sums, per-cell target volumes DeltaV/V, and
    the whole-space total.  Marginal orbits are excluded (their count comes
    with the census); near-parabolic dets below 1e-9 are skipped and counted.
    """
    system = census.system
    n = census.n
    (qlo, qhi), (plo, phi), _, _ = _chart_ranges(system)
    nq, npn = cells
    F = np.zeros((nq, npn))
    skipped = 0
    for orb in census.orbits:
        if n % orb.period:
            continue
        Mn = monodromy_power(orb.monodromy, n // orb.period)
        det = np.linalg.det(Mn.entries - np.eye(2))
        if abs(det) < 1e-9:
            skipped += orb.period
            continue
        w = 1.0 / abs(det)
        for pt in orb.points:
            i = min(int((pt.q - qlo) / (qhi - qlo) * nq), nq - 1)
            j = min(int((pt.p - plo) / (phi - plo) * npn), npn - 1)
            F[i, j] += w
    target = np.full((nq, npn), 1.0 / (nq * npn))
    return {"cell_sums": F, "cell_volumes": target, "total": float(F.sum()),
            "skipped_parabolic": skipped}


def stadium_itinerary(system: MapSystem, q0: float, p0: float, n: int) -> str:
    """Length-n symbol string for a stadium trajectory (see symbolic module)."""
    from .symbolic import stadium_itinerary_codes
    codes = stadium_itinerary_codes(system.params["gamma"],
                                    np.atleast_1d(q0), np.atleast_1d(p0), n)
    return codes[0]
