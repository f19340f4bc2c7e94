"""Response of the stadium dynamics to a change of the flat-segment length.

The half-length gamma of the straight segments is the deformation parameter:
each semicircular cap translates rigidly outward while the edges stretch, so
the boundary moves along its outward normal by |x| - gamma on the caps and
not at all on the edges (per unit change of gamma).  Everything here is
organised around that displacement field:

* first-order action response of a periodic orbit (each bounce lengthens its
  two adjacent chords by the normal displacement times the incidence cosine),
* parameter continuation of periodic orbits, done on the polygon of bounce
  positions rather than by shooting, because the chord-length gradient has no
  exponential sensitivity and survives close to bifurcations,
* diffusive accumulation of the per-bounce response along chaotic orbits,
* geometric comparison of invariant manifolds across the parameter change,
* the census of the period-6 orbit family created at gamma = 1, where the
  joint-touching figure-eight splits into one orbit per corner arc/edge
  resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from . import stadium
from .dynamics import MapSystem, TrajectorySegment, stadium_map, step
from .orbits import (PeriodicOrbit, _build_orbit, default_seed_grid,
                     find_periodic_orbits, newton_polish, stadium_itinerary)
from .symbolic import DEFAULT_AREA_FLOOR, SWEEP_AREA_FLOOR, stadium_partition
from .tangle import ManifoldSegment

DEFAULT_CONTINUATION_STEP = 0.01
MATCH_TOL = 0.35


class ContinuationError(RuntimeError):
    """Raised when no nearby orbit exists at the target parameter.

    Carries the parameter value at which the polygon solve or the itinerary
    check first failed; a failure close to the base value usually means the
    orbit is involved in a bifurcation.
    """

    def __init__(self, message: str, gamma: float):
        super().__init__(message)
        self.gamma = gamma


def _default_displacement(base_gamma: float, q) -> np.ndarray:
    x = stadium.boundary_frame(base_gamma, np.atleast_1d(q))[0]
    return np.maximum(np.abs(x) - base_gamma, 0.0)


@dataclass(frozen=True)
class PerturbationSpec:
    """A shift of the flat-segment half-length from base_gamma by delta.

    `field(q)` gives the outward-normal boundary displacement per unit delta
    at chart position q of the *base* boundary.  The default is the
    cap-translation field described in the module docstring; a custom field
    lets the same response formulas serve other boundary deformations.
    """

    base_gamma: float
    delta: float
    field: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.base_gamma <= 0:
            raise ValueError("base_gamma must be positive")

    @property
    def perturbed_gamma(self) -> float:
        return self.base_gamma + self.delta

    def displacement(self, q) -> np.ndarray:
        if self.field is not None:
            return np.asarray(self.field(np.atleast_1d(q)), dtype=float)
        return _default_displacement(self.base_gamma, q)


def first_order_action_change(orbit: PeriodicOrbit, spec: PerturbationSpec) -> float:
    """Leading-order change of the orbit action under the boundary shift.

    Evaluated on the *unperturbed* orbit: stationarity of the chord-length
    sum under vertex motion means only the explicit boundary displacement
    contributes, each bounce adding twice the normal displacement times the
    cosine of its incidence angle.
    """
    if orbit.system.kind != "stadium":
        raise ValueError("action response is defined for the stadium map")
    h = spec.displacement(orbit.q)
    cos_inc = np.sqrt(np.clip(1.0 - orbit.p ** 2, 0.0, None))
    return float(spec.delta * np.sum(2.0 * h * cos_inc))


# ---------------------------------------------------------------------------
# orbit continuation


def _transfer_chart(q: np.ndarray, g_old: float, g_new: float) -> np.ndarray:
    """Carry chart positions across a gamma change.

    Cap points ride along with the rigid cap translation; edge points keep
    their fractional position on the (stretched) edge.
    """
    x, y = stadium.boundary_frame(g_old, np.atleast_1d(q))[:2]
    on_cap = np.abs(x) > g_old - 1e-9
    xs = np.where(on_cap, x + (g_new - g_old) * np.sign(x), x * g_new / g_old)
    return stadium.chart_from_cartesian(g_new, xs, np.clip(y, -1.0, 1.0))


def _chord_gradient(q: np.ndarray, gamma: float) -> np.ndarray:
    """Gradient of the cyclic chord-length sum with respect to the vertices.

    A zero gradient is the reflection law at every bounce, so roots of this
    map are periodic billiard polygons.
    """
    x, y, tx, ty = stadium.boundary_frame(gamma, q)[:4]
    pts = np.column_stack([x, y])
    tan = np.column_stack([tx, ty])
    fwd = np.roll(pts, -1, axis=0) - pts
    fwd /= np.linalg.norm(fwd, axis=1, keepdims=True)
    bwd = pts - np.roll(pts, 1, axis=0)
    bwd /= np.linalg.norm(bwd, axis=1, keepdims=True)
    return np.einsum("ij,ij->i", tan, bwd - fwd)


def _safest_index(gamma: float, q: np.ndarray) -> int:
    """Index of the orbit point farthest from any chart joint.

    Newton steps seeded next to a joint straddle the curvature jump and
    stall, so single-point polishing always starts from this vertex.
    """
    breaks = np.concatenate([[0.0], stadium.piece_breaks(gamma)])
    per = stadium.perimeter(gamma)
    d = np.abs(q[:, None] - breaks[None, :])
    d = np.minimum(d, per - d)
    return int(d.min(axis=1).argmax())


def _polygon_to_orbit(sysg: MapSystem, q: np.ndarray) -> Optional[PeriodicOrbit]:
    """Recover the oriented phase-space orbit of a solved bounce polygon."""
    gamma = sysg.params["gamma"]
    x, y, tx, ty = stadium.boundary_frame(gamma, q)[:4]
    pts = np.column_stack([x, y])
    tan = np.column_stack([tx, ty])
    fwd = np.roll(pts, -1, axis=0) - pts
    fwd /= np.linalg.norm(fwd, axis=1, keepdims=True)
    ps = np.einsum("ij,ij->i", tan, fwd)
    k = _safest_index(gamma, q)
    qp, pp, conv, _ = newton_polish(sysg, len(q), [q[k]], [ps[k]])
    if qp.size == 0 or not conv.all():
        return None
    return _build_orbit(sysg, float(qp[0]), float(pp[0]), len(q))


def _cycle_tokens(orbit: PeriodicOrbit) -> tuple[str, ...]:
    word = stadium_itinerary(orbit.system, float(orbit.q[0]), float(orbit.p[0]),
                             orbit.period)
    return tuple(word.split()[: orbit.period])


def _cyclic_equal(a: Sequence[str], b: Sequence[str]) -> bool:
    return len(a) == len(b) and tuple(b) in {
        tuple(a[i:]) + tuple(a[:i]) for i in range(len(a))}


def continue_orbit(orbit: PeriodicOrbit, spec: PerturbationSpec, *,
                   max_step: float = DEFAULT_CONTINUATION_STEP) -> PeriodicOrbit:
    """Follow a periodic orbit from base_gamma to base_gamma + delta.

    The orbit's bounce polygon is carried across the boundary change in
    stages of at most `max_step` in gamma; at each stage the reflection law
    is re-solved on the vertex positions and the phase-space orbit is rebuilt
    at the end.  The itinerary must come back unchanged (up to cyclic shift);
    a solve failure or a changed itinerary raises ContinuationError, which is
    the usual signature of a bifurcation between the two parameter values.

    Marginal orbits (the bouncing-ball family) are translated directly: they
    persist as a continuum and need no polishing.
    """
    if orbit.system.kind != "stadium":
        raise ValueError("continuation is defined for the stadium map")
    g0 = orbit.system.params["gamma"]
    if not math.isclose(g0, spec.base_gamma, rel_tol=0, abs_tol=1e-12):
        raise ValueError("orbit lives at a different gamma than spec.base_gamma")
    if spec.delta == 0.0:
        return orbit
    g1 = spec.perturbed_gamma
    tokens0 = _cycle_tokens(orbit)

    if orbit.stability.kind == "parabolic":
        sysn = stadium_map(g1)
        qt = _transfer_chart(orbit.q, g0, g1)
        rebuilt = _build_orbit(sysn, float(qt[0]), float(orbit.p[0]), orbit.period)
        if rebuilt is None:
            raise ContinuationError("marginal orbit did not close after the "
                                    "boundary change", g1)
    else:
        stages = max(1, math.ceil(abs(spec.delta) / max_step))
        g_cur, q_cur = g0, orbit.q.copy()
        for i in range(1, stages + 1):
            g_next = g0 + spec.delta * i / stages
            q_try = _transfer_chart(q_cur, g_cur, g_next)
            sol = optimize.root(_chord_gradient, q_try, args=(g_next,),
                                method="hybr", tol=1e-13)
            if not sol.success or np.max(np.abs(sol.fun)) > 1e-10:
                raise ContinuationError(
                    f"no nearby bounce polygon at gamma={g_next:.6g}; "
                    "suspected bifurcation", g_next)
            g_cur, q_cur = g_next, np.asarray(sol.x)
        rebuilt = _polygon_to_orbit(stadium_map(g1), q_cur)
        if rebuilt is None or rebuilt.period != orbit.period:
            raise ContinuationError(
                f"bounce polygon at gamma={g1:.6g} is not a period-"
                f"{orbit.period} orbit; suspected bifurcation", g1)

    if not _cyclic_equal(tokens0, _cycle_tokens(rebuilt)):
        raise ContinuationError(
            f"itinerary changed across gamma={g0:.6g} -> {g1:.6g}; "
            "suspected bifurcation", g1)
    return rebuilt


# ---------------------------------------------------------------------------
# diffusive accumulation of the response along chaotic orbits


@dataclass
class DiffusionResult:
    """Ensemble variance of the accumulated action response, with linear fit.

    `slope` is the diffusion coefficient estimate (variance growth per
    bounce) fitted over `fit_window`; `slope_ci` is the nominal 95% OLS
    half-width.  The ensemble-mean curve is kept alongside: `drift_rate` is
    its fitted per-bounce rate, and `drift_endpoint_residual` measures how
    far the final mean strays from that line, in units comparable to
    `drift_se` (the standard error of the final mean).
    """

    gamma: float
    delta: float
    times: np.ndarray
    variance: np.ndarray
    mean_curve: np.ndarray
    slope: float
    intercept: float
    slope_ci: float
    r_squared: float
    drift_rate: float
    drift_endpoint_residual: float
    drift_se: float
    ensemble: int
    seed: int

    def rows(self):
        for t, v in zip(self.times, self.variance):
            yield (int(t), float(v), self.slope, self.slope_ci)


def _chaotic_seeds(sysg: MapSystem, count: int, rng, transient: int):
    """Uniform chart samples that leave the flat-segment band promptly.

    Orbits of the bouncing-ball family (and its slow neighbourhood) never
    reach the caps, accumulate nothing, and would sit as a frozen spike in
    the ensemble, so any seed whose first `transient` bounces all land on
    the edges is rejected.
    """
    gamma = sysg.params["gamma"]
    per = stadium.perimeter(gamma)
    breaks = stadium.piece_breaks(gamma)
    q_keep = np.empty(0)
    p_keep = np.empty(0)
    while q_keep.size < count:
        m = max(2 * (count - q_keep.size), 1024)
        q0 = rng.uniform(0.0, per, size=m)
        p0 = rng.uniform(-1.0, 1.0, size=m)
        q, p = q0.copy(), p0.copy()
        on_edge_always = _on_edge(q, breaks)
        for _ in range(transient):
            q, p = step(sysg, q, p)
            on_edge_always &= _on_edge(q, breaks)
        q_keep = np.concatenate([q_keep, q0[~on_edge_always]])
        p_keep = np.concatenate([p_keep, p0[~on_edge_always]])
    return q_keep[:count], p_keep[:count]


def _on_edge(q: np.ndarray, breaks) -> np.ndarray:
    b1, b2, b3 = breaks[0], breaks[1], breaks[2]
    b4 = breaks[3]
    return ((q > b1) & (q < b2)) | ((q > b3) & (q < b4))


def action_diffusion(spec: PerturbationSpec, *, ensemble: int = 10_000,
                     t_max: int = 200, fit_window: tuple = (10, 200),
                     transient_reject: int = 25, seed: int = 0) -> DiffusionResult:
    """Variance growth of the accumulated per-bounce action response.

    Along a chaotic orbit the per-bounce response increments decorrelate, so
    their running sum spreads diffusively across an ensemble; the fitted
    slope of variance against bounce count is the diffusion coefficient for
    this delta (it scales as delta squared, since every increment is linear
    in delta).
    """
    sysg = stadium_map(spec.base_gamma)
    rng = np.random.default_rng(seed)
    q, p = _chaotic_seeds(sysg, ensemble, rng, transient_reject)
    s = np.zeros(ensemble)
    times = np.arange(1, t_max + 1)
    variance = np.empty(t_max)
    mean_curve = np.empty(t_max)
    for k in range(t_max):
        q, p = step(sysg, q, p)
        h = spec.displacement(q)
        s += spec.delta * 2.0 * h * np.sqrt(np.clip(1.0 - p ** 2, 0.0, None))
        variance[k] = float(np.var(s))
        mean_curve[k] = float(np.mean(s))

    lo, hi = fit_window
    mask = (times >= lo) & (times <= hi)
    t_fit = times[mask].astype(float)
    v_fit = variance[mask]
    slope, intercept = np.polyfit(t_fit, v_fit, 1)
    resid = v_fit - (slope * t_fit + intercept)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((v_fit - v_fit.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = max(t_fit.size - 2, 1)
    se_slope = math.sqrt(ss_res / dof / float(np.sum((t_fit - t_fit.mean()) ** 2)))

    r_drift, c_drift = np.polyfit(t_fit, mean_curve[mask], 1)
    residual = float(mean_curve[-1] - (r_drift * t_max + c_drift))
    drift_se = float(np.std(s, ddof=1) / math.sqrt(ensemble))
    return DiffusionResult(spec.base_gamma, spec.delta, times, variance,
                           mean_curve, float(slope), float(intercept),
                           1.96 * se_slope, r_squared, float(r_drift),
                           residual, drift_se, ensemble, seed)


# ---------------------------------------------------------------------------
# manifold geometry across the parameter change


@dataclass(frozen=True)
class ManifoldComparison:
    """Geometric manifold displacement next to pointwise orbit separation.

    `manifold_distance` is the one-sided Hausdorff distance from the
    perturbed manifold portion to the base one over equal arclength, after
    the perturbed chart is identified with the base chart (caps matched
    rigidly, edges by fractional position -- the same identification the
    continuation uses); `separation` is the per-bounce phase-space distance
    of the supplied trajectory pair.  A small manifold distance under a
    large trajectory separation is the geometric footprint of structural
    stability.
    """

    manifold_distance: float
    separation: np.ndarray
    ratio: float


def _chart_polyline(segment: ManifoldSegment, length: float,
                    target_gamma: float) -> np.ndarray:
    pts = segment.slice_between(0.0, length)
    gamma = segment.orbit.system.params["gamma"]
    if gamma == target_gamma:
        return pts
    q = _transfer_chart(pts[:, 0], gamma, target_gamma)
    return np.column_stack([q, pts[:, 1]])


def _min_dist_to_polyline(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a, b = poly[:-1], poly[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom == 0.0, 1.0, denom)
    out = np.empty(len(pts))
    block = 256
    for i in range(0, len(pts), block):
        chunk = pts[i:i + block]
        diff = chunk[:, None, :] - a[None, :, :]
        tpar = np.clip(np.einsum("kij,ij->ki", diff, ab) / denom, 0.0, 1.0)
        proj = a[None, :, :] + tpar[..., None] * ab[None, :, :]
        d = np.linalg.norm(chunk[:, None, :] - proj, axis=-1)
        out[i:i + block] = d.min(axis=1)
    return out


def manifold_stability_metric(base_segment: ManifoldSegment,
                              pert_segment: ManifoldSegment,
                              base_traj: TrajectorySegment,
                              pert_traj: TrajectorySegment) -> ManifoldComparison:
    """Compare manifold geometry and trajectory separation across a shift.

    Equal-arclength portions of the two manifold branches are compared by
    the one-sided Hausdorff distance (perturbed against base) after carrying
    the perturbed branch into the base chart, so the two boundary
    parameterizations agree piece by piece despite different perimeters.
    The trajectory pair is compared bounce by bounce in chart coordinates,
    the position difference wrapped by the base perimeter.  `ratio` is max
    separation over manifold distance (zero when both vanish).
    """
    base_gamma = base_segment.orbit.system.params["gamma"]
    length = min(base_segment.total_arclength(), pert_segment.total_arclength())
    base_poly = _chart_polyline(base_segment, length, base_gamma)
    pert_poly = _chart_polyline(pert_segment, length, base_gamma)
    manifold_distance = float(_min_dist_to_polyline(pert_poly, base_poly).max())

    per = stadium.perimeter(base_traj.system.params["gamma"])
    dq = base_traj.q - pert_traj.q
    dq = (dq + per / 2.0) % per - per / 2.0
    separation = np.hypot(dq, base_traj.p - pert_traj.p)

    top = float(separation.max())
    if manifold_distance == 0.0:
        ratio = 0.0 if top == 0.0 else math.inf
    else:
        ratio = top / manifold_distance
    return ManifoldComparison(manifold_distance, separation, ratio)


# ---------------------------------------------------------------------------
# the orbit family created at gamma = 1


def diamond_template(gamma: float) -> np.ndarray:
    """Vertices of the figure-eight polygon: both apexes, all four corners."""
    return np.array([[gamma + 1.0, 0.0], [-gamma - 1.0, 0.0],
                     [gamma, 1.0], [gamma, -1.0],
                     [-gamma, 1.0], [-gamma, -1.0]])


def family_members(census, gamma: float, *, tol: float = MATCH_TOL):
    """Census orbits tracking the figure-eight: one bounce per template vertex."""
    tmpl = diamond_template(gamma)
    out = []
    for orb in census.orbits:
        if orb.period != len(tmpl):
            continue
        x, y = stadium.boundary_frame(gamma, orb.q)[:2]
        pts = np.column_stack([x, y])
        d = np.linalg.norm(pts[:, None, :] - tmpl[None, :, :], axis=2)
        nearest = d.argmin(axis=1)
        if d.min(axis=1).max() < tol and sorted(nearest) == list(range(len(tmpl))):
            out.append(orb)
    return out


def _distinct_point_sets(orbits) -> int:
    """Count orbits up to momentum reversal (identical bounce-point sets)."""
    reps: list[np.ndarray] = []
    for orb in orbits:
        qs = np.sort(orb.q)
        for r in reps:
            if r.size == qs.size and float(np.max(np.abs(r - qs))) < 1e-6:
                break
        else:
            reps.append(qs)
    return len(reps)


@dataclass(frozen=True)
class BifurcationRow:
    gamma: float
    family_count: int
    new_cell_count: int


def bifurcation_census(gammas: Sequence[float], *, period: int = 6,
                       depth: int = 3, grid: int = 250,
                       census_getter: Optional[Callable] = None,
                       partition_getter: Optional[Callable] = None
                       ) -> list[BifurcationRow]:
    """Family membership and fresh partition cells across a gamma sweep.

    For each gamma, `family_count` is the number of figure-eight family
    orbits counted up to momentum reversal (each geometric orbit appears in
    the census once per direction of travel), and `new_cell_count` is the
    number of depth-`depth` itinerary cells lying in the fine-floor band
    below the default area floor -- the band is empty until the family is
    created and acquires one cell per member afterwards.

    The getters allow reuse of precomputed censuses and partitions; their
    call signatures are (period, gamma) and (gamma, depth).
    """
    if census_getter is None:
        def census_getter(n, g):
            sysg = stadium_map(g)
            return find_periodic_orbits(
                sysg, n, seed_grid=default_seed_grid(sysg, grid, grid))
    if partition_getter is None:
        def partition_getter(g, n):
            return stadium_partition(g, n, area_floor=SWEEP_AREA_FLOOR)

    rows = []
    for g in gammas:
        members = family_members(census_getter(period, g), g)
        part = partition_getter(g, depth)
        fresh = sum(1 for c in part.cells if c.area < DEFAULT_AREA_FLOOR)
        rows.append(BifurcationRow(float(g), _distinct_point_sets(members), fresh))
    return rows
