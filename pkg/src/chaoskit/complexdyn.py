"""Analytic continuation of the smooth flows to complex phase space and time.

Hamilton's equations for the polynomial potentials extend verbatim to complex
position, momentum, and time; integration proceeds along piecewise-linear
paths in the complex time plane.  New phenomena relative to real dynamics are
handled explicitly: trajectories can run off to infinity at finite time
(escape, detected by a radius crossing) or approach the finite-time
singularity itself so closely that the integrator's step collapses (reported
as branch-cut proximity, distinct from escape).

On top of the integrator sit the standard semiclassical constructions: the
linear-ramp benchmark whose exact solution is the Airy function, Gaussian
Lagrangian manifolds and their propagated contour fields, Newton search for
complex trajectories meeting two-sided Gaussian boundary conditions, and
continuous phase tracking of the stability-matrix determinants with the
sign-flip correction for zeros migrating across the real time axis.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate as _sciint
from scipy.integrate import DOP853
from scipy.optimize import brentq
from scipy.special import beta as _beta

from .dynamics import (MapSystem, hamilton_hessian, hamilton_rhs,
                       hamiltonian, linear_ramp)
from .tangle import GaussianState

ESCAPE_RADIUS = 1e6
MIN_STEP = 1e-14


@dataclass(frozen=True)
class ComplexPhasePoint:
    """A point of the complexified phase plane."""

    q: complex
    p: complex

    def __post_init__(self):
        object.__setattr__(self, "q", complex(self.q))
        object.__setattr__(self, "p", complex(self.p))
        if not (cmath.isfinite(self.q) and cmath.isfinite(self.p)):
            raise ValueError("phase-space components must be finite")


@dataclass(frozen=True)
class TimePath:
    """Piecewise-linear path in the complex time plane, starting at 0."""

    waypoints: tuple

    def __post_init__(self):
        pts = tuple(complex(w) for w in self.waypoints)
        if len(pts) < 2:
            raise ValueError("a path needs at least two waypoints")
        if pts[0] != 0:
            raise ValueError("paths start at time 0")
        if any(a == b for a, b in zip(pts, pts[1:])):
            raise ValueError("consecutive waypoints must differ")
        object.__setattr__(self, "waypoints", pts)

    @classmethod
    def straight(cls, t_final: complex) -> "TimePath":
        return cls((0.0, t_final))

    @classmethod
    def via(cls, *waypoints: complex) -> "TimePath":
        return cls((0.0,) + tuple(waypoints))

    @property
    def t_final(self) -> complex:
        return self.waypoints[-1]

    def segments(self):
        return list(zip(self.waypoints[:-1], self.waypoints[1:]))

    def arc_length(self) -> float:
        return float(sum(abs(b - a) for a, b in self.segments()))


@dataclass
class ComplexTrajectory:
    """Sampled analytic continuation along a time path.

    `times` holds the complex time of each sample; `sigma` the cumulative
    real path parameter (equal to time on a straight real path), which is
    the natural abscissa for phase tracking.  `monodromy` carries the
    complexified tangent matrix in (delta_p, delta_q) ordering, matching the
    real-map stability convention.  `escaped`/`branch_cut` record how the
    integration ended; on either, the samples cover the surviving portion.
    """

    system: MapSystem
    z0: ComplexPhasePoint
    path: TimePath
    times: np.ndarray
    sigma: np.ndarray
    q: np.ndarray
    p: np.ndarray
    action: np.ndarray
    monodromy: np.ndarray
    escaped: bool
    escape_time: Optional[complex]
    branch_cut: bool
    samples: int
    escape_radius: float
    min_step: float
    rtol: float = 1e-12
    atol: float = 1e-12

    @property
    def status(self) -> str:
        if self.branch_cut:
            return "branch-cut"
        return "escaped" if self.escaped else "completed"

    @property
    def final(self) -> ComplexPhasePoint:
        return ComplexPhasePoint(complex(self.q[-1]), complex(self.p[-1]))

    @property
    def action_final(self) -> complex:
        return complex(self.action[-1])

    def energy_drift(self) -> float:
        H = hamiltonian(self.system, self.q, self.p)
        return float(np.max(np.abs(H - H[0])))

    def resample(self, samples: int) -> "ComplexTrajectory":
        return complex_integrate(self.system, self.z0, self.path,
                                 samples=samples,
                                 escape_radius=self.escape_radius,
                                 min_step=self.min_step,
                                 rtol=self.rtol, atol=self.atol)


def _variational_matrix(system: MapSystem, q, p) -> np.ndarray:
    """Time derivative generator of (delta_p, delta_q) along a trajectory."""
    h_qq, h_qp, h_pp = hamilton_hessian(system, q, p)
    return np.array([[-h_qp, -h_qq], [h_pp, h_qp]], dtype=complex)


def _pack(q, p, s, m):
    vec = np.empty(14)
    for k, z in enumerate((q, p, s)):
        vec[2 * k], vec[2 * k + 1] = z.real, z.imag
    vec[6:10] = np.asarray(m, dtype=complex).real.ravel()
    vec[10:14] = np.asarray(m, dtype=complex).imag.ravel()
    return vec


def _unpack(vec):
    q = vec[0] + 1j * vec[1]
    p = vec[2] + 1j * vec[3]
    s = vec[4] + 1j * vec[5]
    m = (vec[6:10] + 1j * vec[10:14]).reshape(2, 2)
    return q, p, s, m


def complex_integrate(system: MapSystem, z0: ComplexPhasePoint, path: TimePath,
                      *, samples: int = 200, escape_radius: float = ESCAPE_RADIUS,
                      min_step: float = MIN_STEP, rtol: float = 1e-12,
                      atol: float = 1e-12) -> ComplexTrajectory:
    """Integrate Hamilton's equations along a complex time path.

    The accumulated action is the complex line integral of p dq - H dt, and
    the variational equations run alongside so the trajectory carries its
    complex stability matrix.  Escape past `escape_radius` in |q| terminates
    the run with the (complex) escape time; an integrator step collapse
    before the radius is reached flags branch-cut proximity instead.
    """
    if not system.is_flow:
        raise ValueError("complex integration applies to smooth flows")
    if not isinstance(z0, ComplexPhasePoint):
        z0 = ComplexPhasePoint(*z0)

    ts: list[complex] = [0.0]
    sig: list[float] = [0.0]
    qs: list[complex] = [z0.q]
    ps: list[complex] = [z0.p]
    acts: list[complex] = [0.0]
    mons: list[np.ndarray] = [np.eye(2, dtype=complex)]
    escaped = abs(z0.q) >= escape_radius
    branch_cut = False
    escape_time: Optional[complex] = 0.0 if escaped else None

    def record(s_local, col, wa, dt, sigma0):
        q, p, act, m = _unpack(col)
        ts.append(wa + s_local * dt)
        sig.append(sigma0 + s_local * abs(dt))
        qs.append(q)
        ps.append(p)
        acts.append(act)
        mons.append(m)

    state = _pack(z0.q, z0.p, 0.0, np.eye(2))
    sigma0 = 0.0
    for wa, wb in path.segments():
        if escaped or branch_cut:
            break
        dt = wb - wa

        def rhs(s, y, dt=dt):
            q, p, _, m = _unpack(y)
            dq, dp = hamilton_rhs(system, q, p)
            lag = p * dq - hamiltonian(system, q, p)
            dm = _variational_matrix(system, q, p) @ m
            return _pack(dt * dq, dt * dp, dt * lag, dt * dm)

        def radius_excess(y):
            return math.hypot(y[0], y[1]) - escape_radius

        stepper = DOP853(rhs, 0.0, state, 1.0, rtol=rtol, atol=atol)
        targets = np.linspace(0.0, 1.0, samples + 1)[1:]
        j = 0
        while stepper.status == "running":
            stepper.step()
            if stepper.status == "failed":
                branch_cut = True
                break
            if (stepper.status == "running"
                    and stepper.h_abs * abs(dt) < min_step):
                # the adaptive step collapsed before any radius crossing:
                # the path ran into (or hugs) a finite-time singularity
                branch_cut = True
                break
            dense = stepper.dense_output()
            if radius_excess(stepper.y) >= 0.0:
                s_esc = brentq(lambda s: radius_excess(dense(s)),
                               dense.t_old, stepper.t, xtol=1e-15)
                while j < targets.size and targets[j] < s_esc:
                    record(targets[j], dense(targets[j]), wa, dt, sigma0)
                    j += 1
                record(s_esc, dense(s_esc), wa, dt, sigma0)
                escaped = True
                escape_time = wa + s_esc * dt
                break
            while j < targets.size and targets[j] <= stepper.t + 1e-15:
                record(targets[j], dense(targets[j]), wa, dt, sigma0)
                j += 1
        if not (escaped or branch_cut):
            state = stepper.y
            sigma0 += abs(dt)

    return ComplexTrajectory(system, z0, path, np.array(ts, dtype=complex),
                             np.array(sig), np.array(qs, dtype=complex),
                             np.array(ps, dtype=complex),
                             np.array(acts, dtype=complex),
                             np.array(mons), escaped, escape_time, branch_cut,
                             samples, escape_radius, min_step, rtol, atol)


def quartic_period(energy: float = 1.0, m: float = 1.0,
                   alpha: float = 1.0) -> float:
    """Oscillation period of H = p^2/2m + alpha q^4 at the given energy.

    The turning-point integral reduces to a beta function:
    T = (E/alpha)^{1/4} sqrt(m/2E) B(1/4, 1/2).
    """
    if energy <= 0:
        raise ValueError("the quartic well oscillates only at positive energy")
    q_max = (energy / alpha) ** 0.25
    return q_max * math.sqrt(m / (2.0 * energy)) * _beta(0.25, 0.5)


# ---------------------------------------------------------------------------
# linear-ramp benchmark


def airy_exclusion_halfwidth(hbar: float = 1.0) -> float:
    """|q| below which the turning-point area falls under one quantum."""
    return (1.5 * hbar) ** (2.0 / 3.0)


def airy_wkb(q: float, *, hbar: float = 1.0) -> float:
    """Semiclassical wavefunction of the linear ramp at energy zero.

    The ramp H = p^2 + q quantizes to the Airy equation, so this is the
    primitive two-branch WKB form built from the E = 0 trajectory: on the
    allowed side the two momentum branches interfere with a quarter-wave
    phase offset each; on the forbidden side only the decaying branch is
    kept (the subdominant growing one is dropped).  Positions whose
    turning-point action is below hbar are rejected: there the two branches
    are not separable and the form is meaningless.
    """
    system = linear_ramp()
    m = system.params["m"]
    alpha = system.params["alpha"]
    if abs(q) <= airy_exclusion_halfwidth(hbar):
        raise ValueError("position lies in the turning-point exclusion zone")

    def momentum_mag(x):
        return math.sqrt(2.0 * m * alpha * abs(x))

    action, _ = _sciint.quad(momentum_mag, 0.0, abs(q))
    amp = 1.0 / math.sqrt(momentum_mag(q))
    if q < 0.0:
        # both real branches, +/- pi/4 from the turning point each
        half = 0.5 * amp * cmath.exp(1j * (action / hbar - math.pi / 4.0))
        return float((half + half.conjugate()).real / math.sqrt(math.pi))
    return amp * math.exp(-action / hbar) / (2.0 * math.sqrt(math.pi))


# ---------------------------------------------------------------------------
# Gaussian Lagrangian manifolds


def lagrangian_manifold_point(state: GaussianState,
                              parameter: complex) -> ComplexPhasePoint:
    """Point of the state's Lagrangian manifold at position parameter Q.

    The manifold is the solution set of b (Q - q1) + i (P - p1) = 0, the
    complex plane through the centroid on which the Gaussian's exponent is
    stationary; it is parameterized by the complex position Q.
    """
    Q = complex(parameter)
    P = state.centroid.p + 1j * state.b * (Q - state.centroid.q)
    return ComplexPhasePoint(Q, P)


@dataclass
class ContourField:
    """Propagated manifold samples over a grid of position parameters."""

    state: GaussianState
    system: MapSystem
    t_final: float
    parameter: np.ndarray     # complex grid of manifold parameters
    q_final: np.ndarray       # complex endpoint positions (nan when lost)
    escaped: np.ndarray       # bool
    branch_cut: np.ndarray    # bool
    escape_time: np.ndarray   # complex; nan when the trajectory survived

    def rows(self):
        for idx in np.ndindex(self.parameter.shape):
            par = self.parameter[idx]
            qf = self.q_final[idx]
            et = self.escape_time[idx]
            yield (par.real, par.imag, qf.real, qf.imag,
                   int(self.escaped[idx] or self.branch_cut[idx]),
                   et.real if self.escaped[idx] else math.nan)


def contour_map(state: GaussianState, system: MapSystem, t_final: float,
                parameters: np.ndarray, *, samples: int = 60,
                escape_radius: float = ESCAPE_RADIUS) -> ContourField:
    """Propagate the manifold over a parameter grid and record endpoints.

    Each grid value is a manifold position parameter; its phase point is
    integrated for the full (real) time and the final complex position is
    recorded, together with per-point escape/branch-cut flags.  Escapes are
    data here, not errors: the blank bands they form are the branch-cut
    structure of the propagated manifold.
    """
    parameters = np.asarray(parameters, dtype=complex)
    path = TimePath.straight(t_final)
    q_final = np.full(parameters.shape, np.nan, dtype=complex)
    escaped = np.zeros(parameters.shape, dtype=bool)
    branch_cut = np.zeros(parameters.shape, dtype=bool)
    escape_time = np.full(parameters.shape, np.nan, dtype=complex)
    for idx in np.ndindex(parameters.shape):
        z0 = lagrangian_manifold_point(state, parameters[idx])
        traj = complex_integrate(system, z0, path, samples=samples,
                                 escape_radius=escape_radius)
        escaped[idx] = traj.escaped
        branch_cut[idx] = traj.branch_cut
        if traj.escaped:
            escape_time[idx] = traj.escape_time
        elif not traj.branch_cut:
            q_final[idx] = traj.q[-1]
    return ContourField(state, system, float(t_final), parameters, q_final,
                        escaped, branch_cut, escape_time)


# ---------------------------------------------------------------------------
# two-point boundary problem


class SaddleSearchError(RuntimeError):
    """Newton iteration failed: divergence, escape, or no convergence."""


@dataclass
class SaddleResult:
    trajectory: ComplexTrajectory
    initial: ComplexPhasePoint
    residuals: tuple
    iterations: int


def _boundary_residuals(state1: GaussianState, state2: GaussianState,
                        traj: ComplexTrajectory):
    z0 = traj.z0
    r1 = state1.b * (z0.q - state1.centroid.q) + 1j * (z0.p - state1.centroid.p)
    qt, pt = complex(traj.q[-1]), complex(traj.p[-1])
    b2c = state2.b.conjugate()
    r2 = b2c * (qt - state2.centroid.q) - 1j * (pt - state2.centroid.p)
    return r1, r2


def saddle_search(state1: GaussianState, state2: GaussianState,
                  system: MapSystem, t_final: float, seed, *,
                  tol: float = 1e-10, max_iter: int = 50) -> SaddleResult:
    """Newton solve of the two-sided Gaussian boundary conditions.

    The initial point must lie on state1's manifold and the propagated
    endpoint on state2's conjugate manifold; both residuals are driven below
    `tol` starting from a real seed trajectory (its initial condition), with
    the complex stability matrix supplying the exact Jacobian.  No global
    search is attempted: the seed carries the branch choice.
    """
    if hasattr(seed, "q") and hasattr(seed, "p") and np.ndim(seed.q) > 0:
        z = complex(seed.q[0]) + 0j, complex(seed.p[0]) + 0j
    else:
        z = complex(seed.q), complex(seed.p)
    zq, zp = z
    path = TimePath.straight(t_final)
    b1 = state1.b
    b2c = state2.b.conjugate()
    traj = None
    for iteration in range(1, max_iter + 1):
        traj = complex_integrate(system, ComplexPhasePoint(zq, zp), path)
        if traj.status != "completed":
            raise SaddleSearchError(
                f"iteration {iteration}: trajectory {traj.status}")
        r1, r2 = _boundary_residuals(state1, state2, traj)
        if max(abs(r1), abs(r2)) < tol:
            return SaddleResult(traj, traj.z0, (r1, r2), iteration)
        m = traj.monodromy[-1]
        # (delta_p, delta_q) ordering: rows of the Jacobian in (dq0, dp0)
        jac = np.array([[b1, 1j],
                        [b2c * m[1, 1] - 1j * m[0, 1],
                         b2c * m[1, 0] - 1j * m[0, 0]]], dtype=complex)
        try:
            dq0, dp0 = np.linalg.solve(jac, [-r1, -r2])
        except np.linalg.LinAlgError as err:
            raise SaddleSearchError(f"singular boundary Jacobian: {err}")
        if not (cmath.isfinite(dq0) and cmath.isfinite(dp0)):
            raise SaddleSearchError("Newton update diverged")
        zq, zp = zq + dq0, zp + dp0
    raise SaddleSearchError(f"no convergence in {max_iter} iterations; "
                            f"last residuals {abs(r1):.2e}, {abs(r2):.2e}")


# ---------------------------------------------------------------------------
# determinant phase tracking


class PhaseTrackingError(RuntimeError):
    """An unresolvable phase jump: the determinant hits zero at a real time."""

    def __init__(self, message: str, time: float, reason: str = "jump"):
        super().__init__(message)
        self.time = time
        self.reason = reason


DETERMINANT_KINDS = ("D0", "D1", "D2")


def determinant_values(monodromy: np.ndarray, kind: str,
                       b: tuple = (1.0 + 0j, 1.0 + 0j)) -> np.ndarray:
    """Semiclassical prefactor determinants from (delta_p, delta_q) matrices.

    D0 is the position-position sensitivity (Green function), D1 mixes in
    one Gaussian shape parameter (wave-packet propagation), D2 both
    (transport coefficients).
    """
    m = np.asarray(monodromy, dtype=complex)
    b1, b2 = complex(b[0]), complex(b[1])
    m_pp, m_pq = m[..., 0, 0], m[..., 0, 1]
    m_qp, m_qq = m[..., 1, 0], m[..., 1, 1]
    if kind == "D0":
        return m_qp
    if kind == "D1":
        return m_qq + 1j * b1 * m_qp
    if kind == "D2":
        return m_pp * b1 + b2.conjugate() * m_qq + 1j * (
            b2.conjugate() * m_qp * b1 - m_pq)
    raise ValueError(f"unknown determinant kind {kind!r}")


@dataclass
class PhaseTracker:
    """Continuously tracked phase of one determinant along a trajectory."""

    kind: str
    times: np.ndarray
    values: np.ndarray
    phase: np.ndarray
    winding: int
    sign_flip_corrections: int = 0

    @classmethod
    def from_samples(cls, kind: str, times, values,
                     sign_flip_corrections: int = 0) -> "PhaseTracker":
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=complex)
        if np.any(values == 0):
            k = int(np.argmax(values == 0))
            raise PhaseTrackingError("determinant vanishes at a sampled time",
                                     float(times[k]), reason="zero")
        raw = np.angle(values)
        jumps = np.diff(raw)
        jumps = (jumps + np.pi) % (2.0 * np.pi) - np.pi
        if raw.size > 1 and float(np.max(np.abs(jumps))) >= 0.5 * np.pi:
            k = int(np.argmax(np.abs(jumps)))
            raise PhaseTrackingError(
                "phase jump at or beyond a quarter turn; sample more densely "
                "or the determinant passes through zero", float(times[k + 1]))
        phase = np.concatenate([[raw[0]], raw[0] + np.cumsum(jumps)])
        total = float(phase[-1] - phase[0])
        winding = int(math.floor(round(total / (2.0 * math.pi), 9)))
        return cls(kind, times, values, phase, winding, sign_flip_corrections)

    @property
    def total_phase(self) -> float:
        return float(self.phase[-1] - self.phase[0])

    @property
    def half_phase(self) -> float:
        return 0.5 * self.total_phase


def track_determinant(trajectory: ComplexTrajectory, kind: str,
                      b: tuple = (1.0 + 0j, 1.0 + 0j), *,
                      max_refinements: int = 10) -> PhaseTracker:
    """Phase-track a determinant along a trajectory, refining as needed.

    The trajectory is resampled at doubled density until consecutive phase
    jumps stay under a quarter turn; failure to resolve after
    `max_refinements` doublings means the determinant passes through zero at
    a real path time, which is reported rather than corrected (time-path
    deformation is out of scope; see the sweep correction instead).
    """
    traj = trajectory
    for _ in range(max_refinements + 1):
        values = determinant_values(traj.monodromy, kind, b)
        try:
            return PhaseTracker.from_samples(kind, traj.sigma, values)
        except PhaseTrackingError as err:
            last = err
            traj = traj.resample(2 * traj.samples)
    raise last


def correct_half_phase_sweep(trackers: Sequence[PhaseTracker]):
    """Continuous half-phases across a parameter sweep, sign flips undone.

    When a determinant zero migrates across the real time axis between two
    sweep samples, the accumulated phase jumps by a full turn and the
    half-phase by half of one -- an impossible discontinuity for the square
    root.  Each near-pi half-phase step is removed by flipping the branch
    (shifting by the nearest multiple of pi), and the number of flips is
    reported.
    """
    halves = np.array([tr.half_phase for tr in trackers], dtype=float)
    corrected = halves.copy()
    offset = 0.0
    corrections = 0
    for k in range(1, corrected.size):
        step_k = halves[k] + offset - corrected[k - 1]
        flips = round(step_k / math.pi)
        if flips != 0:
            offset -= flips * math.pi
            corrections += 1
        corrected[k] = halves[k] + offset
    return corrected, corrections
