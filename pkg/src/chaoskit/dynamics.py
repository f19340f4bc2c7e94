"""Map and flow catalog: stepping, iteration, and conserved-quantity checks.

Discrete systems (standard map, baker's map, stadium billiard) share a single
`MapSystem` record with a vectorized `step`; Hamiltonian flows (harmonic,
quartic, linear ramp) use the same record and are integrated with a
high-order adaptive scheme.  Tangent data is ordered (delta_p, delta_q)
throughout, matching the stability-matrix block convention used everywhere
in this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from . import stadium

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PhasePoint:
    """A single surface-of-section or phase-space point."""
    q: float
    p: float

    def as_array(self) -> np.ndarray:
        return np.array([self.q, self.p], dtype=float)


@dataclass(frozen=True)
class MapSystem:
    """A member of the system catalog.

    kind: "standard" | "baker" | "stadium" | "harmonic" | "quartic" | "ramp".
    The first three are discrete maps, the rest are flows.
    """
    kind: str
    params: dict = field(default_factory=dict)
    chart: str = ""

    @property
    def is_flow(self) -> bool:
        return self.kind in ("harmonic", "quartic", "ramp")


def standard_map(kparam: float, chart: str = "torus") -> MapSystem:
    if chart not in ("torus", "cylinder"):
        raise ValueError(f"standard map chart must be torus or cylinder, got {chart!r}")
    return MapSystem("standard", {"kparam": float(kparam)}, chart)


def bakers_map() -> MapSystem:
    return MapSystem("baker", {}, "unit-square")


def stadium_map(gamma: float) -> MapSystem:
    if gamma <= 0:
        raise ValueError("stadium requires gamma > 0")
    return MapSystem("stadium", {"gamma": float(gamma)}, "birkhoff")


def harmonic_oscillator(m: float = 1.0, omega: float = 1.0) -> MapSystem:
    return MapSystem("harmonic", {"m": float(m), "omega": float(omega)}, "plane")


def quartic_oscillator(m: float = 1.0, alpha: float = 1.0) -> MapSystem:
    return MapSystem("quartic", {"m": float(m), "alpha": float(alpha)}, "plane")


def linear_ramp(m: float = 0.5, alpha: float = 1.0) -> MapSystem:
    """Uniform-acceleration Hamiltonian p^2/2m + alpha*q (defaults give p^2 + q)."""
    return MapSystem("ramp", {"m": float(m), "alpha": float(alpha)}, "plane")


# --- discrete stepping ------------------------------------------------------

def step(system: MapSystem, q, p, with_jacobian: bool = False):
    """Advance (q, p) one iteration.  Vectorized; returns arrays.

    With `with_jacobian`, also returns the one-step tangent matrix in
    (delta_p, delta_q) ordering, shape (..., 2, 2).
    """
    if system.kind == "standard":
        K = system.params["kparam"]
        q = np.atleast_1d(np.asarray(q, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        q, p = np.broadcast_arrays(q, p)
        p1 = p - K / TWO_PI * np.sin(TWO_PI * q)
        if system.chart == "torus":
            p1 = np.mod(p1, 1.0)
        q1 = np.mod(q + p1, 1.0)
        if not with_jacobian:
            return q1, p1
        M = np.empty(q.shape + (2, 2))
        c = K * np.cos(TWO_PI * q)
        M[..., 0, 0] = 1.0
        M[..., 0, 1] = -c
        M[..., 1, 0] = 1.0
        M[..., 1, 1] = 1.0 - c
        return q1, p1, M

    if system.kind == "baker":
        q = np.atleast_1d(np.asarray(q, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        q, p = np.broadcast_arrays(q, p)
        bit = np.floor(2.0 * q)
        q1 = 2.0 * q - bit
        p1 = 0.5 * (p + bit)
        if not with_jacobian:
            return q1, p1
        M = np.zeros(q.shape + (2, 2))
        M[..., 0, 0] = 0.5
        M[..., 1, 1] = 2.0
        return q1, p1, M

    if system.kind == "stadium":
        out = stadium.step(system.params["gamma"], q, p, with_jacobian=with_jacobian)
        if with_jacobian:
            q1, p1, _, M = out
            return q1, p1, M
        return out[0], out[1]

    raise ValueError(f"step is for discrete maps, not {system.kind!r}")


def inverse_step(system: MapSystem, q, p, with_jacobian: bool = False):
    """One iteration of the inverse map."""
    if system.kind == "standard":
        K = system.params["kparam"]
        q = np.atleast_1d(np.asarray(q, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        q, p = np.broadcast_arrays(q, p)
        q0 = np.mod(q - p, 1.0)
        p0 = p + K / TWO_PI * np.sin(TWO_PI * q0)
        if system.chart == "torus":
            p0 = np.mod(p0, 1.0)
        if not with_jacobian:
            return q0, p0
        M = np.empty(q.shape + (2, 2))
        c = K * np.cos(TWO_PI * q0)
        M[..., 0, 0] = 1.0 + c
        M[..., 0, 1] = -c
        M[..., 1, 0] = -1.0
        M[..., 1, 1] = 1.0
        return q0, p0, M

    if system.kind == "baker":
        q = np.atleast_1d(np.asarray(q, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        q, p = np.broadcast_arrays(q, p)
        bit = np.floor(2.0 * p)
        p0 = 2.0 * p - bit
        q0 = 0.5 * (q + bit)
        if not with_jacobian:
            return q0, p0
        M = np.zeros(q.shape + (2, 2))
        M[..., 0, 0] = 2.0
        M[..., 1, 1] = 0.5
        return q0, p0, M

    if system.kind == "stadium":
        out = stadium.inverse_step(system.params["gamma"], q, p, with_jacobian=with_jacobian)
        if with_jacobian:
            q0, p0, _, M = out
            return q0, p0, M
        return out[0], out[1]

    raise ValueError(f"inverse_step is for discrete maps, not {system.kind!r}")


def step_action(system: MapSystem, q0, p0, q1, p1):
    """Generating-function increment of one step (chord length for billiards)."""
    if system.kind == "stadium":
        g = system.params["gamma"]
        x0, y0 = stadium.boundary_frame(g, q0)[:2]
        x1, y1 = stadium.boundary_frame(g, q1)[:2]
        return np.hypot(x1 - x0, y1 - y0)
    if system.kind == "standard":
        K = system.params["kparam"]
        dq = np.asarray(p1, dtype=float)  # lift of q1 - q0 is p1 by construction
        return 0.5 * dq * dq + K / (4.0 * np.pi ** 2) * np.cos(TWO_PI * np.asarray(q0))
    raise ValueError(f"no generating function for {system.kind!r}")


@dataclass
class TrajectorySegment:
    """An iterated or integrated stretch of trajectory."""
    system: MapSystem
    times: np.ndarray          # iteration index for maps, time for flows
    q: np.ndarray
    p: np.ndarray
    action: np.ndarray         # accumulated action (zero for the baker's map)

    def points(self) -> list[PhasePoint]:
        return [PhasePoint(float(a), float(b)) for a, b in zip(self.q, self.p)]


def iterate(system: MapSystem, point: PhasePoint, n: int) -> TrajectorySegment:
    """Iterate a discrete map n times, accumulating the action when defined."""
    if system.is_flow:
        raise ValueError("iterate applies to discrete maps; use integrate_flow")
    if n < 0:
        raise ValueError("n must be nonnegative")
    qs = np.empty(n + 1)
    ps = np.empty(n + 1)
    acts = np.zeros(n + 1)
    q = np.atleast_1d(float(point.q))
    p = np.atleast_1d(float(point.p))
    qs[0], ps[0] = q[0], p[0]
    for i in range(n):
        if system.kind == "stadium":
            q1, p1, chord = stadium.step(system.params["gamma"], q, p)
            acts[i + 1] = acts[i] + chord[0]
        else:
            q1, p1 = step(system, q, p)
            if system.kind == "standard":
                acts[i + 1] = acts[i] + float(step_action(system, q, p, q1, p1)[0])
            # baker's map: no generating function, action stays zero
        q, p = q1, p1
        qs[i + 1], ps[i + 1] = q[0], p[0]
    return TrajectorySegment(system, np.arange(n + 1, dtype=float), qs, ps, acts)


# --- Hamiltonian flows ------------------------------------------------------

def hamiltonian(system: MapSystem, q, p):
    """H(q, p); accepts complex arguments for the analytic potentials."""
    if system.kind == "harmonic":
        m, w = system.params["m"], system.params["omega"]
        return p * p / (2.0 * m) + 0.5 * m * w * w * q * q
    if system.kind == "quartic":
        m, a = system.params["m"], system.params["alpha"]
        return p * p / (2.0 * m) + a * q ** 4
    if system.kind == "ramp":
        m, a = system.params["m"], system.params["alpha"]
        return p * p / (2.0 * m) + a * q
    raise ValueError(f"{system.kind!r} has no Hamiltonian")


def hamilton_rhs(system: MapSystem, q, p):
    """(dq/dt, dp/dt) = (dH/dp, -dH/dq)."""
    if system.kind == "harmonic":
        m, w = system.params["m"], system.params["omega"]
        return p / m, -m * w * w * q
    if system.kind == "quartic":
        m, a = system.params["m"], system.params["alpha"]
        return p / m, -4.0 * a * q ** 3
    if system.kind == "ramp":
        m, a = system.params["m"], system.params["alpha"]
        return p / m, -a * np.ones_like(np.asarray(q))
    raise ValueError(f"{system.kind!r} has no Hamiltonian")


def hamilton_hessian(system: MapSystem, q, p):
    """(H_qq, H_qp, H_pp) along a trajectory point (complex capable)."""
    if system.kind == "harmonic":
        m, w = system.params["m"], system.params["omega"]
        zero = np.zeros_like(np.asarray(q))
        return m * w * w + zero, zero, 1.0 / m + zero
    if system.kind == "quartic":
        m, a = system.params["m"], system.params["alpha"]
        zero = np.zeros_like(np.asarray(q))
        return 12.0 * a * q ** 2, zero, 1.0 / m + zero
    if system.kind == "ramp":
        m, _ = system.params["m"], system.params["alpha"]
        zero = np.zeros_like(np.asarray(q))
        return zero, zero, 1.0 / m + zero
    raise ValueError(f"{system.kind!r} has no Hamiltonian")


def integrate_flow(system: MapSystem, point: PhasePoint, t_final: float,
                   n_samples: int = 201, rtol: float = 1e-12,
                   atol: float = 1e-14) -> TrajectorySegment:
    """Integrate a flow to t_final, recording ∫(p qdot - H) dt as the action."""
    if not system.is_flow:
        raise ValueError("integrate_flow applies to flows; use iterate")

    def rhs(t, y):
        q, p = y[0], y[1]
        dq, dp = hamilton_rhs(system, q, p)
        lag = p * dq - hamiltonian(system, q, p)
        return [dq, dp, lag]

    ts = np.linspace(0.0, t_final, n_samples)
    sol = solve_ivp(rhs, (0.0, t_final), [point.q, point.p, 0.0], t_eval=ts,
                    method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"flow integration failed: {sol.message}")
    return TrajectorySegment(system, sol.t, sol.y[0], sol.y[1], sol.y[2])


def conservation_check(segment: TrajectorySegment) -> float:
    """Max |H - H(0)| along an integrated segment."""
    sys_ = segment.system
    if not sys_.is_flow:
        raise ValueError("conservation_check applies to flow segments")
    H = hamiltonian(sys_, segment.q, segment.p)
    return float(np.max(np.abs(H - H[0])))
