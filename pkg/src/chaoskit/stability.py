"""Stability matrices, finite-time exponents, and semiclassical determinants.

The 2x2 stability matrix acts on (delta_p, delta_q):

    M = [[dp_t/dp_0, dp_t/dq_0],
         [dq_t/dp_0, dq_t/dq_0]],   det M = 1.

For flows it solves dM/dt = K_t M with
K_t = [[-H_qp, -H_qq], [H_pp, H_qp]] evaluated along the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .dynamics import MapSystem, PhasePoint, hamilton_hessian, hamilton_rhs, step


@dataclass
class StabilityMatrix:
    entries: np.ndarray      # (2, 2), (delta_p, delta_q) ordering
    steps: float             # iterations for maps, elapsed time for flows

    @property
    def trace(self) -> float:
        return float(self.entries[0, 0] + self.entries[1, 1])

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.entries))


@dataclass
class StabilityClass:
    kind: str                # "elliptic" | "parabolic" | "hyperbolic" | "hyperbolic-reflection"
    exponent: float          # per-step stability exponent (0 unless hyperbolic)
    rotation: float = 0.0    # per-step rotation angle for elliptic orbits


def propagate_tangent(system: MapSystem, point: PhasePoint, steps,
                      rtol: float = 1e-12, atol: float = 1e-14):
    """Accumulate the stability matrix along a trajectory.

    Maps: `steps` is an iteration count; returns (StabilityMatrix, endpoint).
    Flows: `steps` is a time span; returns the same, integrated with the
    trajectory so the tangent flow sees the exact orbit.
    """
    if system.is_flow:
        def rhs(t, y):
            q, p = y[0], y[1]
            dq, dp = hamilton_rhs(system, q, p)
            hqq, hqp, hpp = hamilton_hessian(system, q, p)
            M = y[2:].reshape(2, 2)
            K = np.array([[-hqp, -hqq], [hpp, hqp]])
            return np.concatenate(([dq, dp], (K @ M).ravel()))

        y0 = np.concatenate(([point.q, point.p], np.eye(2).ravel()))
        sol = solve_ivp(rhs, (0.0, float(steps)), y0, method="DOP853",
                        rtol=rtol, atol=atol, dense_output=True)
        if not sol.success:
            raise RuntimeError(f"tangent integration failed: {sol.message}")
        M = sol.y[2:, -1].reshape(2, 2)
        end = PhasePoint(float(sol.y[0, -1]), float(sol.y[1, -1]))
        mat = StabilityMatrix(M, float(steps))
        mat._dense = sol.sol  # noqa: SLF001 - used by caustic_times
        return mat, end

    n = int(steps)
    q = np.atleast_1d(float(point.q))
    p = np.atleast_1d(float(point.p))
    M = np.eye(2)
    for _ in range(n):
        q, p, Mstep = step(system, q, p, with_jacobian=True)
        M = Mstep[0] @ M
    return StabilityMatrix(M, float(n)), PhasePoint(float(q[0]), float(p[0]))


def finite_time_exponent(mat: StabilityMatrix) -> float:
    """Per-step stretching exponent from the singular values of M.

    mu = ln(lambda_max(M M^T)) / (2 * steps); M M^T has the paired spectrum
    exp(+-2 mu steps).
    """
    if mat.steps <= 0:
        raise ValueError("exponent needs steps > 0")
    G = mat.entries @ mat.entries.T
    lam = np.linalg.eigvalsh(G)[-1]
    return float(np.log(lam) / (2.0 * mat.steps))


def manifold_tangents(mat: StabilityMatrix):
    """Invariant-direction estimates from a finite trajectory segment.

    A forward segment pins down exactly two directions: the output direction
    of maximal stretch (which converges to the unstable tangent at the
    segment's END point) and the input direction of minimal stretch (which
    converges to the stable tangent at the segment's START point).  Returns
    (u_end, s_start, sigma_max) with unit (delta_p, delta_q) vectors and the
    maximal stretch factor.
    """
    U, S, Vt = np.linalg.svd(mat.entries)
    return U[:, 0], Vt[1, :], float(S[0])


def monodromy_directions(mat: StabilityMatrix):
    """Unstable/stable eigenvectors of a periodic-orbit monodromy matrix.

    Returns (v_u, v_s, lam_u, lam_s), unit vectors in (delta_p, delta_q).
    Raises for non-hyperbolic monodromies.
    """
    w, V = np.linalg.eig(mat.entries)
    if np.iscomplexobj(w) and np.any(np.abs(np.imag(w)) > 1e-12):
        raise ValueError("monodromy is elliptic; no real eigendirections")
    w = np.real(w)
    V = np.real(V)
    order = np.argsort(np.abs(w))
    ls, lu = w[order[0]], w[order[1]]
    if abs(lu) <= 1.0 + 1e-12:
        raise ValueError("monodromy is not hyperbolic")
    vs = V[:, order[0]] / np.linalg.norm(V[:, order[0]])
    vu = V[:, order[1]] / np.linalg.norm(V[:, order[1]])
    return vu, vs, float(lu), float(ls)


def classify(mat: StabilityMatrix, parabolic_tol: float = 1e-9) -> StabilityClass:
    """Stability class from the trace; |Tr| = 2 cosh(exponent * steps) when hyperbolic.

    Reflection-hyperbolic matrices (Tr < -2) use |Tr| in the cosh relation, so
    the exponent always measures the absolute stretching rate per step.
    """
    tr = mat.trace
    if abs(abs(tr) - 2.0) <= parabolic_tol:
        return StabilityClass("parabolic", 0.0)
    if abs(tr) < 2.0:
        return StabilityClass("elliptic", 0.0, float(np.arccos(0.5 * tr) / mat.steps))
    mu_total = float(np.arccosh(0.5 * abs(tr)))
    kind = "hyperbolic" if tr > 0 else "hyperbolic-reflection"
    return StabilityClass(kind, mu_total / mat.steps)


def semiclassical_determinants(mat: StabilityMatrix, b_alpha: complex,
                               b_beta: complex | None = None):
    """The three Gaussian-overlap determinants built from M's blocks.

    For one degree of freedom the blocks are scalars:
      D0 = M21,
      D1 = M22 + i M21 b_alpha,
      D2 = M11 b_alpha + conj(b_beta) M22 + i (conj(b_beta) M21 b_alpha - M12).
    """
    M = mat.entries
    m11, m12, m21, m22 = M[0, 0], M[0, 1], M[1, 0], M[1, 1]
    d0 = m21
    d1 = m22 + 1j * m21 * b_alpha
    if b_beta is None:
        b_beta = b_alpha
    bb = np.conj(b_beta)
    d2 = m11 * b_alpha + bb * m22 + 1j * (bb * m21 * b_alpha - m12)
    return complex(d0), complex(d1), complex(d2)


def caustic_times(system: MapSystem, point: PhasePoint, t_final: float,
                  n_scan: int = 400) -> list[float]:
    """Zeros of D0(t) = M21(t) along a flow trajectory (caustic passages).

    Scans a dense grid and polishes each bracketed sign change by bisection.
    """
    mat, _ = propagate_tangent(system, point, t_final)
    dense = mat._dense  # noqa: SLF001

    def d0(t):
        return dense(t)[2:].reshape(2, 2)[1, 0]

    ts = np.linspace(0.0, t_final, n_scan)
    vals = np.array([d0(t) for t in ts])
    zeros = []
    for i in range(len(ts) - 1):
        a, b = ts[i], ts[i + 1]
        fa, fb = vals[i], vals[i + 1]
        if fa == 0.0 and a > 0.0:
            zeros.append(a)
            continue
        if fa * fb < 0.0:
            for _ in range(80):
                c = 0.5 * (a + b)
                fc = d0(c)
                if fa * fc <= 0.0:
                    b, fb = c, fc
                else:
                    a, fa = c, fc
            zeros.append(0.5 * (a + b))
    return zeros


def caustic_count_map(system: MapSystem, point: PhasePoint, n: int) -> int:
    """Conjugate points of a point-source fan along n billiard bounces.

    A fan launched from the start point (zero transverse offset, unit angle
    spread) evolves linearly along each free flight, w(s) = w + s*dw, and a
    reflection at incidence cosine c on a piece of curvature kappa updates
    the spread by the mirror power 2*kappa/c.  The offset w is piecewise
    linear in path length, so its interior zeros are counted exactly.
    """
    if system.kind != "stadium":
        raise ValueError("caustic counting over bounces needs a billiard system")
    from . import stadium as chart
    g = system.params["gamma"]
    q = np.atleast_1d(float(point.q))
    p = np.atleast_1d(float(point.p))
    w, dw = 0.0, 1.0
    count = 0
    for _ in range(n):
        q, p, chord = chart.step(g, q, p)
        w_end = w + float(chord[0]) * dw
        if w * w_end < 0:
            count += 1
        elif w_end == 0.0 and w != 0.0:
            count += 1
        w = w_end
        # Reflection in the co-moving perpendicular frame: both components
        # pick up a common sign flip (dropped here; it cannot create a zero
        # of |w|) and the spread gains the mirror power 2*kappa/cos(phi).
        kappa = float(np.atleast_1d(chart.boundary_frame(g, q)[6])[0])
        c = np.sqrt(max(1.0 - float(p[0]) ** 2, 1e-300))
        dw = dw - (2.0 * kappa / c) * w
    return count
