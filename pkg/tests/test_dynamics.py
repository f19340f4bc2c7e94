"""Map/flow stepping against independent geometric and closed-form oracles."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import quad

from chaoskit import stadium
from chaoskit.dynamics import (
    PhasePoint,
    bakers_map,
    conservation_check,
    harmonic_oscillator,
    integrate_flow,
    inverse_step,
    iterate,
    linear_ramp,
    quartic_oscillator,
    stadium_map,
    standard_map,
    step,
)

# ---------------------------------------------------------------------------
# Independent Cartesian oracle for the stadium billiard.
#
# The stadium here is the union of the rectangle |x| <= gamma, |y| <= 1 and
# the two unit discs centred at (+-gamma, 0).  A bounce is computed without
# any reference to the library's chart or stepping code: launch a ray in
# Cartesian coordinates, march until it leaves the region, bisect the exit
# to 1e-13, and reflect off the analytically known normal of whichever
# boundary piece was hit.  Chart coordinates are recovered with formulas
# written below from scratch (arclength clockwise from the rightmost point).
# ---------------------------------------------------------------------------


def _inside(gamma, x, y):
    if abs(x) <= gamma and abs(y) <= 1.0:
        return True
    if (x - gamma) ** 2 + y * y <= 1.0:
        return True
    if (x + gamma) ** 2 + y * y <= 1.0:
        return True
    return False


def _oracle_xy_of_q(gamma, q):
    """Boundary point for arclength q (clockwise, q=0 at (gamma+1, 0))."""
    P = 2.0 * np.pi + 4.0 * gamma
    q = q % P
    qa = 0.5 * np.pi
    qb = qa + 2.0 * gamma
    qc = qb + np.pi
    qd = qc + 2.0 * gamma
    if q <= qa:                      # right cap, descending quarter
        return gamma + np.cos(q), -np.sin(q)
    if q <= qb:                      # bottom edge, x decreasing
        return gamma - (q - qa), -1.0
    if q <= qc:                      # left cap
        ang = -0.5 * np.pi - (q - qb)
        return -gamma + np.cos(ang), np.sin(ang)
    if q <= qd:                      # top edge, x increasing
        return -gamma + (q - qc), 1.0
    return gamma + np.cos(P - q), np.sin(P - q)


def _oracle_q_of_xy(gamma, x, y):
    """Inverse of _oracle_xy_of_q for points on the boundary."""
    P = 2.0 * np.pi + 4.0 * gamma
    qa = 0.5 * np.pi
    qb = qa + 2.0 * gamma
    qc = qb + np.pi
    qd = qc + 2.0 * gamma
    if x >= gamma:                   # right cap
        ang = np.arctan2(y, x - gamma)
        return (-ang) % P
    if x <= -gamma:                  # left cap
        ang = np.arctan2(y, x + gamma)
        return qb + ((-0.5 * np.pi - ang) % (2.0 * np.pi))
    if y < 0.0:                      # bottom edge
        return qa + (gamma - x)
    return qc + (x + gamma)          # top edge


def _oracle_frame(gamma, x, y):
    """(tangent, inward normal) at a boundary point, from the geometry."""
    if x > gamma:
        nx, ny = gamma - x, -y       # into the right disc centre
    elif x < -gamma:
        nx, ny = -gamma - x, -y
    elif y < 0.0:
        nx, ny = 0.0, 1.0
    else:
        nx, ny = 0.0, -1.0
    norm = np.hypot(nx, ny)
    nx, ny = nx / norm, ny / norm
    return (-ny, nx), (nx, ny)       # tangent chosen so that n = (t_y, -t_x)


def _oracle_bounce(gamma, q, p):
    """One bounce: (q1, p1, chord length), by ray marching and bisection."""
    x0, y0 = _oracle_xy_of_q(gamma, q)
    (tx, ty), (nx, ny) = _oracle_frame(gamma, x0, y0)
    s = np.sqrt(1.0 - p * p)
    vx, vy = p * tx + s * nx, p * ty + s * ny

    march = 0.01
    lo = march
    while _inside(gamma, x0 + lo * vx, y0 + lo * vy):
        lo += march
    hi, lo = lo, lo - march
    for _ in range(60):              # bisect the exit to ~1e-13 twice over
        mid = 0.5 * (lo + hi)
        if _inside(gamma, x0 + mid * vx, y0 + mid * vy):
            lo = mid
        else:
            hi = mid
    ell = 0.5 * (lo + hi)
    x1, y1 = x0 + ell * vx, y0 + ell * vy
    (tx1, ty1), _ = _oracle_frame(gamma, x1, y1)
    p1 = vx * tx1 + vy * ty1
    return _oracle_q_of_xy(gamma, x1, y1), p1, ell


def _random_points(gamma, count, seed):
    rng = np.random.default_rng(seed)
    P = 2.0 * np.pi + 4.0 * gamma
    qs = rng.uniform(0.0, P, size=count)
    ps = rng.uniform(-0.95, 0.95, size=count)
    # keep launch points away from the four piece joints so the oracle's
    # piece-identification logic is unambiguous
    qa = 0.5 * np.pi
    breaks = np.array([qa, qa + 2 * gamma, qa + 2 * gamma + np.pi, P - qa, 0.0, P])
    keep = np.min(np.abs(qs[:, None] - breaks[None, :]), axis=1) > 1e-3
    return qs[keep], ps[keep]


@pytest.mark.parametrize("gamma", [1.0, 1.35])
def test_stadium_step_matches_cartesian_ray_oracle(gamma):
    qs, ps, = _random_points(gamma, 140, seed=11)
    q1, p1, chord = stadium.step(gamma, qs, ps)
    P = stadium.perimeter(gamma)
    for i in range(len(qs)):
        q_ref, p_ref, ell_ref = _oracle_bounce(gamma, qs[i], ps[i])
        dq = (q1[i] - q_ref + 0.5 * P) % P - 0.5 * P
        assert abs(dq) < 1e-9
        assert abs(p1[i] - p_ref) < 1e-9
        assert abs(chord[i] - ell_ref) < 1e-9


@pytest.mark.parametrize("gamma", [1.0, 1.35])
def test_stadium_inverse_step_reverses_step(gamma):
    qs, ps = _random_points(gamma, 120, seed=7)
    q1, p1, _ = stadium.step(gamma, qs, ps)
    q0, p0, _ = stadium.inverse_step(gamma, q1, p1)
    P = stadium.perimeter(gamma)
    dq = (q0 - qs + 0.5 * P) % P - 0.5 * P
    assert np.max(np.abs(dq)) < 1e-10
    assert np.max(np.abs(p0 - ps)) < 1e-10


def test_stadium_chart_round_trip():
    gamma = 1.0
    P = stadium.perimeter(gamma)
    qs = np.linspace(0.013, P - 0.017, 57)
    x, y = stadium.boundary_frame(gamma, qs)[:2]
    back = stadium.chart_from_cartesian(gamma, x, y)
    dq = (back - qs + 0.5 * P) % P - 0.5 * P
    assert np.max(np.abs(dq)) < 1e-12


def test_stadium_boundary_frame_matches_oracle_parameterization():
    gamma = 1.2
    P = stadium.perimeter(gamma)
    for q in np.linspace(0.01, P - 0.01, 41):
        x, y = stadium.boundary_frame(gamma, np.atleast_1d(q))[:2]
        xo, yo = _oracle_xy_of_q(gamma, q)
        assert abs(float(x[0]) - xo) < 1e-12
        assert abs(float(y[0]) - yo) < 1e-12


@pytest.mark.parametrize("gamma", [1.0, 1.35])
def test_stadium_jacobian_matches_finite_differences(gamma):
    qs, ps = _random_points(gamma, 200, seed=23)
    h = 1e-6
    checked = 0
    for q, p in zip(qs, ps):
        out = stadium.step(gamma, np.array([q, q + h, q - h, q, q]),
                           np.array([p, p, p, p + h, p - h]))
        q1s, p1s = out[0], out[1]
        # skip seeds whose stencil straddles a piece joint of the image
        breaks = np.array(stadium.piece_breaks(gamma))
        if np.min(np.abs(q1s[:, None] - breaks[None, :])) < 1e-3:
            continue
        if np.max(np.abs(q1s - q1s[0])) > 0.1:   # stencil hit different pieces
            continue
        _, _, _, M = stadium.step(gamma, q, p, with_jacobian=True)
        M = M[0]
        fd = np.array([
            [(p1s[3] - p1s[4]) / (2 * h), (p1s[1] - p1s[2]) / (2 * h)],
            [(q1s[3] - q1s[4]) / (2 * h), (q1s[1] - q1s[2]) / (2 * h)],
        ])
        assert np.max(np.abs(fd - M)) < 1e-4 * max(1.0, np.max(np.abs(M)))
        assert abs(np.linalg.det(M) - 1.0) < 1e-9
        checked += 1
    assert checked > 100


def test_stadium_horizontal_chord_and_action():
    sys1 = stadium_map(gamma=1.0)
    seg = iterate(sys1, PhasePoint(0.0, 0.0), 4)
    # apex-to-apex flights of length 2*gamma + 2 = 4, momentum stays zero
    assert np.allclose(seg.p, 0.0, atol=1e-12)
    assert abs(seg.action[-1] - 16.0) < 1e-10
    P = stadium.perimeter(1.0)
    expected_q = [0.0, np.pi + 2.0, 0.0, np.pi + 2.0, 0.0]
    dq = (seg.q - expected_q + 0.5 * P) % P - 0.5 * P
    assert np.max(np.abs(dq)) < 1e-10


def test_stadium_bouncing_ball_alternates_edges():
    gamma = 1.0
    qa = 0.5 * np.pi
    q0 = qa + 0.6                      # bottom edge, x = gamma - 0.6
    sys1 = stadium_map(gamma)
    seg = iterate(sys1, PhasePoint(q0, 0.0), 2)
    # image on the top edge shares x, so q = q_c + (x + gamma)
    qc = qa + 2.0 * gamma + np.pi
    assert abs(seg.q[1] - (qc + 2.0 * gamma - 0.6)) < 1e-10
    assert abs(seg.q[2] - q0) < 1e-10
    assert abs(seg.action[-1] - 4.0) < 1e-12


def test_standard_map_hand_example():
    sysk = standard_map(1.3)
    q1, p1 = step(sysk, 0.25, 0.1)
    # sin(2 pi / 4) = 1: p' = 0.1 - 1.3/(2 pi), then q' = q + p' (mod 1)
    p_ref = 0.1 - 1.3 / (2.0 * np.pi)
    assert abs(float(p1[0]) - (p_ref % 1.0)) < 1e-14
    assert abs(float(q1[0]) - ((0.25 + p_ref) % 1.0)) < 1e-14


def test_standard_map_cylinder_keeps_momentum_unwrapped():
    sysk = standard_map(5.0, chart="cylinder")
    q1, p1 = step(sysk, 0.25, 0.0)
    assert float(p1[0]) == pytest.approx(-5.0 / (2.0 * np.pi), abs=1e-14)
    assert 0.0 <= float(q1[0]) < 1.0


@pytest.mark.parametrize("chart", ["torus", "cylinder"])
def test_standard_map_inverse_round_trip(chart):
    rng = np.random.default_rng(3)
    sysk = standard_map(2.7, chart=chart)
    q = rng.uniform(0, 1, 60)
    p = rng.uniform(0, 1, 60) if chart == "torus" else rng.uniform(-2, 2, 60)
    q1, p1 = step(sysk, q, p)
    q0, p0 = inverse_step(sysk, q1, p1)
    dq = (q0 - q + 0.5) % 1.0 - 0.5
    dp = (p0 - p + 0.5) % 1.0 - 0.5 if chart == "torus" else p0 - p
    assert np.max(np.abs(dq)) < 1e-12
    assert np.max(np.abs(dp)) < 1e-12


def test_standard_map_jacobian_matches_finite_differences():
    sysk = standard_map(1.7, chart="cylinder")
    rng = np.random.default_rng(5)
    h = 1e-6
    for q, p in zip(rng.uniform(0, 1, 40), rng.uniform(-1, 1, 40)):
        _, _, M = step(sysk, q, p, with_jacobian=True)
        M = M[0]
        qg = np.array([q, q + h, q - h, q, q])
        pg = np.array([p, p, p, p + h, p - h])
        q1s, p1s = step(sysk, qg, pg)
        q1s = np.unwrap(q1s - q1s[0], period=1.0) + q1s[0]
        fd = np.array([
            [(p1s[3] - p1s[4]) / (2 * h), (p1s[1] - p1s[2]) / (2 * h)],
            [(q1s[3] - q1s[4]) / (2 * h), (q1s[1] - q1s[2]) / (2 * h)],
        ])
        assert np.max(np.abs(fd - M)) < 1e-6
        assert abs(np.linalg.det(M) - 1.0) < 1e-12


def test_baker_step_is_a_bit_shift():
    sysb = bakers_map()
    # q = .1011, p = .0110 in binary; one step moves q's leading bit to p
    q, p = 11.0 / 16.0, 3.0 / 8.0
    q1, p1 = step(sysb, q, p)
    assert float(q1[0]) == pytest.approx(3.0 / 8.0, abs=0)     # .011
    assert float(p1[0]) == pytest.approx(11.0 / 16.0, abs=0)   # .1011
    q0, p0 = inverse_step(sysb, q1, p1)
    assert float(q0[0]) == q and float(p0[0]) == p


def test_baker_jacobian_is_constant_diagonal():
    sysb = bakers_map()
    _, _, M = step(sysb, 0.3, 0.9, with_jacobian=True)
    assert np.array_equal(M[0], np.array([[0.5, 0.0], [0.0, 2.0]]))
    _, _, Minv = inverse_step(sysb, 0.3, 0.9, with_jacobian=True)
    assert np.array_equal(Minv[0], np.array([[2.0, 0.0], [0.0, 0.5]]))


def test_harmonic_flow_matches_closed_form():
    m, w = 2.0, 1.5
    sysh = harmonic_oscillator(m=m, omega=w)
    q0, p0, T = 0.7, -0.4, 2.3
    seg = integrate_flow(sysh, PhasePoint(q0, p0), T)
    t = seg.times
    q_ref = q0 * np.cos(w * t) + p0 / (m * w) * np.sin(w * t)
    p_ref = p0 * np.cos(w * t) - m * w * q0 * np.sin(w * t)
    assert np.max(np.abs(seg.q - q_ref)) < 1e-9
    assert np.max(np.abs(seg.p - p_ref)) < 1e-9
    assert conservation_check(seg) < 1e-10
    # action oracle: independent quadrature of the Lagrangian on the closed form
    E = p0 * p0 / (2 * m) + 0.5 * m * w * w * q0 * q0

    def lagrangian(t):
        p = p0 * np.cos(w * t) - m * w * q0 * np.sin(w * t)
        return p * p / m - E

    ref, _ = quad(lagrangian, 0.0, T, epsabs=1e-12, epsrel=1e-12)
    assert abs(seg.action[-1] - ref) < 1e-9


def test_ramp_flow_matches_closed_form():
    sysr = linear_ramp()                   # H = p^2 + q
    q0, p0, T = 1.0, 0.3, 2.5
    seg = integrate_flow(sysr, PhasePoint(q0, p0), T)
    t = seg.times
    assert np.max(np.abs(seg.q - (q0 + 2 * p0 * t - t * t))) < 1e-10
    assert np.max(np.abs(seg.p - (p0 - t))) < 1e-10
    # action = int (p^2 - q) dt for this H, polynomial in closed form
    ref = (p0 * p0 - q0) * T - 2.0 * p0 * T * T + (2.0 / 3.0) * T ** 3
    assert abs(seg.action[-1] - ref) < 1e-9


def test_quartic_flow_period_matches_quadrature():
    sysq = quartic_oscillator()            # H = p^2/2 + q^4, take E = 1
    # quarter period = int_0^1 dq / sqrt(2 (1 - q^4)), by direct quadrature
    quarter, _ = quad(lambda q: 1.0 / np.sqrt(2.0 * (1.0 - q ** 4)), 0.0, 1.0,
                      epsabs=1e-13, epsrel=1e-13)
    T = 4.0 * quarter
    assert abs(T - 3.7081493546027438) < 1e-10   # 2*sqrt(2)*1.31102877714606
    seg = integrate_flow(sysq, PhasePoint(0.0, np.sqrt(2.0)), T)
    assert abs(seg.q[-1] - 0.0) < 1e-8
    assert abs(seg.p[-1] - np.sqrt(2.0)) < 1e-8
    assert conservation_check(seg) < 1e-10


def test_flow_and_map_entry_points_reject_wrong_kind():
    with pytest.raises(ValueError):
        iterate(harmonic_oscillator(), PhasePoint(0, 0), 3)
    with pytest.raises(ValueError):
        integrate_flow(standard_map(1.0), PhasePoint(0, 0), 1.0)
    with pytest.raises(ValueError):
        step(harmonic_oscillator(), 0.0, 0.0)
