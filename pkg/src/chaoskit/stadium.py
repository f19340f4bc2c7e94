"""Exact geometry of the Bunimovich stadium billiard in boundary coordinates.

The stadium has two unit-radius semicircular caps centered at (+-gamma, 0) and
two straight edges of length 2*gamma at y = +-1, so the perimeter is
2*pi + 4*gamma.  The boundary chart is (q, p): q is arclength measured from the
rightmost point (gamma + 1, 0) with the bottom edge traversed first (so the
x axis meets the section at q = 0 and q = pi + 2*gamma, and the bottom edge
occupies [pi/2, pi/2 + 2*gamma]); p is the cosine of the angle between the
outgoing velocity and the boundary tangent, p in (-1, 1).

All stepping functions are vectorized over numpy arrays and operate on the
exact ray geometry: quadratic root for cap hits, linear solve for edge hits.
Tangent maps are in (delta_p, delta_q) ordering.
"""

from __future__ import annotations

import numpy as np

# A hit landing within this arclength of a cap/edge joint is assigned to the cap.
JOINT_TOL = 1e-13

_ARC_RIGHT = 0
_EDGE_BOTTOM = 1
_ARC_LEFT = 2
_EDGE_TOP = 3


def perimeter(gamma: float) -> float:
    return 2.0 * np.pi + 4.0 * gamma


def piece_breaks(gamma: float) -> tuple[float, float, float, float]:
    """Arclength values of the four joints, in traversal order."""
    qa = 0.5 * np.pi
    return qa, qa + 2.0 * gamma, qa + 2.0 * gamma + np.pi, 1.5 * np.pi + 4.0 * gamma


def boundary_frame(gamma, q):
    """Position, unit tangent, inward normal and curvature at arclength q.

    Returns (x, y, tx, ty, nx, ny, kappa) as arrays broadcast like q.  The
    inward normal is the tangent rotated so that outgoing rays have positive
    normal component; curvature is 1 on the caps and 0 on the edges.
    """
    q = np.asarray(q, dtype=float)
    P = perimeter(gamma)
    q = np.mod(q, P)
    qa, qb, qc, qd = piece_breaks(gamma)

    x = np.empty_like(q)
    y = np.empty_like(q)
    tx = np.empty_like(q)
    ty = np.empty_like(q)
    kappa = np.zeros_like(q)

    m = q <= qa  # right cap, lower quarter: angle theta = -q
    th = -q[m]
    x[m] = gamma + np.cos(th)
    y[m] = np.sin(th)
    tx[m] = np.sin(th)
    ty[m] = -np.cos(th)
    kappa[m] = 1.0

    m = (q > qa) & (q <= qb)  # bottom edge, x decreasing
    x[m] = gamma - (q[m] - qa)
    y[m] = -1.0
    tx[m] = -1.0
    ty[m] = 0.0

    m = (q > qb) & (q <= qc)  # left cap: theta from -pi/2 down to -3*pi/2
    th = -0.5 * np.pi - (q[m] - qb)
    x[m] = -gamma + np.cos(th)
    y[m] = np.sin(th)
    tx[m] = np.sin(th)
    ty[m] = -np.cos(th)
    kappa[m] = 1.0

    m = (q > qc) & (q <= qd)  # top edge, x increasing
    x[m] = -gamma + (q[m] - qc)
    y[m] = 1.0
    tx[m] = 1.0
    ty[m] = 0.0

    m = q > qd  # right cap, upper quarter: theta from pi/2 down to 0
    th = 0.5 * np.pi - (q[m] - qd)
    x[m] = gamma + np.cos(th)
    y[m] = np.sin(th)
    tx[m] = np.sin(th)
    ty[m] = -np.cos(th)
    kappa[m] = 1.0

    # inward normal = tangent rotated clockwise (domain is to the right of T)
    nx = ty
    ny = -tx
    return x, y, tx, ty, nx, ny, kappa


def chart_from_cartesian(gamma, x, y):
    """Arclength q of a boundary point given in Cartesian coordinates."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    qa, qb, qc, qd = piece_breaks(gamma)
    P = perimeter(gamma)
    q = np.empty_like(x)

    on_right = x >= gamma - JOINT_TOL
    on_left = x <= -gamma + JOINT_TOL
    th = np.arctan2(y, np.where(on_right, x - gamma, x + gamma))
    # right cap: theta in [-pi/2, pi/2]; q = -theta (mod P)
    q_right = np.mod(-th, P)
    # left cap: theta in [pi/2, 3*pi/2] -> shift branch to (-3*pi/2, -pi/2]
    th_left = np.where(th > 0.5 * np.pi + 1e-15, th - 2.0 * np.pi, th)
    q_left = qb + (-0.5 * np.pi - th_left)
    q_edge = np.where(y < 0.0, qa + (gamma - x), qc + (x + gamma))

    q[:] = np.where(on_right, q_right, np.where(on_left, q_left, q_edge))
    return np.mod(q, P)


def _cap_hit(dx, dy, vx, vy, same_cap):
    """Both travel times to a cap circle (the chord may start inside it).

    With the start point on the circle (`same_cap`) the roots are 0 and -2 b;
    otherwise both quadratic roots are returned (NaN when the ray misses).
    A ray can cross the inactive half of the far cap's circle while still
    inside the stadium, so the physical bounce may sit at either root.
    """
    b = dx * vx + dy * vy
    if same_cap:
        return np.full_like(b, np.nan), -2.0 * b
    c = dx * dx + dy * dy - 1.0
    disc = b * b - c
    bad = disc < 0.0
    sq = np.sqrt(np.where(bad, 0.0, disc))
    t1 = np.where(bad, np.nan, -b - sq)
    t2 = np.where(bad, np.nan, -b + sq)
    return t1, t2


def step(gamma, q, p, with_jacobian: bool = False):
    """One bounce of the stadium map.

    Returns (q1, p1, chord) or, with `with_jacobian`, (q1, p1, chord, M) where
    M has shape (..., 2, 2) and acts on (delta_p, delta_q).
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    q, p = np.broadcast_arrays(q, p)
    q = q.copy()
    p = np.clip(p, -1.0 + 1e-15, 1.0 - 1e-15)

    x0, y0, tx, ty, nx, ny, k0 = boundary_frame(gamma, q)
    s = np.sqrt(1.0 - p * p)
    vx = p * tx + s * nx
    vy = p * ty + s * ny

    qa, qb, qc, qd = piece_breaks(gamma)
    P = perimeter(gamma)
    on_right_cap = (q <= qa + JOINT_TOL) | (q >= qd - JOINT_TOL)
    on_left_cap = (q >= qb - JOINT_TOL) & (q <= qc + JOINT_TOL)

    tiny = 1e-12
    best_t = np.full_like(q, np.inf)
    hit_piece = np.full(q.shape, -1, dtype=np.int8)

    # caps
    for piece, cx, on_this in ((_ARC_RIGHT, gamma, on_right_cap),
                               (_ARC_LEFT, -gamma, on_left_cap)):
        dx = x0 - cx
        ts, tos = _cap_hit(dx, y0, vx, vy, True), _cap_hit(dx, y0, vx, vy, False)
        for t in (np.where(on_this, ts[1], tos[0]), np.where(on_this, np.nan, tos[1])):
            xh = x0 + t * vx
            if piece == _ARC_RIGHT:
                valid_side = xh >= gamma - JOINT_TOL
            else:
                valid_side = xh <= -gamma + JOINT_TOL
            with np.errstate(invalid="ignore"):
                ok = np.isfinite(t) & (t > tiny) & valid_side & (t < best_t)
            best_t = np.where(ok, t, best_t)
            hit_piece = np.where(ok, piece, hit_piece)

    # edges
    for piece, ye in ((_EDGE_BOTTOM, -1.0), (_EDGE_TOP, 1.0)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ye - y0) / vy
        xh = x0 + t * vx
        ok = np.isfinite(t) & (t > tiny) & (np.abs(xh) <= gamma - JOINT_TOL) & (t < best_t)
        best_t = np.where(ok, t, best_t)
        hit_piece = np.where(ok, piece, hit_piece)

    chord = best_t
    x1 = x0 + chord * vx
    y1 = y0 + chord * vy

    # chart coordinate and frame at the hit, by piece
    q1 = np.empty_like(q)
    m = hit_piece == _ARC_RIGHT
    if np.any(m):
        th = np.arctan2(y1[m], x1[m] - gamma)
        q1[m] = np.mod(-th, P)
    m = hit_piece == _ARC_LEFT
    if np.any(m):
        th = np.arctan2(y1[m], x1[m] + gamma)
        th = np.where(th > 0.0, th - 2.0 * np.pi, th)
        q1[m] = qb + (-0.5 * np.pi - th)
    m = hit_piece == _EDGE_BOTTOM
    if np.any(m):
        q1[m] = qa + (gamma - x1[m])
    m = hit_piece == _EDGE_TOP
    if np.any(m):
        q1[m] = qc + (x1[m] + gamma)

    _, _, tx1, ty1, nx1, ny1, k1 = boundary_frame(gamma, q1)
    vn = vx * nx1 + vy * ny1          # negative: ray runs into the wall
    p1 = vx * tx1 + vy * ty1          # tangential component survives reflection

    if not with_jacobian:
        return q1, p1, chord

    n0 = s
    n1 = -vn
    n1 = np.maximum(n1, 1e-300)
    M = np.empty(q.shape + (2, 2))
    M[..., 0, 0] = (k1 * chord - n1) / n0
    M[..., 0, 1] = k1 * n0 + k0 * n1 - k0 * k1 * chord
    M[..., 1, 0] = -chord / (n0 * n1)
    M[..., 1, 1] = (k0 * chord - n0) / n1
    return q1, p1, chord, M


def inverse_step(gamma, q, p, with_jacobian: bool = False):
    """One bounce of the inverse map, via time reversal (q, p) -> (q, -p)."""
    if not with_jacobian:
        q1, p1, chord = step(gamma, q, -np.asarray(p, dtype=float))
        return q1, -p1, chord
    q1, p1, chord, M = step(gamma, q, -np.asarray(p, dtype=float), with_jacobian=True)
    # conjugate by diag(-1, 1): reverse p before and after
    Minv = np.empty_like(M)
    Minv[..., 0, 0] = M[..., 0, 0]
    Minv[..., 0, 1] = -M[..., 0, 1]
    Minv[..., 1, 0] = -M[..., 1, 0]
    Minv[..., 1, 1] = M[..., 1, 1]
    return q1, -p1, chord, Minv


def unfold_q(q_seq, P):
    """Lift a nearly-continuous sequence of wrapped q values off the circle."""
    q_seq = np.asarray(q_seq, dtype=float)
    out = q_seq.copy()
    jumps = np.diff(q_seq)
    shift = np.cumsum(np.where(jumps > 0.5 * P, -P, np.where(jumps < -0.5 * P, P, 0.0)))
    out[1:] += shift
    return out


# --- symmetry group of the chart -------------------------------------------
# Spatial reflections commute with the bounce map; time reversal conjugates it
# into its inverse.  All three flip the sign of p.

def mirror_y(gamma, q, p):
    """Reflection x -> -x (swaps the two caps)."""
    return np.mod((np.pi + 2.0 * gamma) - np.asarray(q), perimeter(gamma)), -np.asarray(p)


def mirror_x(gamma, q, p):
    """Reflection y -> -y (swaps the two edges)."""
    return np.mod(-np.asarray(q), perimeter(gamma)), -np.asarray(p)


def half_turn(gamma, q, p):
    """Rotation by pi, the composition of the two mirrors."""
    return np.mod(np.asarray(q) + np.pi + 2.0 * gamma, perimeter(gamma)), +np.asarray(p)


def time_reversal(gamma, q, p):
    return np.mod(np.asarray(q), perimeter(gamma)), -np.asarray(p)


SYMMETRY_NAMES = ("identity", "mirror-x", "mirror-y", "half-turn",
                  "reversal", "reversal*mirror-x", "reversal*mirror-y", "reversal*half-turn")


def symmetry_image(gamma, name, q, p):
    """Apply one of the eight chart symmetries to section coordinates."""
    base = name.replace("reversal*", "").replace("reversal", "identity")
    if base == "mirror-x":
        q, p = mirror_x(gamma, q, p)
    elif base == "mirror-y":
        q, p = mirror_y(gamma, q, p)
    elif base == "half-turn":
        q, p = half_turn(gamma, q, p)
    if name.startswith("reversal"):
        q, p = time_reversal(gamma, q, p)
    return q, p


def is_reversing(name: str) -> bool:
    """True if the symmetry conjugates the map into its inverse."""
    return name.startswith("reversal")
