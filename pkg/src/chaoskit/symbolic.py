"""Symbolic dynamics: exact baker coding and stadium itinerary partitions.

The baker side works in exact rational arithmetic (`fractions.Fraction`), so
periodic points and uniformity sums carry no roundoff at all.  The stadium
side assigns each bounce a boundary-piece symbol, tags successive same-arc
bounces with their rotation sense, and partitions the section into connected
cells of equal finite itinerary by dense sampling plus flood fill.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import ndimage

from . import stadium

BAKER_ALPHABET = ("L", "R")


@dataclass(frozen=True)
class SymbolSequence:
    """Bi-infinite symbol string truncated for storage.

    `future` begins with the present symbol; `past` is most-recent-first, so
    the conventional layout is reverse(past) + "." + future.
    """
    past: tuple[str, ...]
    future: tuple[str, ...]
    alphabet: tuple[str, ...] = BAKER_ALPHABET

    def __str__(self) -> str:
        return "".join(reversed(self.past)) + "." + "".join(self.future)

    def shifted(self, steps: int = 1) -> "SymbolSequence":
        """Move the decimal point right (forward time) by `steps`."""
        past, future = list(self.past), list(self.future)
        for _ in range(steps):
            if not future:
                raise ValueError("ran out of future symbols")
            past.insert(0, future.pop(0))
        return SymbolSequence(tuple(past), tuple(future), self.alphabet)


def _bits_of(x: Fraction | float, count: int) -> tuple[int, ...]:
    x = Fraction(x).limit_denominator(2**62) if not isinstance(x, Fraction) else x
    out = []
    for _ in range(count):
        x = x * 2
        b = int(x)
        out.append(b)
        x -= b
    return tuple(out)


def baker_encode(q, p, bits: int = 32) -> SymbolSequence:
    """Symbol string of a baker's-map point: future from q, past from p."""
    if not (0 <= q < 1 and 0 <= p < 1):
        raise ValueError("point outside the unit square")
    future = tuple(BAKER_ALPHABET[b] for b in _bits_of(Fraction(q), bits))
    past = tuple(BAKER_ALPHABET[b] for b in _bits_of(Fraction(p), bits))
    return SymbolSequence(past, future)


def baker_decode(seq: SymbolSequence) -> tuple[Fraction, Fraction]:
    q = Fraction(0)
    for k, s in enumerate(seq.future):
        q += Fraction(BAKER_ALPHABET.index(s), 2 ** (k + 1))
    p = Fraction(0)
    for k, s in enumerate(seq.past):
        p += Fraction(BAKER_ALPHABET.index(s), 2 ** (k + 1))
    return q, p


def baker_step_exact(q: Fraction, p: Fraction) -> tuple[Fraction, Fraction]:
    """One exact baker iteration: stretch in q, squeeze in p."""
    if q < Fraction(1, 2):
        return 2 * q, p / 2
    return 2 * q - 1, (p + 1) / 2


def _code_int(code: str) -> int:
    val = 0
    for ch in code:
        val = 2 * val + BAKER_ALPHABET.index(ch)
    return val


def periodic_point_from_code(code: str) -> tuple[Fraction, Fraction]:
    """Exact periodic point of the repeated code: q = I/(2^n - 1).

    The all-R string aliases the origin (binary 0.111... = 1.0) and is
    rejected; use the all-L string for the fixed point at the corner.
    """
    if not code or any(c not in BAKER_ALPHABET for c in code):
        raise ValueError(f"code must be a nonempty string over {BAKER_ALPHABET}")
    if set(code) == {"R"}:
        raise ValueError("all-R code aliases the origin; use the all-L code")
    n = len(code)
    q = Fraction(_code_int(code), 2**n - 1)
    p = Fraction(_code_int(code[::-1]), 2**n - 1)
    return q, p


def _repeating_value(head: str, cycle: str) -> Fraction:
    """Exact value of the binary string .head (cycle)^infinity."""
    k, m = len(head), len(cycle)
    val = Fraction(_code_int(head) if head else 0, 2**k)
    if m:
        val += Fraction(_code_int(cycle), (2**m - 1) * 2**k)
    return val


def homoclinic_code(core: str, prefix: str = "", suffix: str = "") -> SymbolSequence:
    """Code of an orbit homoclinic to the `core` periodic orbit.

    Asymptotically repeats core on both ends with an excursion
    reverse(prefix)-then-suffix across the present; stored truncated at 48
    symbols each side.  `homoclinic_point` gives the exact phase point.
    """
    reps = 48
    fut = (suffix + core * reps)[:reps]
    pas = (prefix[::-1] + core[::-1] * reps)[:reps]
    return SymbolSequence(tuple(pas), tuple(fut))


def homoclinic_point(core: str, prefix: str = "", suffix: str = "") -> tuple[Fraction, Fraction]:
    """Exact phase point of the homoclinic code (repeating tails summed)."""
    q = _repeating_value(suffix, core)
    p = _repeating_value(prefix[::-1], core[::-1])
    return q, p


def enumerate_baker_orbits(n: int) -> list[tuple[str, list[tuple[Fraction, Fraction]]]]:
    """All primitive baker orbits of period dividing n, one code per orbit.

    Codes are grouped by cyclic equivalence; each entry carries the exact
    point cycle of its primitive period.  Fixed points of T^n total 2^n - 1.
    """
    seen: set[str] = set()
    orbits = []
    for val in range(2**n - 1):  # skip all-R (2^n - 1 itself)
        code = format(val, f"0{n}b").replace("0", "L").replace("1", "R")
        shifts = {code[k:] + code[:k] for k in range(n)}
        canon = min(shifts)
        if canon in seen:
            continue
        seen.add(canon)
        d = n
        for k in range(1, n):
            if n % k == 0 and canon[k:] + canon[:k] == canon:
                d = k
                break
        prim = canon[:d]
        pt = periodic_point_from_code(prim)
        cycle = [pt]
        for _ in range(d - 1):
            pt = baker_step_exact(*pt)
            cycle.append(pt)
        orbits.append((prim, cycle))
    return orbits


def baker_uniformity(n: int, cells: tuple[int, int] = (1, 1)):
    """Exact uniformity sums for fixed points of the n-fold baker map.

    Every fixed point has M_n = diag(2^-n, 2^n), so the weight is the exact
    rational 2^n/(2^n - 1)^2; sums per cell stay in Fraction arithmetic.
    """
    w = Fraction(2**n, (2**n - 1) ** 2)
    nq, npn = cells
    F = [[Fraction(0)] * npn for _ in range(nq)]
    for _code, cycle in enumerate_baker_orbits(n):
        for q, p in cycle:
            i = min(int(q * nq), nq - 1)
            j = min(int(p * npn), npn - 1)
            F[i][j] += w
    total = sum(sum(row) for row in F)
    return {"cell_sums": F, "total": total,
            "cell_volume": Fraction(1, nq * npn),
            "max_cell_deviation": max(
                abs(F[i][j] * nq * npn - 1)
                for i in range(nq) for j in range(npn))}


# ---------------------------------------------------------------------------
# Stadium itineraries

SIDE_LETTERS = ("R", "B", "L", "T")
_ARCS = (0, 2)


def stadium_side(gamma: float, q) -> np.ndarray:
    """Boundary-piece index for chart positions: 0=R arc, 1=bottom, 2=L arc, 3=top."""
    qa, qb, qc, qd = stadium.piece_breaks(gamma)
    P = stadium.perimeter(gamma)
    q = np.mod(np.asarray(q, dtype=float), P)
    side = np.zeros(q.shape, dtype=np.int8)
    side[(q >= qa) & (q < qb)] = 1
    side[(q >= qb) & (q < qc)] = 2
    side[(q >= qc) & (q < qd)] = 3
    return side


def stadium_symbol_path(gamma: float, q, p, steps: int, direction: str = "past"):
    """Side indices and same-arc sense tags along `steps` map iterations.

    Returns (sides, tags): sides has steps+1 rows (row 0 = the present),
    tags has `steps` rows, one per consecutive pair, holding sign(p) when
    both bounces of the pair lie on the same semicircle and 0 otherwise.
    """
    if direction not in ("past", "future"):
        raise ValueError("direction must be 'past' or 'future'")
    q = np.asarray(q, dtype=float).copy()
    p = np.asarray(p, dtype=float).copy()
    sides = np.empty((steps + 1,) + q.shape, dtype=np.int8)
    tags = np.zeros((steps,) + q.shape, dtype=np.int8)
    sides[0] = stadium_side(gamma, q)
    for k in range(steps):
        if direction == "past":
            q, p, _ = stadium.inverse_step(gamma, q, p)
        else:
            q, p, _ = stadium.step(gamma, q, p)
        sides[k + 1] = stadium_side(gamma, q)
        same_arc = (sides[k + 1] == sides[k]) & np.isin(sides[k], _ARCS)
        tags[k] = np.where(same_arc, np.sign(p).astype(np.int8), 0)
    return sides, tags


def _encode_words(sides, tags=None) -> np.ndarray:
    """Pack a side itinerary into one integer per sample.

    Cell boundaries are where the side sequence changes; the rotation-sense
    tags never cut a connected region (the two senses of a same-arc pair
    deeper in the past meet continuously across radial bounces), so they are
    attached to cells as labels afterwards rather than encoded here.
    """
    word = np.zeros(sides.shape[1:], dtype=np.int64)
    for k in range(sides.shape[0]):
        word = word * 4 + sides[k]
    return word


def word_label(gamma_word: tuple, steps: int) -> str:
    """Human-readable itinerary like 'L+ L+ B' from (sides, tags) digits."""
    sides, tags = gamma_word
    out = []
    for k, s in enumerate(sides):
        letter = SIDE_LETTERS[s]
        sense = ""
        if s in _ARCS:
            left = tags[k - 1] if k > 0 else 0
            right = tags[k] if k < len(tags) else 0
            t = left or right
            if t:
                sense = "+" if t > 0 else "-"
        out.append(letter + sense)
    return " ".join(out)


def stadium_itinerary_codes(gamma: float, q, p, steps: int,
                            direction: str = "future") -> list[str]:
    """Readable length-(steps+1) itineraries for an array of start points."""
    sides, tags = stadium_symbol_path(gamma, q, p, steps, direction)
    out = []
    for idx in np.ndindex(sides.shape[1:]):
        s = tuple(sides[(k,) + idx] for k in range(steps + 1))
        t = tuple(tags[(k,) + idx] for k in range(steps))
        out.append(word_label((s, t), steps))
    return out


@dataclass
class PartitionCell:
    word: int
    label: str
    area: float           # fraction of chart area
    pixel_count: int
    seed: tuple[float, float]


@dataclass
class ItineraryPartition:
    gamma: float
    n: int
    cells: list[PartitionCell]
    unresolved: list[PartitionCell]
    grid_shape: tuple[int, int]
    area_floor: float
    direction: str = "past"

    @property
    def cell_count(self) -> int:
        return len(self.cells)

    def labels(self) -> list[str]:
        return sorted({c.label for c in self.cells})


DEFAULT_AREA_FLOOR = 1e-4
SWEEP_AREA_FLOOR = 5e-6


def stadium_partition(gamma: float, n: int, grid: tuple[int, int] = (2048, 2048),
                      area_floor: float = DEFAULT_AREA_FLOOR,
                      direction: str = "past") -> ItineraryPartition:
    """Connected cells of constant n-iteration itinerary on the bounce chart.

    The section is sampled on a uniform grid, each sample's word of boundary
    sides over n map iterations is computed, and connected components
    (4-neighbour, periodic in q) of equal word become cells, labeled with
    rotation-sense tags.  Cells whose relative area falls below `area_floor`
    are reported in `unresolved` rather than counted: at the default floor
    the counts are grid-converged (pixelation slivers along thin grazing
    bands sit orders of magnitude below it), while `SWEEP_AREA_FLOOR`
    additionally resolves the 16 post-bifurcation cells that appear at
    depth 3 for γ slightly above 1.
    """
    P = stadium.perimeter(gamma)
    nq, npn = grid
    qg = P * (np.arange(nq) + 0.5) / nq
    pg = -1 + 2.0 * (np.arange(npn) + 0.5) / npn
    Q, Pm = np.meshgrid(qg, pg, indexing="ij")
    sides, tags = stadium_symbol_path(gamma, Q, Pm, n, direction)
    words = _encode_words(sides, tags)

    pixel_area = 1.0 / (nq * npn)    # relative to chart area
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    cells: list[PartitionCell] = []
    unresolved: list[PartitionCell] = []
    for w in np.unique(words):
        mask = words == w
        lab, ncomp = ndimage.label(mask, structure=structure)
        if ncomp == 0:
            continue
        # merge components joined across the periodic q seam
        merges = {}
        left, right = lab[0, :], lab[-1, :]
        join = (left > 0) & (right > 0)
        for a, b in zip(right[join], left[join]):
            ra, rb = merges.get(a, a), merges.get(b, b)
            if ra != rb:
                hi, lo = max(ra, rb), min(ra, rb)
                for key, val in list(merges.items()):
                    if val == hi:
                        merges[key] = lo
                merges[hi] = lo
        roots = {}
        for comp in range(1, ncomp + 1):
            r = comp
            while r in merges:
                r = merges[r]
            roots.setdefault(r, []).append(comp)
        idx0 = np.nonzero(mask)
        for r, members in roots.items():
            sel = np.isin(lab, members)
            count = int(sel.sum())
            ii, jj = np.nonzero(sel)
            k = len(ii) // 2
            seed = (float(qg[ii[k]]), float(pg[jj[k]]))
            s = tuple(int(sides[(m,) + (ii[k], jj[k])]) for m in range(n + 1))
            t = tuple(int(tags[(m,) + (ii[k], jj[k])]) for m in range(n))
            cell = PartitionCell(int(w), word_label((s, t), n),
                                 count * pixel_area, count, seed)
            if cell.area >= area_floor:
                cells.append(cell)
            else:
                unresolved.append(cell)
    cells.sort(key=lambda c: (-c.area, c.word))
    return ItineraryPartition(gamma, n, cells, unresolved, grid, area_floor,
                              direction)


def refine_cell_boundary(gamma: float, n: int, pt_in, pt_out,
                         direction: str = "past", tol: float = 1e-6):
    """Bisect between two section points with different itineraries.

    Returns the boundary location along the segment to within `tol` in
    chart units; the endpoints' words must differ.
    """
    def word_at(q, p):
        s, t = stadium_symbol_path(gamma, np.atleast_1d(q), np.atleast_1d(p),
                                   n, direction)
        return _encode_words(s, t)[0]

    (q0, p0), (q1, p1) = pt_in, pt_out
    w0 = word_at(q0, p0)
    if word_at(q1, p1) == w0:
        raise ValueError("endpoints share the same itinerary")
    while np.hypot(q1 - q0, p1 - p0) > tol:
        qm, pm = 0.5 * (q0 + q1), 0.5 * (p0 + p1)
        if word_at(qm, pm) == w0:
            q0, p0 = qm, pm
        else:
            q1, p1 = qm, pm
    return 0.5 * (q0 + q1), 0.5 * (p0 + p1)


def entropy_bound(counts: dict[int, int]) -> float:
    """Upper bound on KS entropy from the last ratio of partition counts."""
    ns = sorted(counts)
    if len(ns) < 2:
        raise ValueError("need counts at two consecutive depths")
    a, b = ns[-2], ns[-1]
    return float(np.log(counts[b] / counts[a]))
