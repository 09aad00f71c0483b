"""Stopping-time machinery over a lattice.

Builds the forest of stopping trees, selects energy-moderate roots via
enlarged cubes, constructs generalized / tractable trees, peels density
layers, regularizes stopping families, and runs the mass-spreading subtree
construction that feeds the approximating measures.  Everything is a pure
function of (lattice, coefficient table, params); the CoronaForest object
only adds caching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .lattice import Cube, Lattice, lambda_dilate
from .coeffs import CoeffTable, hd_k, sigma
from .riesz import riesz_sum

__all__ = [
    "CoronaForest", "TreeRecord", "EnlargedCube", "RegFamily", "SpreadTree",
    "build_top", "ld_family", "bad_family", "stop_star", "hd1",
    "is_mdw", "select_h", "enlarged_cube", "check_enlarged",
    "hd1_enlarged", "stop_star_enlarged", "generalized_tree", "is_tractable",
    "gh_family", "gh_and_generations", "layers",
    "regularize", "check_reg", "select_H",
    "big_riesz_value", "build_spread_tree", "spread_cover", "mass_accounting",
    "sigma", "forest_report", "save_forest_report",
]

# overlap cap asserted by check_reg; desk instances measure far below it
C3_OVERLAP = 256


def _ids(cubes) -> set:
    return {Q.id for Q in cubes}


def _sigma1(table: CoeffTable, Q: Cube, p: float = 2.0) -> float:
    return float(table.BigTheta[Q.gen][Q.idx]) ** p * Q.mass


def _theta(table: CoeffTable, Q: Cube) -> float:
    return float(table.BigTheta[Q.gen][Q.idx])


def _atoms_union(cubes) -> np.ndarray:
    if not cubes:
        return np.empty(0, dtype=np.intp)
    return np.unique(np.concatenate([Q.members for Q in cubes]))


# ---------------------------------------------------------------------------
# Stopping families.

def ld_family(lat: Lattice, table: CoeffTable, R: Cube, params=None) -> list:
    """Maximal cubes with side < ell(R) whose Poisson coefficient stays
    below delta0 * Theta(R).  Membership is global; callers intersect
    with R when needed."""
    params = params or lat.params
    thr = params.delta0 * _theta(table, R)
    hits = []
    for g in range(R.gen + 1, lat.depth + 1):
        for ci in np.nonzero(table.P[g] <= thr)[0]:
            hits.append(lat.generations[g][ci])
    return lat.maximal_cubes(hits)


def bad_family(forest: "CoronaForest", R: Cube) -> list:
    """Maximal cubes of LD(R) union HD_*(R); not restricted to R."""
    rec = forest._bad.get(R.id)
    if rec is None:
        lat, table, params = forest.lat, forest.table, forest.params
        if params.kLambdaStar < 1:
            raise ValueError("HD_* needs kLambda*(1-1/N) >= 1")
        hds = hd_k(lat, table, R, params.kLambdaStar)
        forest._hdstar_ids[R.id] = _ids(hds)
        rec = lat.maximal_cubes(hds + ld_family(lat, table, R, params))
        forest._bad[R.id] = rec
    return rec


def stop_star(forest: "CoronaForest", R: Cube) -> list:
    """Bad(R) cut down to the cubes contained in R."""
    rec = forest._stopstar.get(R.id)
    if rec is None:
        rec = [Q for Q in bad_family(forest, R) if forest.lat.contains(R, Q)]
        forest._stopstar[R.id] = rec
    return rec


def hd1(forest: "CoronaForest", R: Cube) -> list:
    """Stop_*(R) intersected with HD_*(R)."""
    rec = forest._hd1.get(R.id)
    if rec is None:
        bad_family(forest, R)
        hid = forest._hdstar_ids[R.id]
        rec = [Q for Q in stop_star(forest, R) if Q.id in hid]
        forest._hd1[R.id] = rec
    return rec


# ---------------------------------------------------------------------------
# The Top forest.

@dataclass
class TreeRecord:
    root: Cube
    hd: list
    ld: list
    stop: list
    end: list
    tree: list

    @property
    def tree_ids(self) -> set:
        return _ids(self.tree)


@dataclass
class CoronaForest:
    lat: Lattice
    table: CoeffTable
    params: object
    roots: list                       # breadth-first discovery order
    records: dict                     # root id -> TreeRecord
    deviations: list = field(default_factory=list)
    # caches keyed by cube id / (id, j)
    _bad: dict = field(default_factory=dict)
    _stopstar: dict = field(default_factory=dict)
    _hd1: dict = field(default_factory=dict)
    _hdstar_ids: dict = field(default_factory=dict)
    _mdw: dict = field(default_factory=dict)
    _h: dict = field(default_factory=dict)
    _enl: dict = field(default_factory=dict)
    _hd1e: dict = field(default_factory=dict)
    _sstar_e: dict = field(default_factory=dict)
    _gt: dict = field(default_factory=dict)
    _trc: dict = field(default_factory=dict)
    _reg: dict = field(default_factory=dict)

    def record(self, R: Cube) -> TreeRecord:
        return self.records[R.id]

    def sigma(self, family, p: float = 2.0) -> float:
        return sigma(self.table, family, p)


def _end_family(lat: Lattice, table: CoeffTable, stop: list) -> list:
    out = []
    for S in stop:
        stack = [S]
        while stack:
            Q = stack.pop()
            if table.is_pdoubling[Q.gen][Q.idx]:
                out.append(Q)
            else:
                stack.extend(lat.children(Q))
    return out


def _tree_cubes(lat: Lattice, R: Cube, end: list) -> list:
    end_ids = _ids(end)
    tree, stack = [], [R]
    while stack:
        Q = stack.pop()
        tree.append(Q)
        if Q.id in end_ids and Q.id != R.id:
            continue
        stack.extend(lat.children(Q))
    return tree


def build_top(lat: Lattice, table: CoeffTable, params=None) -> CoronaForest:
    """Breadth-first stopping-tree forest rooted at the support cube.

    Each root R gets HD(R) (density jump by Lambda), LD(R) (Poisson below
    delta0*Theta(R)), Stop(R) = maximal HD u LD cubes inside R, End(R) =
    maximal P-doubling cubes inside Stop cubes, and Tree(R) = cubes of R
    not strictly inside an End cube.  End cubes seed the next roots; the
    recursion bottoms out at the lattice depth, so the deepest cells stay
    in their current tree.
    """
    params = params or lat.params
    forest = CoronaForest(lat=lat, table=table, params=params,
                          roots=[], records={})
    queue = [lat.root]
    queued = {lat.root.id}
    while queue:
        R = queue.pop(0)
        hd = hd_k(lat, table, R, params.kLambda)
        ld = ld_family(lat, table, R, params)
        stop = lat.maximal_cubes([Q for Q in hd + ld if lat.contains(R, Q)])
        end = _end_family(lat, table, stop)
        forest.roots.append(R)
        forest.records[R.id] = TreeRecord(
            root=R, hd=hd, ld=ld, stop=stop, end=end,
            tree=_tree_cubes(lat, R, end))
        for E in end:
            if E.id not in queued:
                queued.add(E.id)
                queue.append(E)
    return forest


def is_mdw(forest: CoronaForest, R: Cube, params=None) -> bool:
    """Moderate decrement of Wolff energy: P-doubling and
    sigma(HD_*(R) n Stop_*(R)) >= sigma(R) / B."""
    flag = forest._mdw.get(R.id)
    if flag is None:
        params = params or forest.params
        table = forest.table
        if not table.is_pdoubling[R.gen][R.idx]:
            flag = False
        else:
            flag = bool(params.Bconst * sigma(table, hd1(forest, R))
                        >= _sigma1(table, R))
        forest._mdw[R.id] = flag
    return flag


# ---------------------------------------------------------------------------
# Enlarged cubes.

@dataclass(frozen=True)
class EnlargedCube:
    base: Cube
    j: int
    a0: float
    atoms: np.ndarray          # sorted atom indices
    cell_ids: tuple            # finer-generation cells absorbed
    mass: float
    truncated: bool            # base at the lattice floor: no finer cells

    @property
    def radius(self) -> float:
        """Canonical ball radius (1/2 + 2j/A0) * ell(base)."""
        return (0.5 + 2.0 * self.j / self.a0) * self.base.ell

    def ball(self):
        return self.base.center, self.radius


def enlarged_cube(forest: CoronaForest, R: Cube, j: int) -> EnlargedCube:
    """e_j(R): R plus the next-generation cells within set distance
    ell(R)/2 + 2j*ell' of the center.  Closed inequality, matching the
    package-wide closed-ball convention, so the sandwich invariants in
    check_enlarged hold exactly."""
    key = (R.id, j)
    enl = forest._enl.get(key)
    if enl is not None:
        return enl
    lat = forest.lat
    pos = lat.mu.positions
    A0 = forest.params.A0
    if R.gen >= lat.depth:
        enl = EnlargedCube(base=R, j=j, a0=A0,
                           atoms=np.sort(R.members.copy()),
                           cell_ids=(), mass=R.mass, truncated=True)
    else:
        ell_child = lat.generations[R.gen + 1][0].ell
        thr = 0.5 * R.ell + 2.0 * j * ell_child
        cells = []
        for Q in lat.generations[R.gen + 1]:
            d = np.linalg.norm(pos[Q.members] - R.center, axis=1).min()
            if d <= thr:
                cells.append(Q)
        atoms = np.unique(np.concatenate(
            [R.members] + [Q.members for Q in cells]))
        enl = EnlargedCube(base=R, j=j, a0=A0, atoms=atoms,
                           cell_ids=tuple(Q.id for Q in cells),
                           mass=float(lat.mu.weights[atoms].sum()),
                           truncated=False)
    forest._enl[key] = enl
    return enl


def check_enlarged(forest: CoronaForest, R: Cube, j: int) -> dict:
    """Exact sandwich and nesting checks for e_j(R).

    Asserts: all atoms of the inner ball are absorbed; absorbed atoms stay
    within the outer ball; for j <= 3A0/4 the enlargement stays inside the
    doubled cube; the dilation chain r(j) <= (1+8/A0) r(j-2) <= r(j+4)
    whenever j-2 <= A0/2.  The deep-index ball bound r(j+10) <= 3 ell/2
    needs 2(j+10) <= A0 and is reported as None when out of range.
    """
    lat, params = forest.lat, forest.params
    A0 = params.A0
    enl = enlarged_cube(forest, R, j)
    out = {"truncated": enl.truncated}
    if not enl.truncated:
        ell_child = lat.generations[R.gen + 1][0].ell
        eset = set(enl.atoms.tolist())
        inner = lat.mu.indices_in_ball(
            R.center, 0.5 * R.ell + 2 * j * ell_child)
        assert set(inner.tolist()) <= eset, "inner ball escapes e_j"
        outer = lat.mu.indices_in_ball(
            R.center, (0.5 * R.ell + (2 * j + 1) * ell_child) * (1 + 1e-12))
        assert eset <= set(outer.tolist()), "e_j escapes outer ball"
        if j <= 0.75 * A0:
            two_r = set(lambda_dilate(lat, R, 2.0).tolist())
            assert eset <= two_r, "e_j escapes the doubled cube"
            out["inside_2R"] = True

    def rad(i):
        return (0.5 + 2.0 * i / A0) * R.ell

    if 0 <= j - 2 <= A0 / 2:
        assert rad(j) <= (1 + 8.0 / A0) * rad(j - 2) * (1 + 1e-12), \
            "dilation chain (lower link)"
        assert (1 + 8.0 / A0) * rad(j - 2) <= rad(j + 4) * (1 + 1e-12), \
            "dilation chain (upper link)"
        out["chain"] = True
    out["deep_ball_bound"] = (rad(j + 10) <= 1.5 * R.ell
                              if 2 * (j + 10) <= A0 else None)
    return out


def _enlargement_grid(params):
    if params.strict_paper_constants:
        if params.A0 < 44:
            raise ValueError(
                "enlargement grid empty: strict mode needs A0 >= 44")
        return list(range(10, int(math.floor(params.A0 / 4.0)) + 1, 10)), 10
    return [1, 2, 3, 4], 1


def stop_star_enlarged(forest: CoronaForest, R: Cube, j: int) -> list:
    """Bad(R) cubes contained in e_j(R) with side at most ell(R)."""
    key = (R.id, j)
    rec = forest._sstar_e.get(key)
    if rec is None:
        enl = enlarged_cube(forest, R, j)
        mask = np.zeros(len(forest.lat.mu), dtype=bool)
        mask[enl.atoms] = True
        rec = [Q for Q in bad_family(forest, R)
               if Q.gen >= R.gen and bool(mask[Q.members].all())]
        forest._sstar_e[key] = rec
    return rec


def hd1_enlarged(forest: CoronaForest, R: Cube, j: int) -> list:
    key = (R.id, j)
    rec = forest._hd1e.get(key)
    if rec is None:
        sse = stop_star_enlarged(forest, R, j)
        hid = forest._hdstar_ids[R.id]
        rec = [Q for Q in sse if Q.id in hid]
        forest._hd1e[key] = rec
    return rec


def select_h(forest: CoronaForest, R: Cube, params=None) -> int:
    """Smallest grid index j whose enlargement keeps the high-density
    stopping energy within a factor B^(1/4) of the previous one; returns
    h = j - step.  The desk grid {1..4} runs the same ratio test with
    step 1.  If no grid index passes (possible at desk scale, where a
    single new cube can jump the energy) the argmin ratio is taken and the
    deviation logged."""
    h = forest._h.get(R.id)
    if h is not None:
        return h
    params = params or forest.params
    grid, step = _enlargement_grid(params)
    table = forest.table
    b14 = params.Bconst ** 0.25
    sig = {}

    def s_at(j):
        if j not in sig:
            sig[j] = sigma(table, hd1_enlarged(forest, R, j))
        return sig[j]

    chosen, best, best_ratio = None, None, math.inf
    for j in grid:
        lo, hi = s_at(j - step), s_at(j)
        if hi <= b14 * lo:
            chosen = j
            break
        ratio = hi / lo if lo > 0 else math.inf
        if ratio < best_ratio:
            best, best_ratio = j, ratio
    if chosen is None:
        chosen = best if best is not None else grid[0]
        forest.deviations.append(
            f"select_h: no grid index passed at {R.id}; "
            f"best ratio {best_ratio:.3g}")
    h = chosen - step
    forest._h[R.id] = h
    return h


# ---------------------------------------------------------------------------
# Generalized trees.

def _not_strictly_inside(lat: Lattice, Q: Cube, blocker_ids: set,
                         floor_gen: int) -> bool:
    cur = Q
    while cur.parent is not None and cur.gen > floor_gen:
        cur = lat.cube(cur.parent)
        if cur.id in blocker_ids:
            return False
    return True


def generalized_tree(forest: CoronaForest, R: Cube, params=None) -> dict:
    """Second-round stopping inside the enlarged cube e'(R).

    Returns the families keyed 'HD1_e', 'HD1_ep', 'HD2_ep', 'Stop2_ep',
    'TStop_ep', 'Neg_ep', 'End_ep', 'T_ep' plus diagnostics: negligible
    cubes should avoid R and keep side of order delta0^2 ell(R) or more.
    """
    rec = forest._gt.get(R.id)
    if rec is not None:
        return rec
    params = params or forest.params
    lat, table = forest.lat, forest.table
    h = select_h(forest, R, params)
    hd1_e = hd1_enlarged(forest, R, h)
    hd1_ep = hd1_enlarged(forest, R, h + 1)
    sstar_ep = stop_star_enlarged(forest, R, h + 1)
    hd1_ep_ids = _ids(hd1_ep)

    stop2 = [Q for Q in sstar_ep if Q.id not in hd1_ep_ids]
    hd2 = []
    for Q in hd1_ep:
        stop2.extend(stop_star(forest, Q))
        hd2.extend(hd1(forest, Q))
    stop2_ids = _ids(stop2)

    enl = enlarged_cube(forest, R, h + 1)
    mask = np.zeros(len(lat.mu), dtype=bool)
    mask[enl.atoms] = True
    inside = lat.cubes_inside(mask, R.gen)
    tstop = [Q for Q in inside
             if (Q.id == R.id or Q.gen > R.gen)
             and _not_strictly_inside(lat, Q, stop2_ids, R.gen)]

    pd_ids = {Q.id for Q in tstop if table.is_pdoubling[Q.gen][Q.idx]}
    neg = []
    for Q in tstop:
        cur, hit = Q, False
        while True:
            if cur.id in pd_ids:
                hit = True
                break
            if cur.parent is None:
                break
            cur = lat.cube(cur.parent)
        if not hit:
            neg.append(Q)
    neg_ids = _ids(neg)

    end = [Q for Q in stop2 if Q.id in neg_ids]
    end.extend(_end_family(lat, table,
                           [Q for Q in stop2 if Q.id not in neg_ids]))
    end_ids = _ids(end)
    t_ep = [Q for Q in inside
            if (Q.id == R.id or Q.gen > R.gen)
            and _not_strictly_inside(lat, Q, end_ids, R.gen)]

    r_atoms = set(R.members.tolist())
    neg_touch_r = sum(1 for Q in neg
                      if Q.id != R.id and not r_atoms.isdisjoint(Q.members))
    min_side_ratio = min(
        (Q.ell / (params.delta0 ** 2 * R.ell) for Q in neg if Q.id != R.id),
        default=math.inf)
    rec = {
        "HD1_e": hd1_e, "HD1_ep": hd1_ep, "HD2_ep": hd2,
        "Stop2_ep": stop2, "TStop_ep": tstop, "Neg_ep": neg,
        "End_ep": end, "T_ep": t_ep,
        "diagnostics": {"neg_cubes_meeting_R": neg_touch_r,
                        "neg_min_side_over_delta0sq_ell": min_side_ratio},
    }
    forest._gt[R.id] = rec
    return rec


def is_tractable(forest: CoronaForest, R: Cube, params=None) -> bool:
    """sigma(HD2(e'(R))) <= B * sigma(HD1(e(R)))."""
    flag = forest._trc.get(R.id)
    if flag is None:
        params = params or forest.params
        gt = generalized_tree(forest, R, params)
        flag = bool(sigma(forest.table, gt["HD2_ep"])
                    <= params.Bconst * sigma(forest.table, gt["HD1_e"]))
        forest._trc[R.id] = flag
    return flag


# ---------------------------------------------------------------------------
# Greedy ball selection (covering + coloring) shared by GH and the layers.

def _greedy_disjoint_selection(balls, scores):
    """balls: list of (center, radius); scores: per-ball weight.

    Size-ordered greedy coloring of the closed-ball intersection graph;
    the first class is exactly "select if disjoint from all previously
    selected".  Returns the indices of the best-scoring class."""
    m = len(balls)
    if m == 0:
        return []
    order = sorted(range(m), key=lambda i: (-balls[i][1], i))
    centers = np.asarray([np.asarray(balls[i][0], dtype=float)
                          for i in order])
    radii = np.asarray([balls[i][1] for i in order], dtype=float)
    gap = cdist(centers, centers) - (radii[:, None] + radii[None, :])
    color = [-1] * m
    for a in range(m):
        used = {color[b] for b in range(a) if gap[a, b] <= 0.0}
        c = 0
        while c in used:
            c += 1
        color[a] = c
    best_class, best_score = [], -math.inf
    for c in range(max(color) + 1):
        cls = [order[a] for a in range(m) if color[a] == c]
        sc = sum(scores[i] for i in cls)
        if sc > best_score:
            best_class, best_score = cls, sc
    return best_class


def _assert_disjoint(balls, idxs, tag):
    for a in range(len(idxs)):
        ca, ra = balls[idxs[a]]
        for b in range(a + 1, len(idxs)):
            cb, rb = balls[idxs[b]]
            d = float(np.linalg.norm(np.asarray(ca) - np.asarray(cb)))
            assert d > (ra + rb) * (1 - 1e-12), f"{tag}: balls intersect"


def _eball(forest, Q, k):
    """Ball of the k-th enlargement past the selected index of Q."""
    h = select_h(forest, Q)
    return enlarged_cube(forest, Q, h + k).ball()


def gh_family(forest: CoronaForest, R: Cube, params=None) -> list:
    """Good high-density selection inside HD1(e'(R)).

    Candidates are the P-doubling cubes Q of HD1(e'(R)) whose own
    high-density stopping energy reaches B^(1/2) sigma(Q); the returned
    subfamily has pairwise-disjoint second-enlargement balls and maximal
    total energy among the greedy color classes.
    """
    params = params or forest.params
    table = forest.table
    gt = generalized_tree(forest, R, params)
    cands = [Q for Q in gt["HD1_ep"]
             if table.is_pdoubling[Q.gen][Q.idx]
             and sigma(table, hd1(forest, Q))
             >= params.Bconst ** 0.5 * _sigma1(table, Q)]
    if not cands:
        return []
    balls = [_eball(forest, Q, 2) for Q in cands]
    scores = [sigma(table, hd1_enlarged(forest, Q, select_h(forest, Q)))
              for Q in cands]
    pick = _greedy_disjoint_selection(balls, scores)
    _assert_disjoint(balls, pick, "gh_family")
    return [cands[i] for i in pick]


def gh_and_generations(forest: CoronaForest, R: Cube, params=None,
                       max_gen: int | None = None) -> dict:
    """Iterate the good-high-density selection until every branch is
    tractable (or max_gen).  Returns {'GH': id -> family, 'Gen': j ->
    family, 'Trc': j -> family} and asserts that every generated cube
    stays inside the second-enlargement ball of R."""
    params = params or forest.params
    if max_gen is None:
        max_gen = params.max_gen
    gen = {0: [R]}
    trc = {0: [R] if is_tractable(forest, R, params) else []}
    gh_map = {}
    frontier = [R]
    for j in range(1, max_gen + 1):
        nxt = []
        for Q in frontier:
            if is_tractable(forest, Q, params):
                continue
            fam = gh_family(forest, Q, params)
            gh_map[Q.id] = fam
            nxt.extend(fam)
        if not nxt:
            break
        gen[j] = nxt
        trc[j] = [Q for Q in nxt if is_tractable(forest, Q, params)]
        frontier = nxt
    center, radius = _eball(forest, R, 2)
    pos = forest.lat.mu.positions
    for j, fam in gen.items():
        if j == 0:
            continue
        for Q in fam:
            dmax = float(np.linalg.norm(pos[Q.members] - center,
                                        axis=1).max())
            assert dmax <= radius * (1 + 1e-9), \
                "generated cube escapes the enlargement ball"
    return {"GH": gh_map, "Gen": gen, "Trc": trc}


# ---------------------------------------------------------------------------
# Density layers over the energy-moderate roots.

def layers(forest: CoronaForest, params=None) -> dict:
    """Bucket the qualifying roots by density exponent, peel
    inclusion-maximal layers, and pick the disjoint-ball subfamily of each
    layer using the fourth-enlargement balls.

    Returns {'F': {(j, lev): [cubes]}, 'L': {(j, lev): [cubes]}}.
    """
    params = params or forest.params
    lat, table = forest.lat, forest.table
    buckets = {}
    for R in forest.roots:
        if is_mdw(forest, R, params):
            key = int(table.BigThetaExp[R.gen][R.idx])
            buckets.setdefault(key, []).append(R)
    F, L = {}, {}
    for j, fam in sorted(buckets.items()):
        remaining = list(fam)
        lev = 1
        while remaining:
            layer = lat.maximal_cubes(remaining)
            F[(j, lev)] = layer
            layer_ids = _ids(layer)
            remaining = [Q for Q in remaining if Q.id not in layer_ids]
            balls = [_eball(forest, Q, 4) for Q in layer]
            scores = [sigma(table,
                            hd1_enlarged(forest, Q, select_h(forest, Q)))
                      for Q in layer]
            pick = _greedy_disjoint_selection(balls, scores)
            _assert_disjoint(balls, pick, f"layers {(j, lev)}")
            L[(j, lev)] = [layer[i] for i in pick]
            lev += 1
    return {"F": F, "L": L}


# ---------------------------------------------------------------------------
# Regularized stopping families.

class DFunction:
    """1-Lipschitz distance-to-tree evaluator
    d(x) = min over tree cubes of (dist(x, Q) + ell(Q)), with a floor."""

    _CHUNK = 1024

    def __init__(self, lat: Lattice, cubes, ell0: float):
        self.ell0 = float(ell0)
        self._pieces = [(lat.mu.positions[Q.members], Q.ell) for Q in cubes]

    def d(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(X.shape[0], np.inf)
        for lo in range(0, X.shape[0], self._CHUNK):
            blk = X[lo:lo + self._CHUNK]
            acc = out[lo:lo + self._CHUNK]
            for pts, ell in self._pieces:
                np.minimum(acc, cdist(blk, pts).min(axis=1) + ell, acc)
        return out

    def d_floor(self, X) -> np.ndarray:
        return np.maximum(self.d(X), self.ell0)

    def __call__(self, X) -> np.ndarray:
        return self.d_floor(X)


@dataclass
class RegFamily:
    base: Cube
    cubes: list
    ell0: float
    dfun: DFunction
    t_reg: list              # base + finer cubes of e' not strictly inside

    @property
    def ids(self) -> set:
        return _ids(self.cubes)


def _reg_from_tree(lat: Lattice, tree_cubes, ell0: float,
                   atom_idx: np.ndarray):
    """Core of the 1/60 rule: for each listed atom, the largest containing
    cube whose side is at most one sixtieth of the infimum of the floored
    distance function over the cube."""
    dfun = DFunction(lat, tree_cubes, ell0)
    d_atoms = dfun.d_floor(lat.mu.positions)
    inf_by_gen = []
    for g in range(lat.depth + 1):
        arr = np.full(len(lat.generations[g]), np.inf)
        np.minimum.at(arr, lat.membership[g], d_atoms)
        inf_by_gen.append(arr)
    chosen = {}
    for a in atom_idx:
        hit = None
        for g in range(lat.depth + 1):
            ci = lat.membership[g][a]
            if lat.generations[g][ci].ell <= inf_by_gen[g][ci] / 60.0:
                hit = lat.generations[g][ci]
                break
        if hit is None:
            raise ValueError(
                "lattice too shallow for the 1/60 regularization rule")
        chosen[hit.id] = hit
    return list(chosen.values()), dfun


def regularize(forest: CoronaForest, R: Cube, ell0: float | None = None,
               params=None) -> RegFamily:
    """Regularized cube family over the generalized tree of R.

    ell0 defaults to the smallest side in HD1(e(R)) (mass condition then
    holds trivially) and is halved while the retained high-density mass is
    under half of the total.  Raises if the lattice floor cannot satisfy
    the 1/60 rule for some atom.
    """
    key = (R.id, ell0)
    rec = forest._reg.get(key)
    if rec is not None:
        return rec
    params = params or forest.params
    lat = forest.lat
    gt = generalized_tree(forest, R, params)
    h = select_h(forest, R, params)
    hd1_e = hd1_enlarged(forest, R, h)
    if ell0 is None:
        ell0 = min((Q.ell for Q in hd1_e), default=R.ell / 60.0)
    total = float(lat.mu.weights[_atoms_union(hd1_e)].sum()) if hd1_e else 0.0
    for _ in range(64):
        kept = [Q for Q in hd1_e if Q.ell >= ell0]
        kept_mass = (float(lat.mu.weights[_atoms_union(kept)].sum())
                     if kept else 0.0)
        if kept_mass >= 0.5 * total:
            break
        ell0 *= 0.5
    enl = enlarged_cube(forest, R, h + 1)
    cubes, dfun = _reg_from_tree(lat, gt["T_ep"], ell0, enl.atoms)
    reg_ids = _ids(cubes)
    mask = np.zeros(len(lat.mu), dtype=bool)
    mask[enl.atoms] = True
    t_reg = [Q for Q in lat.cubes_inside(mask, R.gen)
             if (Q.id == R.id or Q.gen > R.gen)
             and _not_strictly_inside(lat, Q, reg_ids, R.gen)]
    rec = RegFamily(base=R, cubes=cubes, ell0=ell0, dfun=dfun, t_reg=t_reg)
    forest._reg[key] = rec
    return rec


def check_reg(forest: CoronaForest, reg: RegFamily) -> dict:
    """Disjointness, two-sided distance bounds around each regularized
    cube, neighbor comparability, and the bounded-overlap count.

    Constants are the ones provable from the 1/60 rule and the lattice's
    cell spread: 10 ell(P) <= d <= (61 A0 + 50) ell(P) on the 50 ell(P)
    ball around the center; overlap counts capped by C3_OVERLAP.
    """
    lat, params = forest.lat, forest.params
    pos = lat.mu.positions
    seen = np.zeros(len(lat.mu), dtype=np.int64)
    for P in reg.cubes:
        seen[P.members] += 1
    assert seen.max() <= 1, "regularized cubes overlap"
    upper_c = 61.0 * params.A0 + 50.0
    lo_all, hi_all = math.inf, 0.0
    for P in reg.cubes:
        idx = lat.mu.indices_in_ball(P.center, 50.0 * P.ell)
        if idx.size == 0:
            continue
        vals = reg.dfun.d_floor(pos[idx]) / P.ell
        lo_all = min(lo_all, float(vals.min()))
        hi_all = max(hi_all, float(vals.max()))
        assert vals.min() >= 10.0 * (1 - 1e-12), "distance lower bound"
        if P.parent is not None:
            assert vals.max() <= upper_c * (1 + 1e-12), "distance upper bound"
    centers = np.array([P.center for P in reg.cubes])
    sides = np.array([P.ell for P in reg.cubes])
    overlap_max = 0
    pair_ratio = 1.0
    has_root = any(P.parent is None for P in reg.cubes)
    for i in range(len(reg.cubes)):
        d = np.linalg.norm(centers - centers[i], axis=1)
        hits = d <= 50.0 * (sides + sides[i])
        overlap_max = max(overlap_max, int(hits.sum()))
        if hits.any():
            r = sides[hits] / sides[i]
            pair_ratio = max(pair_ratio, float(r.max()), float(1.0 / r.min()))
    assert overlap_max <= C3_OVERLAP, "regularized overlap count"
    if not has_root:
        assert pair_ratio <= upper_c / 10.0 * (1 + 1e-12), \
            "neighbor comparability"
    return {"count": len(reg.cubes), "overlap_max": overlap_max,
            "pair_ratio": pair_ratio, "d_over_ell": (lo_all, hi_all)}


# ---------------------------------------------------------------------------
# Auxiliary high-density scales.

def _h_families(forest: CoronaForest, R: Cube, t_reg_ids: set) -> list:
    """H_m(e'(R)) for m = 0..kLambdaStar+2: regularized-tree cubes whose
    density exponent clears the star threshold plus m."""
    params, lat, table = forest.params, forest.lat, forest.table
    return [[Q for Q in hd_k(lat, table, R, params.kLambdaStar + m)
             if Q.id in t_reg_ids]
            for m in range(params.kLambdaStar + 3)]


def _composed_enlargement(forest: CoronaForest, R: Cube, i: int,
                          j: int) -> np.ndarray:
    """Atoms of the union of e_j(Q) over the next-generation cells Q
    contained in e_i(R)."""
    lat = forest.lat
    enl = enlarged_cube(forest, R, i)
    if R.gen >= lat.depth:
        return enl.atoms
    mask = np.zeros(len(lat.mu), dtype=bool)
    mask[enl.atoms] = True
    parts = [enlarged_cube(forest, Q, j).atoms
             for Q in lat.generations[R.gen + 1] if mask[Q.members].all()]
    if not parts:
        return np.empty(0, dtype=np.intp)
    return np.unique(np.concatenate(parts))


def select_H(forest: CoronaForest, R: Cube, params=None,
             p: float = 2.0) -> tuple:
    """Pick (j, k) on the enlargement grid so that every auxiliary scale
    at index j+1 has p-energy within LambdaStar^epsN of the best scale at
    index j.  Returns (j, k, H, Hnext): H the best family at j, Hnext the
    best at j+1.  Desk grids fall back to the argmin ratio with a logged
    deviation."""
    params = params or forest.params
    table = forest.table
    reg = regularize(forest, R, None, params)
    fams = _h_families(forest, R, _ids(reg.t_reg))
    h = select_h(forest, R, params)
    grid, _step = _enlargement_grid(params)
    bound = params.LambdaStar ** params.epsN
    cache = {}

    def at(j):
        if j not in cache:
            atoms = _composed_enlargement(forest, R, h, j)
            mask = np.zeros(len(forest.lat.mu), dtype=bool)
            mask[atoms] = True
            cut = [[Q for Q in fam if mask[Q.members].all()] for fam in fams]
            cache[j] = (cut, [sigma(table, fam, p) for fam in cut])
        return cache[j]

    chosen, best, best_ratio = None, None, math.inf
    for j in grid:
        _cut, sigs = at(j)
        k = int(np.argmax(sigs))
        _cut1, sigs1 = at(j + 1)
        top = max(sigs1)
        if top <= bound * sigs[k]:
            chosen = (j, k)
            break
        ratio = top / sigs[k] if sigs[k] > 0 else math.inf
        if ratio < best_ratio:
            best, best_ratio = (j, k), ratio
    if chosen is None:
        chosen = best if best is not None else (grid[0], 0)
        forest.deviations.append(
            f"select_H: no grid index passed at {R.id}; "
            f"best ratio {best_ratio:.3g}")
    j, k = chosen
    cut, _sigs = at(j)
    cut1, sigs1 = at(j + 1)
    return j, k, cut[k], cut1[int(np.argmax(sigs1))]


# ---------------------------------------------------------------------------
# Spreading construction.

def big_riesz_value(forest: CoronaForest, R: Cube, Q: Cube) -> float:
    """|R(chi_{2R minus 2Q} mu)(x_Q)|: kernel sum over the atoms of the
    doubled root outside the doubled cube, evaluated at the cube center."""
    lat = forest.lat
    mask = np.zeros(len(lat.mu), dtype=bool)
    mask[lambda_dilate(lat, R, 2.0)] = True
    mask[lambda_dilate(lat, Q, 2.0)] = False
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return 0.0
    return float(np.linalg.norm(riesz_sum(lat.mu, Q.center, subset=idx)))


@dataclass
class SpreadTree:
    root: Cube
    top_root: Cube
    members: dict                  # id -> Cube
    s: dict                        # id -> float
    t: dict                        # id -> float (where children were formed)
    stop: dict                     # id -> cause tag 'i' | 'ii' | 'iii'
    leaves: set                    # dangling floor cubes (no stop fired)
    standins: set                  # covering children taken at the floor
    children: dict                 # id -> list of member ids
    ghat_atoms: np.ndarray
    br_checked: dict               # id -> localized transform magnitude

    def stop_cubes(self) -> list:
        return [self.members[i] for i in self.stop]

    def cause_histogram(self) -> dict:
        hist = {"i": 0, "ii": 0, "iii": 0}
        for c in self.stop.values():
            hist[c] += 1
        return hist


def _covering_children(lat: Lattice, table: CoeffTable, Q: Cube,
                       ld_ids: set):
    """Maximal strict descendants that are P-doubling or low-density;
    floor cells with neither property stand in as leaves so the family
    always covers Q exactly."""
    out, standins = [], []
    stack = list(lat.children(Q))
    while stack:
        P = stack.pop()
        if table.is_pdoubling[P.gen][P.idx] or P.id in ld_ids:
            out.append(P)
        elif P.children:
            stack.extend(lat.children(P))
        else:
            out.append(P)
            standins.append(P)
    return out, standins


def build_spread_tree(forest: CoronaForest, R0: Cube, R: Cube,
                      params=None) -> SpreadTree:
    """Mass-spreading subtree of R inside the stopping tree of R0.

    Walks covering children from R, stopping at (i) density / localized
    transform stopping cubes, (ii) cubes whose spread coefficient reaches
    their own mass, (iii) cubes losing half their mass to low-density
    children.  Spread coefficients satisfy exact conservation over
    disjoint member covers; low-density members carry s = -mass, all
    others 0 <= s <= 3 mass.
    """
    params = params or forest.params
    lat, table = forest.lat, forest.table
    rec0 = forest.records[R0.id]
    hd_ids = _ids(rec0.hd)
    ld_ids = _ids(rec0.ld)
    threshold = params.K * _theta(table, R)

    members = {R.id: R}
    s = {R.id: 0.0}
    t: dict = {}
    stop: dict = {}
    leaves: set = set()
    standins: set = set()
    child_map: dict = {}
    br_checked: dict = {}

    queue = [R]
    while queue:
        Q = queue.pop(0)
        if Q.id in hd_ids or Q.id in ld_ids:
            stop[Q.id] = "i"
            continue
        if table.is_pdoubling[Q.gen][Q.idx]:
            val = big_riesz_value(forest, R, Q)
            br_checked[Q.id] = val
            if val >= threshold:
                stop[Q.id] = "i"
                continue
        if s[Q.id] >= Q.mass:
            stop[Q.id] = "ii"
            continue
        ch, stand = _covering_children(lat, table, Q, ld_ids)
        if not ch:
            leaves.add(Q.id)
            continue
        tq = sum(P.mass for P in ch if P.id in ld_ids)
        t[Q.id] = tq
        if tq >= 0.5 * Q.mass:
            stop[Q.id] = "iii"
            continue
        child_map[Q.id] = [P.id for P in ch]
        standins.update(P.id for P in stand)
        spread = 0.0
        for P in ch:
            members[P.id] = P
            if P.id in ld_ids:
                s[P.id] = -P.mass
            else:
                s[P.id] = (s[Q.id] + tq) * P.mass / (Q.mass - tq)
            spread += s[P.id]
            queue.append(P)
        assert abs(spread - s[Q.id]) <= 1e-12 * max(Q.mass, abs(s[Q.id])), \
            "one-step conservation"

    stop_atoms = np.zeros(len(lat.mu), dtype=bool)
    for i in stop:
        stop_atoms[members[i].members] = True
    ghat = R.members[~stop_atoms[R.members]]

    st = SpreadTree(root=R, top_root=R0, members=members, s=s, t=t,
                    stop=stop, leaves=leaves, standins=standins,
                    children=child_map, ghat_atoms=np.sort(ghat),
                    br_checked=br_checked)
    for i, Q in members.items():
        if i in ld_ids:
            assert s[i] == -Q.mass, "low-density coefficient"
        else:
            assert -1e-12 * Q.mass <= s[i] <= 3.0 * Q.mass * (1 + 1e-12), \
                "spread coefficient out of range"
    return st


def spread_cover(st: SpreadTree, rng, Q: Cube | None = None) -> list:
    """Random disjoint cover of Q by tree members: at each interior cube
    either keep it or descend into its covering children."""
    if Q is None:
        Q = st.root
    out = []
    stack = [Q.id]
    while stack:
        i = stack.pop()
        if i in st.children and rng.random() < 0.7:
            stack.extend(st.children[i])
        else:
            out.append(st.members[i])
    return out


def mass_accounting(forest: CoronaForest, st: SpreadTree) -> dict:
    """Mass split of the spreading construction: cause-(i) stop mass,
    low-density mass under cause-(iii) stops, residual mass, and their
    total over the root mass (expected of order one)."""
    lat = forest.lat
    m_i = sum(st.members[i].mass for i, c in st.stop.items() if c == "i")
    m_iii_ld = sum(st.t[i] for i, c in st.stop.items() if c == "iii")
    m_ghat = float(lat.mu.weights[st.ghat_atoms].sum())
    total = m_i + m_iii_ld + m_ghat
    return {"stop_i": m_i, "stop_iii_ld": m_iii_ld, "residual": m_ghat,
            "ratio": total / st.root.mass}


# ---------------------------------------------------------------------------
# Reporting.

def forest_report(forest: CoronaForest, annotate: bool = True,
                  spread: bool = False) -> dict:
    """JSON-ready summary: per root the family sizes, energies and flags;
    optionally the enlargement index and tractability of qualifying roots
    and the stop-cause histogram of the root's own spreading subtree."""
    table = forest.table
    roots = []
    for R in forest.roots:
        rec = forest.records[R.id]
        row = {
            "id": list(R.id), "gen": R.gen, "idx": R.idx,
            "center": [float(v) for v in R.center],
            "ell": R.ell, "mass": R.mass,
            "Theta": _theta(table, R),
            "sizes": {k: len(getattr(rec, k))
                      for k in ("hd", "ld", "stop", "end", "tree")},
            "sigma_R": _sigma1(table, R),
            "sigma_hd1": sigma(table, hd1(forest, R)),
            "is_MDW": is_mdw(forest, R),
        }
        if annotate and row["is_MDW"]:
            row["h"] = select_h(forest, R)
            row["is_Trc"] = is_tractable(forest, R)
        if spread and table.is_pdoubling[R.gen][R.idx]:
            st = build_spread_tree(forest, R, R)
            row["spread_stop_causes"] = st.cause_histogram()
            row["spread_members"] = len(st.members)
            row["spread_mass_ratio"] = mass_accounting(forest, st)["ratio"]
        roots.append(row)
    return {
        "schema": "gmtriesz.forest/1",
        "n_roots": len(forest.roots),
        "n_cubes": sum(len(level) for level in forest.lat.generations),
        "tree_sizes": sorted(len(r.tree) for r in forest.records.values()),
        "deviations": list(forest.deviations),
        "roots": roots,
    }


def save_forest_report(forest: CoronaForest, path, **kw) -> None:
    with open(path, "w") as fh:
        json.dump(forest_report(forest, **kw), fh, indent=1)
