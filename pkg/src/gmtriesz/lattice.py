"""Dyadic lattices over discrete measures.

Cells are built per generation from Vitali-selected centers with
doubling-preferring radii, then assembled bottom-up: each cell is the union
of the child cells whose subtrees reach into its ball.  This keeps the four
structural invariants (partition, nesting, ball sandwich, 5B-disjointness)
exact at small scale constants, where a literal top-down "intersect with the
parent" assembly would cut child balls at parent boundaries.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree

from .measure import DiscreteMeasure, ball_masses as _ball_masses, \
    ball_masses_at as _ball_masses_at

SIDE_FACTOR = 56.0  # ell(Q) = 56 * C0 * A0^-k; B_Q = 28 B(Q)


@dataclass
class Params:
    """Every named constant of the construction, with desk-scale defaults.

    ``strict_paper_constants`` gates the assertions that only hold for
    astronomically large A0; desk mode (A0 in {4, 16, 64}, C0 = 2) keeps the
    geometry testable and reports those lemmas as diagnostics instead.
    """

    C0: float = 2.0
    A0: float = 16.0
    n: int = 1                     # growth dimension; ambient is n+1
    gamma: float = 0.9
    kLambda: int = 2
    N: int = 2
    N0: int = 1
    M0: float = 10.0
    ell0: float = 1e-6
    epsN: float = 1.0 / 15.0
    epsZ: float = 0.01
    alpha: float = 0.75            # Wolff radial exponent
    strict_paper_constants: bool = False
    Cd: float | None = None        # default 4*A0^n
    Bconst: float | None = None    # default LambdaStar^(1/(100 n))
    K: float | None = None         # Riesz stopping threshold multiplier
    radius_candidates: int = 16
    aux_candidates: int = 64
    max_gen: int = 8

    def __post_init__(self):
        if self.strict_paper_constants:
            if not self.A0 > 5000 * self.C0:
                raise ValueError("strict mode needs A0 > 5000*C0")
        elif not self.A0 >= 4:
            raise ValueError("desk mode needs A0 >= 4")
        if self.C0 <= 1:
            raise ValueError("C0 must be > 1")
        if (self.kLambda * (self.N - 1)) % self.N != 0:
            raise ValueError("kLambda*(1-1/N) must be an integer generation count")
        if self.Cd is None:
            self.Cd = 4.0 * self.A0 ** self.n
        if self.Bconst is None:
            self.Bconst = self.LambdaStar ** (1.0 / (100.0 * self.n))
        if self.K is None:
            self.K = 1e3 * self.Lambda / self.delta0 if self.strict_paper_constants else 10.0

    @property
    def Lambda(self) -> float:
        return self.A0 ** (self.kLambda * self.n)

    @property
    def kLambdaStar(self) -> int:
        return self.kLambda * (self.N - 1) // self.N

    @property
    def LambdaStar(self) -> float:
        return self.A0 ** (self.kLambdaStar * self.n)

    @property
    def delta0(self) -> float:
        return self.Lambda ** (-self.N0 - 1.0 / (2.0 * self.N))

    def scale(self, k: int) -> float:
        return self.A0 ** float(-k)

    def side(self, k: int) -> float:
        return SIDE_FACTOR * self.C0 * self.A0 ** float(-k)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["Lambda"] = self.Lambda
        d["LambdaStar"] = self.LambdaStar
        d["delta0"] = self.delta0
        d["kLambdaStar"] = self.kLambdaStar
        return d

    @classmethod
    def from_mapping(cls, mapping: dict) -> "Params":
        names = {f.name for f in cls.__dataclass_fields__.values()}
        kw = {k: v for k, v in mapping.items() if k in names}
        return cls(**kw)


@dataclass
class Cube:
    gen: int
    idx: int
    center: np.ndarray
    r_Q: float
    ell: float
    members: np.ndarray
    mass: float
    parent: tuple | None
    children: list
    is_db: bool
    r1: float = 0.0
    r2: float = 0.0
    # filled by the coefficient pass
    is_pdoubling: bool | None = None
    is_HE: bool | None = None

    @property
    def id(self) -> tuple:
        return (self.gen, self.idx)

    @property
    def radius_B(self) -> float:
        """Radius of B_Q = 28 B(Q)."""
        return 28.0 * self.r_Q

    def __repr__(self):
        return f"Cube(gen={self.gen}, idx={self.idx}, atoms={len(self.members)})"


class Lattice:
    def __init__(self, mu: DiscreteMeasure, params: Params, generations,
                 membership, build_info=None):
        self.mu = mu
        self.params = params
        self.generations = generations          # list[list[Cube]]
        self.membership = membership            # per gen: atom index -> cell idx
        self.build_info = build_info or {}
        self._by_id = {c.id: c for level in generations for c in level}
        self._sizes = [np.array([len(c.members) for c in level], dtype=np.intp)
                       for level in generations]

    @property
    def depth(self) -> int:
        return len(self.generations) - 1

    @property
    def root(self) -> Cube:
        return self.generations[0][0]

    def cube(self, cid) -> Cube:
        return self._by_id[tuple(cid)]

    def cubes(self):
        for level in self.generations:
            yield from level

    def children(self, Q: Cube):
        return [self._by_id[c] for c in Q.children]

    def parent(self, Q: Cube):
        return self._by_id[Q.parent] if Q.parent is not None else None

    def ancestors(self, Q: Cube, include_self=False):
        if include_self:
            yield Q
        while Q.parent is not None:
            Q = self._by_id[Q.parent]
            yield Q

    def descendants(self, Q: Cube, include_self=False):
        stack = [Q]
        first = True
        while stack:
            c = stack.pop()
            if include_self or not first:
                yield c
            first = False
            stack.extend(self._by_id[i] for i in reversed(c.children))

    def contains(self, outer: Cube, inner: Cube) -> bool:
        """Lattice containment inner subseteq outer (ancestor test)."""
        if inner.gen < outer.gen:
            return False
        c = inner
        while c.gen > outer.gen:
            c = self._by_id[c.parent]
        return c is outer or c.id == outer.id

    def atom_mask(self, Q: Cube) -> np.ndarray:
        mask = np.zeros(len(self.mu), dtype=bool)
        mask[Q.members] = True
        return mask

    def cubes_inside(self, atom_mask: np.ndarray, min_gen: int):
        """All cubes with gen >= min_gen whose atoms lie inside the mask."""
        out = []
        idx = np.nonzero(atom_mask)[0]
        for g in range(min_gen, self.depth + 1):
            cnt = np.bincount(self.membership[g][idx],
                              minlength=len(self.generations[g]))
            for ci in np.nonzero(cnt == self._sizes[g])[0]:
                out.append(self.generations[g][ci])
        return out

    def maximal_cubes(self, cubes):
        """Inclusion-maximal subfamily (lattice cubes nest or are disjoint)."""
        chosen = {}
        for Q in sorted(cubes, key=lambda c: (c.gen, c.idx)):
            a = Q
            hit = False
            while True:
                if a.id in chosen:
                    hit = True
                    break
                if a.parent is None:
                    break
                a = self._by_id[a.parent]
            if not hit:
                chosen[Q.id] = Q
        return list(chosen.values())

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        gens = []
        for level in self.generations:
            cells = []
            for c in level:
                cells.append({
                    "gen": c.gen, "idx": c.idx,
                    "center": [float(v) for v in c.center],
                    "r": float(c.r_Q), "ell": float(c.ell),
                    "members": [int(i) for i in c.members],
                    "mass": float(c.mass),
                    "parent": list(c.parent) if c.parent is not None else None,
                    "children": [list(k) for k in c.children],
                    "is_db": bool(c.is_db),
                    "r1": float(c.r1), "r2": float(c.r2),
                })
            gens.append(cells)
        return {"format": 1, "params": self.params.as_dict(),
                "generations": gens, "build_info": self.build_info}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, doc: dict, mu: DiscreteMeasure) -> "Lattice":
        params = Params.from_mapping(doc["params"])
        generations = []
        for cells in doc["generations"]:
            level = []
            for d in cells:
                level.append(Cube(
                    gen=d["gen"], idx=d["idx"],
                    center=np.array(d["center"], dtype=float),
                    r_Q=d["r"], ell=d["ell"],
                    members=np.array(d["members"], dtype=np.intp),
                    mass=d["mass"],
                    parent=tuple(d["parent"]) if d["parent"] is not None else None,
                    children=[tuple(k) for k in d["children"]],
                    is_db=d["is_db"], r1=d["r1"], r2=d["r2"]))
            generations.append(level)
        membership = _membership_from_generations(len(mu), generations)
        return cls(mu, params, generations, membership,
                   build_info=doc.get("build_info"))

    @classmethod
    def from_json(cls, path, mu: DiscreteMeasure) -> "Lattice":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), mu)


def _membership_from_generations(m, generations):
    out = []
    for level in generations:
        arr = np.full(m, -1, dtype=np.intp)
        for ci, c in enumerate(level):
            arr[c.members] = ci
        out.append(arr)
    return out


# ---------------------------------------------------------------------------
# Construction.

def _select_radii(mu, params, k):
    """Per-atom radius in [A0^-k, C0*A0^-k], smallest doubling candidate.

    Falls back to exactly A0^-k when no candidate ball is (100, C0)-doubling,
    which is what makes `not is_db => r_Q = A0^-k` an exact invariant.
    """
    base = params.scale(k)
    ncand = params.radius_candidates
    cand = base * (1.0 + (params.C0 - 1.0) * np.arange(ncand) / (ncand - 1))
    m = len(mu)
    radii = np.full(m, base)
    done = np.zeros(m, dtype=bool)
    for rc in cand:
        inner = _ball_masses(mu, rc)
        outer = _ball_masses(mu, 100.0 * rc)
        ok = (~done) & (outer <= params.C0 * inner)
        radii[ok] = rc
        done |= ok
        if done.all():
            break
    return radii


def _group_ball_masses(mu, radii, factor):
    """mu(B(x, factor*radii[x])) for per-atom radii, grouped by value."""
    out = np.empty(len(mu))
    for rv in np.unique(radii):
        sel = radii == rv
        masses = _ball_masses_at(mu, mu.positions[sel], factor * rv)
        out[sel] = masses
    return out


def _vitali_select(mu, radii, priority):
    """Greedy selection: balls 5B(x, r(x)) of selected centers are disjoint.

    Order is decreasing priority (ties by atom index), matching the
    measure-of-90B ordering used for the assignment priority rule.
    """
    m = len(mu)
    order = np.lexsort((np.arange(m), -priority))
    sel_idx = np.empty(m, dtype=np.intp)
    sel_pos = np.empty((m, mu.dim_ambient))
    sel_r = np.empty(m)
    ns = 0
    for i in order:
        x = mu.positions[i]
        if ns:
            d = np.linalg.norm(sel_pos[:ns] - x, axis=1)
            if np.any(d <= 5.0 * radii[i] + 5.0 * sel_r[:ns]):
                continue
        sel_idx[ns] = i
        sel_pos[ns] = x
        sel_r[ns] = radii[i]
        ns += 1
    return sel_idx[:ns].copy()


def _aux_radius_search(mu, params, k, center, r, lo, hi, masses_at_scale, scales):
    """Pick t in (lo, hi)*r minimizing thin-shell mass + boundary energy.

    Desk surrogate of the boundary-radius selection: the shell half-width is
    one child scale and the energy sum runs over a fixed number of child
    scales with A0^(-gamma(j+1)) damping.  Ties break to the smallest t.
    """
    cands = r * (lo + (hi - lo) * (np.arange(params.aux_candidates) + 0.5)
                 / params.aux_candidates)
    width = params.C0 * params.scale(k + 1)
    local = mu.indices_in_ball(center, hi * r + 2.0 * width)
    if local.size == 0:
        return float(cands[0])
    d = np.linalg.norm(mu.positions[local] - center, axis=1)
    w = mu.weights[local]
    n = mu.dim_growth
    damp = np.array([params.A0 ** (-params.gamma * (j + 1))
                     for j in range(len(scales))])
    energy_density = w * sum(
        damp[j] * (masses_at_scale[j][local] / scales[j] ** n) ** 2
        for j in range(len(scales)))
    shell = np.abs(d[None, :] - cands[:, None]) <= width
    vals = shell @ (w + energy_density)
    # argmin returns the first minimizer; candidates increase, so ties
    # break to the smallest radius
    return float(cands[int(np.argmin(vals))])


def build_lattice(mu: DiscreteMeasure, params: Params, max_depth: int) -> Lattice:
    if len(mu) < 1:
        raise ValueError("empty measure")
    m = len(mu)
    diam = mu.diameter()
    if diam > params.C0:
        raise ValueError("support diameter exceeds C0; rescale to the unit box")

    # Per-level center selection (independent per level).
    levels = []  # (centers_idx, radii_sel, r1, r2)
    singleton_since = None
    eff_depth = max_depth
    for k in range(1, max_depth + 1):
        radii = _select_radii(mu, params, k)
        priority = _group_ball_masses(mu, radii, 90.0)
        centers = _vitali_select(mu, radii, priority)
        rsel = radii[centers]
        scales = [112.0 * params.C0 * params.scale(k + 1 + j) for j in range(3)]
        masses_at_scale = [_ball_masses(mu, s) for s in scales]
        r1 = np.empty(len(centers))
        r2 = np.empty(len(centers))
        for j, ci in enumerate(centers):
            c = mu.positions[ci]
            r1[j] = _aux_radius_search(mu, params, k, c, rsel[j], 1.1, 1.2,
                                       masses_at_scale, scales)
            r2[j] = _aux_radius_search(mu, params, k, c, rsel[j], 25.0, 26.0,
                                       masses_at_scale, scales)
        levels.append((centers, rsel, r1, r2))
        if len(centers) == m and singleton_since is None:
            singleton_since = k
        if singleton_since is not None and k >= singleton_since + 2:
            eff_depth = k
            if max_depth > eff_depth:
                warnings.warn(
                    f"max_depth {max_depth} exceeds atom resolution; "
                    f"truncated to {eff_depth}", stacklevel=2)
            break
    levels = levels[:eff_depth]

    # Bottom-up assembly: deepest level assigns atoms to nearest center;
    # each coarser level adopts whole child cells, with the override that a
    # child reaching inside B(x_i, r_i) must join center i.
    K = len(levels)
    cell_members = [None] * (K + 1)   # per level k=0..K
    cell_assign_up = [None] * (K + 1)  # child cell -> parent cell index
    conflicts = 0
    if K >= 1:
        centers, radii = levels[K - 1][0], levels[K - 1][1]
        cpos = mu.positions[centers]
        assign = _nearest_center(mu.positions, cpos)
        cell_members[K] = [np.sort(np.nonzero(assign == j)[0]).astype(np.intp)
                           for j in range(len(centers))]
    for k in range(K - 1, 0, -1):
        centers, radii = levels[k - 1][0], levels[k - 1][1]
        cpos = mu.positions[centers]
        child_cells = cell_members[k + 1]
        up = np.empty(len(child_cells), dtype=np.intp)
        for ci, mem in enumerate(child_cells):
            d = np.linalg.norm(cpos[None, :, :] - mu.positions[mem][:, None, :],
                               axis=2).min(axis=0)
            claim = np.nonzero(d <= radii)[0]
            if claim.size == 1:
                up[ci] = claim[0]
            elif claim.size == 0:
                up[ci] = int(np.argmin(d))
            else:
                conflicts += 1
                up[ci] = int(claim[np.argmin(d[claim] - radii[claim])])
        cell_assign_up[k + 1] = up
        cell_members[k] = [
            np.sort(np.concatenate([child_cells[j] for j in np.nonzero(up == jj)[0]])
                    ).astype(np.intp) if np.any(up == jj) else np.empty(0, dtype=np.intp)
            for jj in range(len(centers))]
    if K >= 1:
        cell_assign_up[1] = np.zeros(len(cell_members[1]), dtype=np.intp)

    # Root cell: all atoms, centered at the atom closest to the centroid.
    centroid = np.average(mu.positions, axis=0, weights=np.maximum(mu.weights, 1e-300))
    root_atom = int(np.argmin(np.linalg.norm(mu.positions - centroid, axis=1)))
    root_center = mu.positions[root_atom]
    root_reach = float(np.linalg.norm(mu.positions - root_center, axis=1).max())
    root_r = max(1.0, root_reach)
    cell_members[0] = [np.arange(m, dtype=np.intp)]

    # Drop empty cells (possible only after claim conflicts) and materialize.
    generations = []
    index_maps = []
    for k in range(0, K + 1):
        mems = cell_members[k]
        keep = [j for j, mm in enumerate(mems) if mm.size > 0]
        order = sorted(keep, key=lambda j: int(mems[j][0]))
        index_maps.append({j: new for new, j in enumerate(order)})
        level = []
        for new, j in enumerate(order):
            if k == 0:
                center, r = root_center, root_r
                r1v = r2v = 0.0
            else:
                centers, radii, r1a, r2a = levels[k - 1]
                center, r = mu.positions[centers[j]], float(radii[j])
                r1v, r2v = float(r1a[j]), float(r2a[j])
            mm = mems[j]
            db = _is_doubling(mu, center, r, params.C0)
            level.append(Cube(gen=k, idx=new, center=center.copy(), r_Q=r,
                              ell=params.side(k), members=mm,
                              mass=float(mu.weights[mm].sum()),
                              parent=None, children=[], is_db=db,
                              r1=r1v, r2=r2v))
        generations.append(level)

    for k in range(1, K + 1):
        up = cell_assign_up[k]
        mems = cell_members[k]
        for j, mm in enumerate(mems):
            if mm.size == 0:
                continue
            ci = index_maps[k][j]
            pi = index_maps[k - 1][int(up[j])]
            child = generations[k][ci]
            par = generations[k - 1][pi]
            child.parent = par.id
            par.children.append(child.id)

    membership = _membership_from_generations(m, generations)
    info = {"requested_depth": max_depth, "effective_depth": len(generations) - 1,
            "claim_conflicts": conflicts}
    return Lattice(mu, params, generations, membership, build_info=info)


def _nearest_center(points, centers):
    m = points.shape[0]
    out = np.empty(m, dtype=np.intp)
    chunk = max(1, (1 << 22) // max(1, centers.shape[0]))
    for i in range(0, m, chunk):
        d = np.linalg.norm(points[i:i + chunk, None, :] - centers[None, :, :], axis=2)
        out[i:i + chunk] = np.argmin(d, axis=1)
    return out


def _is_doubling(mu, center, r, C0):
    return mu.mass_in_ball_xr(center, 100.0 * r) <= C0 * mu.mass_in_ball_xr(center, r)


# ---------------------------------------------------------------------------
# Queries.

def neighborhood_mass(lat: Lattice, Q: Cube, l: int) -> float:
    """Mass of N_l(Q): atoms within A0^-(k+l) of the boundary of Q."""
    mu = lat.mu
    scale = lat.params.scale(Q.gen + l)
    inside = lat.atom_mask(Q)
    out_idx = np.nonzero(~inside)[0]
    in_idx = Q.members
    total = 0.0
    if out_idx.size and in_idx.size:
        tree_in = cKDTree(mu.positions[in_idx])
        d_out, _ = tree_in.query(mu.positions[out_idx])
        total += float(mu.weights[out_idx[d_out < scale]].sum())
        tree_out = cKDTree(mu.positions[out_idx])
        d_in, _ = tree_out.query(mu.positions[in_idx])
        total += float(mu.weights[in_idx[d_in < scale]].sum())
    return total


def lambda_cubes(lat: Lattice, Q: Cube, lam: float):
    """Same-generation cells P with dist(x_Q, P) <= lam * ell(Q)."""
    mu = lat.mu
    level = lat.generations[Q.gen]
    memb = lat.membership[Q.gen]
    d = np.linalg.norm(mu.positions - Q.center, axis=1)
    cell_min = np.full(len(level), np.inf)
    np.minimum.at(cell_min, memb, d)
    return [level[i] for i in np.nonzero(cell_min <= lam * Q.ell)[0]]


def lambda_dilate(lat: Lattice, Q: Cube, lam: float) -> np.ndarray:
    cubes = lambda_cubes(lat, Q, lam)
    return np.sort(np.concatenate([c.members for c in cubes])).astype(np.intp)


def boundary_families(lat: Lattice, Q: Cube):
    """(interior, exterior) cells whose doubled balls cross the boundary of Q."""
    mu = lat.mu
    inside = lat.atom_mask(Q)
    out_idx = np.nonzero(~inside)[0]
    interior, exterior = [], []
    for g in range(Q.gen, lat.depth + 1):
        for P in lat.generations[g]:
            r2b = 2.0 * P.radius_B
            in_P = inside[P.members[0]] and lat.contains(Q, P)
            if in_P:
                if out_idx.size:
                    d = np.linalg.norm(mu.positions[out_idx] - P.center, axis=1)
                    if np.any(d <= r2b):
                        interior.append(P)
            else:
                if not np.any(inside[P.members]):
                    d = np.linalg.norm(mu.positions[Q.members] - P.center, axis=1)
                    if np.any(d <= r2b):
                        exterior.append(P)
    return interior, exterior


# ---------------------------------------------------------------------------
# Structural invariant checks (tests assert on the returned report).

def check_lattice(lat: Lattice) -> dict:
    mu = lat.mu
    m = len(mu)
    rep = {"partition": True, "nesting": True, "sandwich_lower": True,
           "sandwich_upper": True, "five_b_disjoint": True,
           "nondb_radius_exact": True, "dilate_bound": True,
           "claim_conflicts": lat.build_info.get("claim_conflicts", 0)}
    for k, level in enumerate(lat.generations):
        seen = np.zeros(m, dtype=bool)
        for c in level:
            if np.any(seen[c.members]):
                rep["partition"] = False
            seen[c.members] = True
            d = np.linalg.norm(mu.positions - c.center, axis=1)
            mask = lat.atom_mask(c)
            if np.any(d[~mask] <= c.r_Q):
                rep["sandwich_lower"] = False
            if np.any(d[mask] > 28.0 * c.r_Q):
                rep["sandwich_upper"] = False
            if not c.is_db and c.r_Q != lat.params.scale(k):
                rep["nondb_radius_exact"] = False
            if k > 0:
                par = lat.parent(c)
                if not np.all(lat.atom_mask(par)[c.members]):
                    rep["nesting"] = False
            if c.children:
                kid_union = np.sort(np.concatenate(
                    [lat.cube(i).members for i in c.children]))
                if not np.array_equal(kid_union, c.members):
                    rep["nesting"] = False
        if not seen.all():
            rep["partition"] = False
        if len(level) > 1:
            ctr = np.array([c.center for c in level])
            rr = np.array([c.r_Q for c in level])
            chunk = max(1, (1 << 21) // len(level))
            for i0 in range(0, len(level), chunk):
                dd = np.linalg.norm(ctr[i0:i0 + chunk, None, :] - ctr[None, :, :],
                                    axis=2)
                bad = dd <= 5.0 * (rr[i0:i0 + chunk, None] + rr[None, :])
                for row in range(bad.shape[0]):
                    bad[row, i0 + row] = False
                if np.any(bad):
                    rep["five_b_disjoint"] = False
    # lambda-dilate enclosure on a couple of representative cells per level
    for level in lat.generations:
        for c in level[:3]:
            for lam in (1.0, 2.0, 4.0):
                atoms = lambda_dilate(lat, c, lam)
                d = np.linalg.norm(mu.positions[atoms] - c.center, axis=1)
                if np.any(d > (lam + 0.5) * c.ell):
                    rep["dilate_bound"] = False
    rep["ok"] = all(v for kk, v in rep.items()
                    if kk not in ("claim_conflicts",))
    return rep
