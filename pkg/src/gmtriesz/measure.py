"""Weighted atom clouds in R^{n+1} with fast closed-ball queries.

A measure is a finite cloud of weighted points.  ``dim_growth`` (the n in
R^{n+1}) is the exponent used for all density quotients mu(B)/r^n; the
ambient dimension is always n+1.  Continuous test measures are represented
by atomization at a fixed generation depth.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

# Ball membership is closed (|x-c| <= r) everywhere in this package: it makes
# mass_in_ball right-continuous in r and keeps lattice inclusion tests exact.
_TREE_SLACK = 1e-9

ATOM_CAP_DEFAULT = 1 << 20


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ValueError(f"ball radius must be positive, got {self.radius}")


class DiscreteMeasure:
    """Immutable weighted point cloud with a k-d tree ball-query index."""

    def __init__(self, positions, weights, dim_growth, meta=None):
        positions = np.ascontiguousarray(positions, dtype=float)
        weights = np.ascontiguousarray(weights, dtype=float)
        if positions.ndim != 2:
            raise ValueError("positions must be a (m, dim) array")
        if positions.shape[0] == 0:
            raise ValueError("measure needs at least one atom")
        if weights.shape != (positions.shape[0],):
            raise ValueError("weights shape mismatch")
        if not np.all(np.isfinite(positions)):
            raise ValueError("non-finite atom position")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and nonnegative")
        if not (1 <= dim_growth < positions.shape[1] + 1):
            raise ValueError("need 1 <= dim_growth <= dim_ambient - 1")
        positions.flags.writeable = False
        weights.flags.writeable = False
        self.positions = positions
        self.weights = weights
        self.dim_ambient = positions.shape[1]
        self.dim_growth = int(dim_growth)
        self.total_mass = float(weights.sum())
        self.meta = dict(meta) if meta else {}
        self._tree = None
        self._min_gap = None
        self._coincident = False
        self._diameter = None

    def __len__(self):
        return self.positions.shape[0]

    def __repr__(self):
        return (f"DiscreteMeasure({len(self)} atoms in R^{self.dim_ambient}, "
                f"n={self.dim_growth}, mass={self.total_mass:.6g})")

    @property
    def spatial_index(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def indices_in_ball(self, center, radius) -> np.ndarray:
        """Atom indices in the closed ball, exact against a linear scan."""
        center = np.asarray(center, dtype=float)
        if radius < 0:
            return np.empty(0, dtype=np.intp)
        # The tree pre-filters with a slightly inflated radius; the exact
        # closed-ball test below is the one that decides membership.
        cand = self.spatial_index.query_ball_point(
            center, radius * (1.0 + _TREE_SLACK) + _TREE_SLACK * 1e-3)
        cand = np.asarray(sorted(cand), dtype=np.intp)
        if cand.size == 0:
            return cand
        d = np.linalg.norm(self.positions[cand] - center, axis=1)
        return cand[d <= radius]

    def mass_in_ball_xr(self, center, radius) -> float:
        idx = self.indices_in_ball(center, radius)
        return float(self.weights[idx].sum())

    def restrict(self, indices) -> "DiscreteMeasure":
        indices = np.asarray(indices, dtype=np.intp)
        return DiscreteMeasure(self.positions[indices], self.weights[indices],
                               self.dim_growth)

    def min_gap(self) -> float:
        """Smallest positive distance between distinct atoms."""
        if self._min_gap is None:
            if len(self) == 1:
                self._min_gap = 0.0
            else:
                d, _ = self.spatial_index.query(self.positions, k=2)
                gaps = d[:, 1]
                self._coincident = bool(np.any(gaps == 0.0))
                pos = gaps[gaps > 0]
                self._min_gap = float(pos.min()) if pos.size else 0.0
        return self._min_gap

    def has_coincident_atoms(self) -> bool:
        if len(self) <= 1:
            return False
        self.min_gap()
        return self._coincident

    def diameter(self) -> float:
        if self._diameter is None:
            self._diameter = support_diameter(self.positions)
        return self._diameter


def mass_in_ball(mu: DiscreteMeasure, b: Ball) -> float:
    return mu.mass_in_ball_xr(b.center, b.radius)


_DENSE_BALL_LIMIT = 8192


def _weighted_ball_sums_dense(positions, points, r_eff, w, chunk=1024):
    """Chunked dense-distance variant; beats neighbor lists whenever the
    atom count is moderate because no per-ball list is materialized."""
    from scipy.spatial.distance import cdist
    out = np.empty(points.shape[0])
    for a in range(0, points.shape[0], chunk):
        d = cdist(points[a:a + chunk], positions)
        out[a:a + chunk] = (d <= r_eff) @ w
    return out


def _weighted_ball_sums(tree, points, r_eff, w, chunk=2048):
    """Sum of w over the closed r_eff-ball around each query point,
    chunked so the flattened neighbor lists stay bounded in memory."""
    from itertools import chain
    out = np.empty(points.shape[0])
    for a in range(0, points.shape[0], chunk):
        lists = tree.query_ball_point(points[a:a + chunk], r_eff,
                                      workers=-1)
        lens = np.fromiter(map(len, lists), dtype=np.intp,
                           count=len(lists))
        total = int(lens.sum())
        if total == 0:
            out[a:a + chunk] = 0.0
            continue
        flat = np.fromiter(chain.from_iterable(lists), dtype=np.intp,
                           count=total)
        seg = np.zeros(len(lists), dtype=np.intp)
        np.cumsum(lens[:-1], out=seg[1:])
        # sentinel guards reduceat against trailing empty segments
        vals = np.concatenate([w[flat], [0.0]])
        sums = np.add.reduceat(vals, seg)[:len(lists)]
        sums[lens == 0] = 0.0
        out[a:a + chunk] = sums
    return out


def ball_masses(mu: DiscreteMeasure, radius: float) -> np.ndarray:
    """mu(closed B(x, radius)) at every atom x, in one bulk pass."""
    if radius >= mu.diameter():
        return np.full(len(mu), mu.total_mass)
    tree = mu.spatial_index
    r_eff = radius * (1.0 + _TREE_SLACK) + _TREE_SLACK * 1e-3
    w = mu.weights
    if float(w.max()) == float(w.min()):
        cnt = tree.query_ball_point(mu.positions, r_eff, return_length=True)
        # uniform weights: the inflated query can only add boundary ties,
        # which belong to the closed ball anyway up to the radius slack
        return cnt * float(w[0])
    if len(mu) <= _DENSE_BALL_LIMIT:
        return _weighted_ball_sums_dense(mu.positions, mu.positions,
                                         r_eff, w)
    return _weighted_ball_sums(tree, mu.positions, r_eff, w)


def ball_masses_at(mu: DiscreteMeasure, points: np.ndarray, radius: float) -> np.ndarray:
    """mu(closed B(p, radius)) for each query point p on the support."""
    if radius >= mu.diameter():
        return np.full(points.shape[0], mu.total_mass)
    tree = mu.spatial_index
    r_eff = radius * (1.0 + _TREE_SLACK) + _TREE_SLACK * 1e-3
    w = mu.weights
    if float(w.max()) == float(w.min()):
        cnt = tree.query_ball_point(points, r_eff, return_length=True)
        return cnt * float(w[0])
    pts = np.atleast_2d(points)
    if len(mu) <= _DENSE_BALL_LIMIT:
        return _weighted_ball_sums_dense(mu.positions, pts, r_eff, w)
    return _weighted_ball_sums(tree, pts, r_eff, w)


def support_diameter(positions: np.ndarray) -> float:
    """Exact diameter of a point set (pairwise over hull vertices when big)."""
    m = positions.shape[0]
    if m <= 1:
        return 0.0
    pts = positions
    if m > 4096:
        try:
            from scipy.spatial import ConvexHull
            pts = positions[ConvexHull(positions).vertices]
        except Exception:
            # Degenerate (e.g. collinear) input: extremes along coordinate
            # axes and the principal axis contain the diameter endpoints.
            c = positions.mean(axis=0)
            x = positions - c
            _, _, vt = np.linalg.svd(x, full_matrices=False)
            proj = x @ vt.T
            cand = set()
            for j in range(proj.shape[1]):
                cand.add(int(np.argmin(proj[:, j])))
                cand.add(int(np.argmax(proj[:, j])))
            pts = positions[sorted(cand)]
    best = 0.0
    chunk = 2048
    for i in range(0, pts.shape[0], chunk):
        block = pts[i:i + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def growth_constant(mu: DiscreteMeasure) -> float:
    """Grid estimate of the polynomial-growth constant sup mu(B(x,r))/r^n.

    The sup runs over atom centers and ratio-2 dyadic radii between the
    minimal interpoint gap and the diameter; it is a lower bound for the
    true sup.  A single atom has unbounded density at small r, so the
    degenerate case returns +inf.
    """
    if len(mu) == 1:
        return math.inf
    gap = mu.min_gap()
    diam = mu.diameter()
    if gap == 0.0:
        return math.inf
    radii = []
    r = diam
    while r >= gap:
        radii.append(r)
        r /= 2.0
    if not radii:
        radii = [gap]
    n = mu.dim_growth
    best = 0.0
    for r in radii:
        pairs = mu.spatial_index.query_ball_point(
            mu.positions, r * (1.0 + _TREE_SLACK) + _TREE_SLACK * 1e-3)
        for i, cand in enumerate(pairs):
            cand = np.asarray(cand, dtype=np.intp)
            d = np.linalg.norm(mu.positions[cand] - mu.positions[i], axis=1)
            mass = float(mu.weights[cand[d <= r]].sum())
            q = mass / r ** n
            if q > best:
                best = q
    return best


# ---------------------------------------------------------------------------
# Generators.  All supports live in [0,1]^{n+1}; weights are exact dyadic
# rationals where representable.

GENERATOR_KINDS = ("segment", "plane_patch", "lipschitz_graph",
                   "cantor_line", "cantor4corner")


def generate(kind: str, depth: int, params: dict | None = None,
             atom_cap: int = ATOM_CAP_DEFAULT) -> DiscreteMeasure:
    if depth < 0:
        raise ValueError("depth must be >= 0")
    params = dict(params or {})
    if kind == "segment":
        m = 1 << depth
        _check_cap(m, atom_cap)
        x = (np.arange(m) + 0.5) / m
        pos = np.column_stack([x, np.zeros(m)])
        w = np.full(m, 2.0 ** -depth)
        return DiscreteMeasure(pos, w, dim_growth=1, meta={"kind": kind, "depth": depth})
    if kind == "plane_patch":
        side = 1 << depth
        m = side * side
        _check_cap(m, atom_cap)
        g = (np.arange(side) + 0.5) / side
        xx, yy = np.meshgrid(g, g, indexing="ij")
        pos = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(m)])
        w = np.full(m, 4.0 ** -depth)
        return DiscreteMeasure(pos, w, dim_growth=2, meta={"kind": kind, "depth": depth})
    if kind == "lipschitz_graph":
        amp = float(params.get("amplitude", 0.3))
        freq = float(params.get("frequency", 3.0))
        if amp * freq > 1.0:
            raise ValueError("amplitude*frequency must be <= 1 (1-Lipschitz graph)")
        m = 1 << depth
        _check_cap(m, atom_cap)
        t = (np.arange(m) + 0.5) / m
        y = amp * np.sin(freq * t)
        slope = amp * freq * np.cos(freq * t)
        pos = np.column_stack([t, y])
        arclen = np.sqrt(1.0 + slope ** 2) / m
        w = arclen / arclen.sum()
        return DiscreteMeasure(pos, w, dim_growth=1,
                               meta={"kind": kind, "depth": depth,
                                     "amplitude": amp, "frequency": freq})
    if kind == "cantor_line":
        # Ratio-1/4 linear Cantor set: keep the two end quarters of each
        # interval.  Growth dimension 1/2, so the n=1 density climbs one
        # octave per construction level; this is the density-spike workhorse.
        m = 1 << depth
        _check_cap(m, atom_cap)
        x = np.zeros(1)
        length = 1.0
        for _ in range(depth):
            length /= 4.0
            x = np.concatenate([x, x + 3.0 * length])
        x = np.sort(x) + length / 2.0
        pos = np.column_stack([x, np.zeros(m)])
        w = np.full(m, 2.0 ** -depth)
        return DiscreteMeasure(pos, w, dim_growth=1, meta={"kind": kind, "depth": depth})
    if kind == "cantor4corner":
        m = 4 ** depth
        _check_cap(m, atom_cap)
        xy = np.zeros((1, 2))
        length = 1.0
        codes = np.zeros((1, 0), dtype=np.int8)
        for _ in range(depth):
            length /= 4.0
            off = np.array([[0.0, 0.0], [3 * length, 0.0],
                            [0.0, 3 * length], [3 * length, 3 * length]])
            k = xy.shape[0]
            xy = (xy[:, None, :] + off[None, :, :]).reshape(4 * k, 2)
            codes = np.concatenate(
                [np.repeat(codes, 4, axis=0),
                 np.tile(np.arange(4, dtype=np.int8), k)[:, None]], axis=1)
        pos = xy + length / 2.0
        w = np.full(m, 4.0 ** -depth)
        return DiscreteMeasure(pos, w, dim_growth=1,
                               meta={"kind": kind, "depth": depth,
                                     "codes": codes})
    raise ValueError(f"unknown generator kind {kind!r}")


def _check_cap(m, cap):
    if m > cap:
        raise ValueError(f"atom count {m} exceeds cap {cap}")


def two_density_segment(depth: int, eps: float = 1e-4) -> DiscreteMeasure:
    """Unit density on [0,1/2], density eps on (1/2,1].

    Not one of the public generator kinds; used to exercise low-density
    stopping cubes and mass spreading in tests and reports.
    """
    m = 1 << depth
    x = (np.arange(m) + 0.5) / m
    pos = np.column_stack([x, np.zeros(m)])
    w = np.where(x < 0.5, 2.0 ** -depth, eps * 2.0 ** -depth)
    return DiscreteMeasure(pos, w, dim_growth=1,
                           meta={"kind": "two_density_segment", "depth": depth,
                                 "eps": eps})


# ---------------------------------------------------------------------------
# File formats: CSV `x_0,...,x_n,weight` (header optional) and JSON
# {"dim": d, "n": n, "atoms": [{"p": [...], "w": ...}]}.

def save_measure(mu: DiscreteMeasure, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"x_{i}" for i in range(mu.dim_ambient)] + ["weight"])
            for p, w in zip(mu.positions, mu.weights):
                wr.writerow([repr(float(v)) for v in p] + [repr(float(w))])
    else:
        doc = {"dim": mu.dim_ambient, "n": mu.dim_growth,
               "atoms": [{"p": [float(v) for v in p], "w": float(w)}
                         for p, w in zip(mu.positions, mu.weights)]}
        with open(path, "w") as fh:
            json.dump(doc, fh)


def load_measure(path, dim_growth: int | None = None) -> DiscreteMeasure:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    continue  # header line
        arr = np.asarray(rows, dtype=float)
        if arr.ndim != 2 or arr.shape[1] < 3:
            raise ValueError(f"bad measure CSV {path}")
        n = dim_growth if dim_growth is not None else arr.shape[1] - 2
        return DiscreteMeasure(arr[:, :-1], arr[:, -1], dim_growth=n)
    with open(path) as fh:
        doc = json.load(fh)
    pos = np.asarray([a["p"] for a in doc["atoms"]], dtype=float)
    w = np.asarray([a["w"] for a in doc["atoms"]], dtype=float)
    n = doc.get("n", dim_growth if dim_growth is not None else pos.shape[1] - 1)
    return DiscreteMeasure(pos, w, dim_growth=n)
