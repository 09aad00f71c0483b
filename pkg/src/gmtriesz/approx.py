"""Piecewise approximations of a discrete measure by small carriers.

Two constructions are provided.  The first replaces each cube of a
regularized family by the uniform measure of the same mass on the
half-radius ball around its center.  The second replaces each stopped
cube of a spread tree by a flat disk orthogonal to the last coordinate
axis, weighted by the spread-adjusted mass, and keeps the unstopped
floor cells as residual atomic pieces so the total mass of the
approximation equals the mass of the tree root exactly.

Carriers are discretized by deterministic quadrature grids with equal
weights per piece; the resolution is a configuration knob.  Pieces of
zero mass (fully spread low-density stops) are omitted from the atom
arrays but recorded in the metadata.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .measure import DiscreteMeasure, save_measure, load_measure
from .riesz import pv_riesz_at_atoms

__all__ = [
    "ApproxPiece",
    "ApproxMeasure",
    "eta_from_reg",
    "eta_disks",
    "check_ad_regular",
    "growth_profile",
    "riesz_on_eta",
    "save_approx",
    "load_approx",
]


@dataclass(frozen=True)
class ApproxPiece:
    """One carrier of the approximating measure.

    kind is "ball" for a full-dimensional half-radius ball, "disk" for a
    flat disk orthogonal to the last axis, "residual" for a piece that
    reuses the original atoms of an unstopped floor cell.  start/count
    index the atom block of the piece inside the parent measure.
    """

    kind: str
    cube: tuple | None
    mass: float
    center: tuple
    radius: float
    start: int
    count: int


@dataclass
class ApproxMeasure:
    positions: np.ndarray
    weights: np.ndarray
    dim_growth: int
    pieces: list
    kind: str
    meta: dict = field(default_factory=dict)
    _disc: DiscreteMeasure | None = field(
        default=None, init=False, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def dim_ambient(self) -> int:
        return self.positions.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def piece_atoms(self, i: int) -> slice:
        p = self.pieces[i]
        return slice(p.start, p.start + p.count)

    def piece_mass(self, i: int) -> float:
        return float(self.weights[self.piece_atoms(i)].sum())

    def as_discrete(self) -> DiscreteMeasure:
        if self._disc is None:
            self._disc = DiscreteMeasure(
                self.positions.copy(), self.weights.copy(), self.dim_growth,
                meta={"approx_kind": self.kind})
        return self._disc


def _phase(idx: int) -> float:
    # deterministic per-piece stagger in [0, 1); zero for the first piece
    # so single-carrier grids stay exactly symmetric
    return (0.37 * idx) % 1.0


def _ball_points(dim: int, radius: float, min_points: int,
                 phase: float) -> np.ndarray:
    """Deterministic grid of at least min_points points filling the ball
    of the given radius around the origin, one weight class per piece."""
    if dim == 1:
        m = max(int(min_points), 1)
        step = 2.0 * radius / m
        # stagger stays below a quarter step so points remain interior
        xs = -radius + (np.arange(m) + 0.5 + 0.25 * phase) * step
        return xs[:, None]
    if dim == 2:
        m = max(int(math.ceil(math.sqrt(min_points))), 1)
        pts = []
        for i in range(m):
            c = 2 * i + 1
            r = radius * math.sqrt((i + 0.5) / m)
            ang = 2.0 * math.pi * (np.arange(c) + 0.5 + 0.37 * phase) / c
            ang = ang + 2.39996 * i          # decorrelate successive rings
            pts.append(np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1))
        return np.concatenate(pts, axis=0)
    g = max(int(math.ceil((2.0 * min_points) ** (1.0 / dim))), 2)
    while True:
        step = 2.0 * radius / g
        lin = -radius + (np.arange(g) + 0.5 + 0.2 * phase) * step
        grid = np.stack(np.meshgrid(*([lin] * dim), indexing="ij"),
                        axis=-1).reshape(-1, dim)
        grid = grid[np.linalg.norm(grid, axis=1) <= radius]
        if len(grid) >= min_points:
            return grid
        g += 1


def _disk_points(center: np.ndarray, radius: float, n: int,
                 min_points: int, phase: float) -> np.ndarray:
    # n-disk through the center, orthogonal to the last coordinate axis
    rel = _ball_points(n, radius, min_points, phase)
    pts = np.tile(np.asarray(center, dtype=float), (len(rel), 1))
    pts[:, :n] += rel
    return pts


def eta_from_reg(reg, mu: DiscreteMeasure,
                 min_points: int = 64) -> ApproxMeasure:
    """Uniform measure of mass mu(P) on the half-radius ball around the
    center of each regularized cube P, discretized on a deterministic
    grid of at least min_points atoms per piece."""
    cubes = getattr(reg, "cubes", reg)
    dim = mu.dim_ambient
    pos_blocks, w_blocks, pieces = [], [], []
    start = 0
    for k, P in enumerate(cubes):
        m = float(P.mass)
        assert m >= 0.0, "regularized cube with negative mass"
        r = 0.5 * float(P.r_Q)
        pts = np.asarray(P.center, dtype=float) + _ball_points(
            dim, r, min_points, _phase(k))
        pos_blocks.append(pts)
        w_blocks.append(np.full(len(pts), m / len(pts)))
        pieces.append(ApproxPiece("ball", tuple(P.id), m,
                                  tuple(np.asarray(P.center, float)), r,
                                  start, len(pts)))
        start += len(pts)
    if not pieces:
        raise ValueError("regularized family is empty")
    am = ApproxMeasure(np.concatenate(pos_blocks),
                       np.concatenate(w_blocks),
                       mu.dim_growth, pieces, "reg")
    am.meta["source_mass"] = float(sum(p.mass for p in pieces))
    return am


def eta_disks(lat, st, min_points: int = 64) -> ApproxMeasure:
    """Disk approximation attached to a spread tree.

    Every stopped cube Q contributes a flat n-disk through its center
    with radius half of max(r(Q), side(Q)), carrying mass mu(Q) + s(Q);
    low-density stops carry exactly zero and are omitted.  The side
    floor keeps the disk at cell scale even when the non-doubling ball
    radius is much smaller.  Every dangling floor cell keeps its own
    atoms, reweighted to carry mu(Q) + s(Q), so the piece masses
    telescope to the mass of the tree root.
    """
    mu = lat.mu
    n = mu.dim_growth
    pos_blocks, w_blocks, pieces = [], [], []
    omitted = []
    start = 0
    order = sorted(st.stop) + sorted(st.leaves)
    stopped = set(st.stop)
    for qid in order:
        Q = st.members[qid]
        m = float(Q.mass) + float(st.s[qid])
        assert m > -1e-12 * max(float(Q.mass), 1.0), \
            "negative spread-adjusted mass"
        if qid in stopped:
            if m <= 0.0:
                omitted.append(tuple(qid))
                continue
            r = 0.5 * max(float(Q.r_Q), float(getattr(Q, "ell", 0.0)))
            pts = _disk_points(Q.center, r, n, min_points, _phase(len(pieces)))
            pos_blocks.append(pts)
            w_blocks.append(np.full(len(pts), m / len(pts)))
            pieces.append(ApproxPiece("disk", tuple(qid), m,
                                      tuple(np.asarray(Q.center, float)), r,
                                      start, len(pts)))
        else:
            idx = np.asarray(Q.members)
            w = mu.weights[idx] * (m / float(Q.mass))
            pos_blocks.append(mu.positions[idx])
            w_blocks.append(w)
            pieces.append(ApproxPiece("residual", tuple(qid), m,
                                      tuple(np.asarray(Q.center, float)), 0.0,
                                      start, len(idx)))
        start += len(pos_blocks[-1])
    if not pieces:
        raise ValueError("spread tree produced no carriers")
    am = ApproxMeasure(np.concatenate(pos_blocks),
                       np.concatenate(w_blocks),
                       n, pieces, "disks")
    am.meta["omitted"] = omitted
    am.meta["source_mass"] = float(st.root.mass) + float(st.s[st.root.id])
    return am


def check_ad_regular(am: ApproxMeasure, theta_ref: float,
                     samples: int = 48, radii: int = 12,
                     r_min: float = None, r_max: float = None) -> tuple:
    """Sampled regularity band of the approximation.

    Returns (c_low, c_high) with c_low <= eta(B(x, r)) / (theta_ref r^n)
    <= c_high over a deterministic grid of centers on the support and
    geometrically spaced radii between the smallest carrier size and the
    support diameter.  Pass r_min/r_max to restrict the scale window,
    e.g. to the tree's own scale range; regularity of a finitely carried
    measure is only meaningful above its carrier resolution."""
    if not am.pieces:
        raise ValueError("approximating measure has no pieces")
    if theta_ref <= 0:
        raise ValueError("theta_ref must be positive")
    disc = am.as_discrete()
    lo = np.min(am.positions, axis=0)
    hi = np.max(am.positions, axis=0)
    diam = float(np.linalg.norm(hi - lo))
    if r_min is None:
        scales = [p.radius for p in am.pieces if p.radius > 0]
        r_min = min(scales) if scales else max(disc.min_gap(), 1e-12 * diam)
    if r_max is None:
        r_max = max(diam, 2.0 * r_min)
    r_max = max(float(r_max), 2.0 * float(r_min))
    rs = np.geomspace(r_min, r_max, radii)
    idx = np.unique(np.linspace(0, len(am) - 1, samples).astype(int))
    ratios = []
    for i in idx:
        x = am.positions[i]
        for r in rs:
            ratios.append(disc.mass_in_ball_xr(x, float(r))
                          / (theta_ref * float(r) ** am.dim_growth))
    return float(min(ratios)), float(max(ratios))


def growth_profile(am: ApproxMeasure, samples: int = 48,
                   radii: int = 12) -> float:
    """Largest eta(B(x, r)) / r^n over sampled atoms and radii at least
    the carrier size of the atom's piece."""
    if not am.pieces:
        raise ValueError("approximating measure has no pieces")
    disc = am.as_discrete()
    lo = np.min(am.positions, axis=0)
    hi = np.max(am.positions, axis=0)
    diam = max(float(np.linalg.norm(hi - lo)), 1e-30)
    scales = [p.radius for p in am.pieces if p.radius > 0]
    floor = min(scales) if scales else max(disc.min_gap(), 1e-12 * diam)
    sup = 0.0
    for p in am.pieces:
        pick = np.unique(np.linspace(
            p.start, p.start + p.count - 1,
            max(1, samples // len(am.pieces))).astype(int))
        r_lo = p.radius if p.radius > 0 else floor
        rs = np.geomspace(r_lo, max(diam, 2 * r_lo), radii)
        for i in pick:
            x = am.positions[i]
            for r in rs:
                sup = max(sup, disc.mass_in_ball_xr(x, float(r))
                          / float(r) ** am.dim_growth)
    return float(sup)


def riesz_on_eta(am: ApproxMeasure, backend: str = "direct",
                 accuracy: float = 1e-3):
    """Principal-value transform of the approximation at its own atoms
    and the L2 norm of the field against the approximation."""
    disc = am.as_discrete()
    fld = pv_riesz_at_atoms(disc, backend=backend, accuracy=accuracy)
    return fld, math.sqrt(fld.norm_sq(disc))


def save_approx(am: ApproxMeasure, path) -> None:
    """Measure atoms go to the usual measure format; the piece table goes
    to a sidecar next to it."""
    path = Path(path)
    save_measure(am.as_discrete(), path)
    side = {
        "schema": "gmtriesz.approx/1",
        "kind": am.kind,
        "dim_growth": am.dim_growth,
        "meta": {k: v for k, v in am.meta.items()},
        "pieces": [
            {"kind": p.kind,
             "cube": list(p.cube) if p.cube is not None else None,
             "mass": p.mass,
             "center": list(p.center),
             "radius": p.radius,
             "start": p.start,
             "count": p.count}
            for p in am.pieces
        ],
    }
    with open(path.with_suffix(".pieces.json"), "w") as f:
        json.dump(side, f, indent=1)


def load_approx(path) -> ApproxMeasure:
    path = Path(path)
    with open(path.with_suffix(".pieces.json")) as f:
        side = json.load(f)
    disc = load_measure(path, dim_growth=side["dim_growth"])
    pieces = [ApproxPiece(d["kind"],
                          tuple(d["cube"]) if d["cube"] is not None else None,
                          float(d["mass"]), tuple(d["center"]),
                          float(d["radius"]), int(d["start"]),
                          int(d["count"]))
              for d in side["pieces"]]
    am = ApproxMeasure(disc.positions, disc.weights, side["dim_growth"],
                       pieces, side["kind"], dict(side.get("meta", {})))
    return am
