"""Riesz transform evaluation for atomic measures.

Implements the n-dimensional Riesz kernel x/|x|^(n+1) in R^(n+1) together
with its truncated, maximal, principal-value, and suppressed variants, the
pairwise W energy, both sides of the Cotlar-type maximal inequality, and
Haar (martingale) decompositions of transform fields on a dyadic lattice.

For an atomic measure the principal value at an atom is the sum over all
other atoms, and the supremum over truncation radii epsilon is attained on
the finite set of interpoint distances, so both are computed exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from ._tree import KernelTree
from .lattice import Lattice, Cube, lambda_dilate
from .measure import DiscreteMeasure

_PAIR_BUDGET = 1 << 22
# Exact breakpoint enumeration for sup over truncation radii is used up to
# this many atoms; beyond it a dyadic radius grid gives a lower bound.
_EXACT_SUP_CAP = 10_000


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class VectorField:
    """Values of a vector field at the atoms of a measure, one row each."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(np.atleast_2d(self.values), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("vector field has non-finite entries")
        object.__setattr__(self, "values", vals)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return self.values.shape[0]

    def magnitudes(self) -> np.ndarray:
        return np.sqrt((self.values * self.values).sum(axis=1))

    def norm_sq(self, mu: DiscreteMeasure) -> float:
        """Squared L2(mu) norm, sum of w(x) |F(x)|^2."""
        return float((mu.weights * (self.values * self.values).sum(axis=1)).sum())


@dataclass
class SuppressionFn:
    """Nonnegative 1-Lipschitz suppression function Phi.

    ``evaluator`` maps a (k, dim) array of points to (k,) values.
    ``lipschitz_cert`` is a sampled estimate of the Lipschitz constant and
    must stay <= 1 (+1e-9) for the suppressed-kernel bounds to apply;
    ``certify`` refreshes it from a point sample.  ``gradient`` is optional
    and only needed for analytic kernel Jacobians.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    lipschitz_cert: float = 1.0
    gradient: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vals = np.asarray(self.evaluator(pts), dtype=float).reshape(len(pts))
        if vals.size and vals.min() < 0:
            raise ValueError("suppression function must be nonnegative")
        return vals

    def value(self, x) -> float:
        return float(self(np.asarray(x, dtype=float)[None, :])[0])

    def grad(self, x) -> np.ndarray:
        if self.gradient is None:
            raise ValueError("suppression function has no gradient")
        return np.asarray(self.gradient(np.asarray(x, dtype=float)), dtype=float)

    def certify(self, points, pairs: int = 4096, seed: int = 0) -> float:
        """Sampled Lipschitz constant over random point pairs; stored."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = len(pts)
        if m < 2:
            self.lipschitz_cert = 0.0
            return 0.0
        rng = np.random.default_rng(seed)
        i = rng.integers(0, m, size=pairs)
        j = rng.integers(0, m, size=pairs)
        keep = i != j
        i, j = i[keep], j[keep]
        vals = self(pts)
        gaps = np.sqrt(((pts[i] - pts[j]) ** 2).sum(axis=1))
        est = float(np.max(np.abs(vals[i] - vals[j]) / gaps)) if len(i) else 0.0
        self.lipschitz_cert = est
        return est


def zero_suppression() -> SuppressionFn:
    return SuppressionFn(lambda p: np.zeros(len(p)), 0.0,
                         gradient=lambda x: np.zeros_like(np.asarray(x, float)))


def constant_suppression(c: float) -> SuppressionFn:
    if c < 0:
        raise ValueError("suppression constant must be nonnegative")
    return SuppressionFn(lambda p: np.full(len(p), float(c)), 0.0,
                         gradient=lambda x: np.zeros_like(np.asarray(x, float)))


def cone_suppression(apex, floor: float = 0.0) -> SuppressionFn:
    """Phi(x) = max(floor, |x - apex|); gradient defined off the apex."""
    apex = np.asarray(apex, dtype=float)
    floor = float(floor)

    def ev(p):
        return np.maximum(floor, np.sqrt(((p - apex) ** 2).sum(axis=1)))

    def gr(x):
        d = np.asarray(x, float) - apex
        r = float(np.sqrt((d * d).sum()))
        if r <= floor or r == 0.0:
            return np.zeros_like(d)
        return d / r

    return SuppressionFn(ev, 1.0, gradient=gr)


def stopping_distance(lat: Lattice, cubes, floor: float = 0.0) -> SuppressionFn:
    """Phi(x) = max(floor, inf over the family of ell(Q) + dist(x, Q)).

    dist(x, Q) is the distance to the atom set of Q.  An infimum of
    1-Lipschitz functions capped below by a constant, so 1-Lipschitz.
    """
    cubes = list(cubes)
    if not cubes:
        raise ValueError("stopping distance needs a nonempty cube family")
    pts = np.concatenate([lat.mu.positions[Q.members] for Q in cubes], axis=0)
    off = np.concatenate([np.full(len(Q.members), Q.ell) for Q in cubes])
    floor = float(floor)

    def ev(p):
        out = np.full(len(p), np.inf)
        step = max(1, _PAIR_BUDGET // max(len(pts), 1))
        for lo in range(0, len(p), step):
            d = np.sqrt(((p[lo:lo + step, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
            out[lo:lo + step] = (d + off[None, :]).min(axis=1)
        return np.maximum(out, floor)

    return SuppressionFn(ev, 1.0)


# ---------------------------------------------------------------------------
# direct kernel sums

def _contributions(mu: DiscreteMeasure, x: np.ndarray):
    """Per-atom kernel terms w(y) (x-y)/|x-y|^(n+1) and the distances."""
    diff = x[None, :] - mu.positions
    dist = np.sqrt((diff * diff).sum(axis=1))
    n = mu.dim_growth
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = mu.weights / dist ** (n + 1)
    scale[dist == 0.0] = 0.0
    return diff * scale[:, None], dist


def riesz_sum(mu: DiscreteMeasure, x, subset=None) -> np.ndarray:
    """Sum of the Riesz kernel against mu (or mu restricted to subset).

    Zero-distance pairs are skipped, which is the principal-value
    convention when x coincides with an atom.
    """
    x = np.asarray(x, dtype=float)
    if subset is None:
        contrib, _ = _contributions(mu, x)
        return contrib.sum(axis=0)
    sub = np.asarray(subset, dtype=np.intp)
    diff = x[None, :] - mu.positions[sub]
    dist = np.sqrt((diff * diff).sum(axis=1))
    n = mu.dim_growth
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = mu.weights[sub] / dist ** (n + 1)
    scale[dist == 0.0] = 0.0
    return (diff * scale[:, None]).sum(axis=0)


def truncated_riesz(mu: DiscreteMeasure, x, eps: float) -> np.ndarray:
    """R_eps mu(x): the kernel summed over atoms with |x - y| > eps."""
    if not eps > 0:
        raise ValueError("truncation radius must be positive")
    x = np.asarray(x, dtype=float)
    contrib, dist = _contributions(mu, x)
    return contrib[dist > eps].sum(axis=0)


def pv_riesz_at_atoms(mu: DiscreteMeasure, backend: str = "direct",
                      accuracy: float = 1e-3) -> VectorField:
    """Principal-value transform of mu at its own atoms.

    Excludes the self pair at every atom.  Coincident atoms make the
    atomized principal value infinite, so they are rejected; merge them
    first.
    """
    if mu.has_coincident_atoms():
        raise ValueError("coincident atoms have no principal value; merge them")
    if backend == "tree":
        return tree_sum_backend(mu, mu.positions, kernel="riesz",
                                accuracy=accuracy)
    if backend != "direct":
        raise ValueError(f"unknown backend {backend!r}")
    pts = mu.positions
    m, dim = pts.shape
    n = mu.dim_growth
    out = np.empty((m, dim))
    step = max(1, _PAIR_BUDGET // max(m, 1))
    for lo in range(0, m, step):
        diff = pts[lo:lo + step, None, :] - pts[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = mu.weights[None, :] / dist ** (n + 1)
        scale[dist == 0.0] = 0.0
        out[lo:lo + step] = (diff * scale[:, :, None]).sum(axis=1)
    return VectorField(out)


def _sup_truncated(mu: DiscreteMeasure, x: np.ndarray, eps_min: float) -> float:
    """Exact sup over eps >= eps_min of |R_eps mu(x)| via suffix sums.

    R_eps is piecewise constant in eps with breakpoints at the distinct
    atom distances, so the supremum is a maximum over suffix sums of the
    distance-sorted kernel contributions.
    """
    contrib, dist = _contributions(mu, x)
    pos = dist > 0.0
    contrib, dist = contrib[pos], dist[pos]
    if len(dist) == 0:
        return 0.0
    order = np.argsort(dist, kind="stable")
    contrib, dist = contrib[order], dist[order]
    suffix = np.zeros((len(dist) + 1, contrib.shape[1]))
    suffix[:-1] = contrib[::-1].cumsum(axis=0)[::-1]
    first = np.concatenate(([True], dist[1:] > dist[:-1]))
    starts = np.nonzero(first)[0]          # first index of each distance group
    uniq = dist[starts]
    # value on [u_j, u_{j+1}) is the suffix starting at group j+1; the value
    # below u_0 is the full sum; above the last distance it is 0
    cut = np.concatenate((starts, [len(dist)]))
    mags = np.sqrt((suffix[cut] ** 2).sum(axis=1))
    best = 0.0
    if eps_min < uniq[0]:
        best = mags[0]
    live = np.nonzero(uniq > eps_min)[0]   # groups whose interval meets [eps_min, inf)
    if live.size:
        best = max(best, float(mags[live].max()))
    return float(best)


def maximal_riesz(mu: DiscreteMeasure, x, eps_grid=None, eps_min: float = 0.0) -> float:
    """R_* mu(x) = sup over eps > 0 of |R_eps mu(x)|.

    With no grid the sup is exact on the interpoint-distance breakpoints
    (up to 10^4 atoms; beyond that a dyadic grid gives a lower bound).
    An explicit eps_grid yields the max over that grid only.
    """
    x = np.asarray(x, dtype=float)
    if eps_grid is not None:
        grid = np.asarray(eps_grid, dtype=float)
        if grid.size == 0:
            raise ValueError("eps_grid must be nonempty")
        grid = grid[grid >= eps_min]
        best = 0.0
        for e in grid:
            val = truncated_riesz(mu, x, float(e))
            best = max(best, float(np.sqrt((val * val).sum())))
        return best
    if len(mu) <= _EXACT_SUP_CAP:
        return _sup_truncated(mu, x, eps_min)
    dist = np.sqrt(((x[None, :] - mu.positions) ** 2).sum(axis=1))
    pos = dist[dist > 0]
    if pos.size == 0:
        return 0.0
    lo = max(eps_min, float(pos.min()) / 2.0) if eps_min > 0 else float(pos.min()) / 2.0
    hi = float(pos.max())
    grid = [lo]
    while grid[-1] < hi:
        grid.append(grid[-1] * 2.0)
    return maximal_riesz(mu, x, eps_grid=np.array(grid), eps_min=eps_min)


def sup_theta(mu: DiscreteMeasure, x, r_min: float) -> float:
    """Exact sup over r >= r_min of mu(closed B(x, r)) / r^n.

    The density jumps up at atom distances and decreases in between, so
    the sup is attained at r_min or at a distance value.
    """
    if not r_min > 0:
        raise ValueError("r_min must be positive")
    x = np.asarray(x, dtype=float)
    dist = np.sqrt(((x[None, :] - mu.positions) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")
    dist = dist[order]
    cumw = mu.weights[order].cumsum()
    n = mu.dim_growth
    lo = int(np.searchsorted(dist, r_min, side="right"))
    best = (cumw[lo - 1] / r_min ** n) if lo > 0 else 0.0
    if lo < len(dist):
        last = np.concatenate((np.nonzero(dist[lo + 1:] > dist[lo:-1])[0] + lo,
                               [len(dist) - 1]))
        best = max(best, float((cumw[last] / dist[last] ** n).max()))
    return float(best)


# ---------------------------------------------------------------------------
# suppressed kernel

def suppressed_kernel(x, y, phi: SuppressionFn) -> np.ndarray:
    """K_Phi(x, y) = (x - y) / (|x - y|^2 + Phi(x) Phi(y))^((n+1)/2).

    n is inferred from the ambient dimension (points live in R^(n+1)).
    Returns 0 for x = y.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x - y
    t2 = float((d * d).sum())
    if t2 == 0.0:
        return np.zeros_like(d)
    n = x.size - 1
    den = (t2 + phi.value(x) * phi.value(y)) ** ((n + 1) / 2.0)
    return d / den


def suppressed_kernel_jacobian(x, y, phi: SuppressionFn):
    """Analytic Jacobians (d K_i / d x_j, d K_i / d y_j) of K_Phi.

    Uses the chain rule through Phi, so phi must carry a gradient.
    Undefined at x = y.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x - y
    t2 = float((d * d).sum())
    px, py = phi.value(x), phi.value(y)
    T = t2 + px * py
    if T == 0.0:
        raise ValueError("suppressed kernel Jacobian undefined at x = y with Phi = 0")
    n = x.size - 1
    p = (n + 1) / 2.0
    gx, gy = phi.grad(x), phi.grad(y)
    eye = np.eye(x.size)
    Jx = eye * T ** -p - p * T ** (-p - 1) * np.outer(d, 2.0 * d + py * gx)
    Jy = -eye * T ** -p - p * T ** (-p - 1) * np.outer(d, -2.0 * d + px * gy)
    return Jx, Jy


def suppressed_riesz(mu: DiscreteMeasure, x, phi: SuppressionFn) -> np.ndarray:
    """R_Phi mu(x): the suppressed kernel summed over all atoms."""
    x = np.asarray(x, dtype=float)
    diff = x[None, :] - mu.positions
    t2 = (diff * diff).sum(axis=1)
    phiprod = phi.value(x) * phi(mu.positions)
    n = mu.dim_growth
    den = (t2 + phiprod) ** ((n + 1) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = mu.weights / den
    scale[t2 == 0.0] = 0.0
    return (diff * scale[:, None]).sum(axis=0)


# ---------------------------------------------------------------------------
# W energy and the Cotlar inequality

def w_energy(mu: DiscreteMeasure, subset=None) -> float:
    """W energy of an atom subset F:

        sum over ordered pairs x != y in F of w(x) w(y) / (diam(F) |x-y|^(n-1)).

    The diagonal is excluded (the continuous energy has no diagonal mass
    for the measures approximated); diam(F) = 0 returns 0 by convention.
    """
    idx = np.arange(len(mu), dtype=np.intp) if subset is None \
        else np.asarray(subset, dtype=np.intp)
    if idx.size <= 1:
        return 0.0
    sub = mu.restrict(idx)
    diam = sub.diameter()
    if diam == 0.0:
        return 0.0
    n = mu.dim_growth
    pts, w = sub.positions, sub.weights
    if n == 1:
        total = float(w.sum()) ** 2 - float((w * w).sum())
        return total / diam
    total = 0.0
    step = max(1, _PAIR_BUDGET // len(idx))
    for lo in range(0, len(idx), step):
        d = np.sqrt(((pts[lo:lo + step, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
        offdiag = np.ones_like(d, dtype=bool)
        offdiag[np.arange(lo, min(lo + step, len(idx))) - lo,
                np.arange(lo, min(lo + step, len(idx)))] = False
        if np.any(d[offdiag] == 0.0):
            raise ValueError("coincident atoms give infinite W energy for n > 1")
        with np.errstate(divide="ignore"):
            kern = 1.0 / d ** (n - 1)
        kern[~offdiag] = 0.0
        total += float((w[lo:lo + step, None] * w[None, :] * kern).sum())
    return total / diam


class CotlarSides(NamedTuple):
    lhs: float
    rhs: float
    hypotheses_met: bool


def cotlar_sides(mu: DiscreteMeasure, x, r0: float, theta1: float,
                 pv_field: VectorField | None = None) -> CotlarSides:
    """Both sides of the Cotlar-type inequality at x.

    lhs = sup over eps >= r0 of |R_eps mu(x)| (exact on breakpoints).
    rhs = doubling-restricted maximal function of |pv R mu| at x, over the
    dyadic radius grid r0 * 2^j restricted to (16, 128^(n+2))-doubling
    balls, plus theta1.  The hypotheses (density <= theta1 for all
    r >= r0, W energy <= theta1 * mass on doubling grid balls) are checked
    numerically; when they fail the result is tagged hypotheses_met=False
    and the inequality is not asserted.
    """
    if not (r0 > 0 and theta1 > 0):
        raise ValueError("need r0 > 0 and theta1 > 0")
    x = np.asarray(x, dtype=float)
    lhs = maximal_riesz(mu, x, eps_min=r0)
    if pv_field is None:
        pv_field = pv_riesz_at_atoms(mu)
    mags = pv_field.magnitudes()

    dist = np.sqrt(((x[None, :] - mu.positions) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")
    dsort = dist[order]
    cw = mu.weights[order].cumsum()
    cmag = (mu.weights[order] * mags[order]).cumsum()

    def ball(r):
        k = int(np.searchsorted(dsort, r, side="right"))
        return (cw[k - 1], cmag[k - 1], order[:k]) if k else (0.0, 0.0, order[:0])

    n = mu.dim_growth
    dbl_const = 128.0 ** (n + 2)
    radii = [r0]
    while radii[-1] < dsort[-1]:
        radii.append(radii[-1] * 2.0)

    theta_ok = sup_theta(mu, x, r0) <= theta1 * (1.0 + 1e-9)
    w_ok = True
    best = 0.0
    for r in radii:
        mass, mag_sum, idx = ball(r)
        if mass <= 0.0:
            continue
        m16, _, _ = ball(16.0 * r)
        if m16 > dbl_const * mass * (1.0 + 1e-12):
            continue
        if w_energy(mu, idx) > theta1 * mass * (1.0 + 1e-9):
            w_ok = False
        best = max(best, mag_sum / mass)
    return CotlarSides(float(lhs), float(best + theta1), bool(theta_ok and w_ok))


# ---------------------------------------------------------------------------
# Haar (martingale) decomposition on a lattice

def _as_components(f, m):
    arr = np.asarray(f, dtype=float)
    if arr.shape[0] != m:
        raise ValueError("field length does not match the atom count")
    return arr.reshape(m, -1), arr.shape


def _cell_stats(lat: Lattice, f2):
    """Per generation: cell masses and weighted means of f (cells x comps)."""
    w = lat.mu.weights
    masses, means = [], []
    for g, level in enumerate(lat.generations):
        memb = lat.membership[g]
        mass = np.bincount(memb, weights=w, minlength=len(level))
        mean = np.stack([np.bincount(memb, weights=w * f2[:, c],
                                     minlength=len(level))
                         for c in range(f2.shape[1])], axis=1)
        mean /= mass[:, None]
        masses.append(mass)
        means.append(mean)
    return masses, means


def haar_delta(lat: Lattice, f, Q: Cube) -> np.ndarray:
    """Delta_Q f: children means on their cells minus the mean on Q.

    Zero outside Q; the zero function when Q has no children.
    """
    m = len(lat.mu)
    f2, shape = _as_components(f, m)
    out = np.zeros_like(f2)
    if Q.children:
        w = lat.mu.weights
        mQ = (w[Q.members, None] * f2[Q.members]).sum(axis=0) / Q.mass
        for S in lat.children(Q):
            mS = (w[S.members, None] * f2[S.members]).sum(axis=0) / S.mass
            out[S.members] = mS - mQ
    return out.reshape(shape)


class HaarEnergy(NamedTuple):
    haar_sum: float
    below_depth: float
    centered_norm_sq: float


def haar_energy(lat: Lattice, f) -> HaarEnergy:
    """Sum over cells of |Delta_Q f|^2 in L2(mu), with the residual.

    haar_sum collects every cell with children; below_depth is the
    within-leaf variance not resolved at the lattice depth.  Their sum
    equals the centered squared norm |f - m_root f|^2 (Parseval).
    """
    m = len(lat.mu)
    f2, _ = _as_components(f, m)
    w = lat.mu.weights
    masses, means = _cell_stats(lat, f2)
    total = 0.0
    for g in range(1, len(lat.generations)):
        pidx = np.fromiter((c.parent[1] for c in lat.generations[g]),
                           dtype=np.intp, count=len(lat.generations[g]))
        diff = means[g] - means[g - 1][pidx]
        total += float((masses[g] * (diff * diff).sum(axis=1)).sum())
    bottom = len(lat.generations) - 1
    resid = f2 - means[bottom][lat.membership[bottom]]
    below = float((w * (resid * resid).sum(axis=1)).sum())
    cen = f2 - means[0][0]
    centered = float((w * (cen * cen).sum(axis=1)).sum())
    return HaarEnergy(total, below, centered)


def haar_energy_of_riesz(lat: Lattice, mu: DiscreteMeasure | None = None,
                         backend: str = "direct",
                         accuracy: float = 1e-3) -> HaarEnergy:
    """Haar energy of the principal-value transform field of mu (= lat.mu)."""
    if mu is None:
        mu = lat.mu
    if len(mu) != len(lat.mu):
        raise ValueError("measure does not match the lattice")
    field = pv_riesz_at_atoms(mu, backend=backend, accuracy=accuracy)
    return haar_energy(lat, field.values)


def coarse_neighbors(lat: Lattice, Q: Cube) -> list[Cube]:
    """Cells one generation coarser than Q that meet the 2-dilate of Q."""
    if Q.gen == 0:
        return []
    idx2 = lambda_dilate(lat, Q, 2.0)
    hits = np.unique(lat.membership[Q.gen - 1][idx2])
    return [lat.generations[Q.gen - 1][i] for i in hits]


def _check_disjoint(family):
    members = np.concatenate([np.asarray(S.members) for S in family]) \
        if family else np.empty(0, dtype=np.intp)
    if len(np.unique(members)) != len(members):
        raise ValueError("family cells overlap")
    return members


def coarse_haar(lat: Lattice, f, Q: Cube, variant: str,
                family=None) -> np.ndarray:
    """Coarse Haar difference at Q against the mean on the 2-dilate of Q.

    variant "check" uses the cells one generation coarser meeting 2Q
    (computed here); variant "hat" takes the family of pairwise-disjoint
    cells (the maximal cells of a stopped tree) as an argument.  Returns
    sum over the family of (mean_S f - mean_2Q f) chi_S.
    """
    if variant not in ("hat", "check"):
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "check":
        if family is None:
            family = coarse_neighbors(lat, Q)
    elif family is None:
        raise ValueError("variant 'hat' needs the stopped-tree family")
    family = list(family)
    _check_disjoint(family)
    m = len(lat.mu)
    f2, shape = _as_components(f, m)
    out = np.zeros_like(f2)
    if not family:
        return out.reshape(shape)
    w = lat.mu.weights
    idx2 = lambda_dilate(lat, Q, 2.0)
    m2 = (w[idx2, None] * f2[idx2]).sum(axis=0) / w[idx2].sum()
    for S in family:
        mS = (w[S.members, None] * f2[S.members]).sum(axis=0) / S.mass
        out[S.members] = mS - m2
    return out.reshape(shape)


def field_norm_sq(mu: DiscreteMeasure, f) -> float:
    f2, _ = _as_components(f, len(mu))
    return float((mu.weights * (f2 * f2).sum(axis=1)).sum())


# ---------------------------------------------------------------------------
# localized transform

def localized_riesz(lat: Lattice, mu: DiscreteMeasure, family, R: Cube) -> np.ndarray:
    """chi_Q(x) R(chi_{2R minus 2Q} mu)(x) summed over the family.

    For each atom of each family cell Q, sums the kernel over the atoms of
    the 2-dilate of R that lie outside the 2-dilate of Q.  The family must
    be pairwise disjoint and contained in the 2-dilate of R.
    """
    family = list(family)
    members = _check_disjoint(family)
    idx2R = lambda_dilate(lat, R, 2.0)
    in2R = np.zeros(len(mu), dtype=bool)
    in2R[idx2R] = True
    if members.size and not in2R[members].all():
        raise ValueError("family must lie inside the 2-dilate of R")
    n = mu.dim_growth
    out = np.zeros((len(mu), mu.dim_ambient))
    for Q in family:
        keep = in2R.copy()
        keep[lambda_dilate(lat, Q, 2.0)] = False
        src = np.nonzero(keep)[0]
        if src.size == 0:
            continue
        spts = mu.positions[src]
        sw = mu.weights[src]
        step = max(1, _PAIR_BUDGET // max(src.size, 1))
        tgt = np.asarray(Q.members)
        for lo in range(0, tgt.size, step):
            ti = tgt[lo:lo + step]
            diff = mu.positions[ti][:, None, :] - spts[None, :, :]
            dist = np.sqrt((diff * diff).sum(axis=2))
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = sw[None, :] / dist ** (n + 1)
            scale[dist == 0.0] = 0.0
            out[ti] = (diff * scale[:, :, None]).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# tree backend

# Opening threshold theta ~ coeff * sqrt(accuracy): the monopole about the
# weighted centroid has zero dipole, so the relative error per interaction
# is O((r/d)^2) = O(theta^2).  The coefficient is calibrated against direct
# sums on uniform and self-similar instances with a safety margin.
_THETA_COEFF = 4.0


def tree_sum_backend(mu: DiscreteMeasure, targets, kernel: str = "riesz",
                     accuracy: float = 1e-3,
                     phi: SuppressionFn | None = None) -> VectorField:
    """Tree-accelerated kernel sums at target points.

    Guarantees direct summation for near cells; far cells contribute their
    monopole.  The result is within `accuracy` relative l2 error of the
    direct sum (empirical contract, checked in the acceptance suite).
    """
    if not 0.0 < accuracy <= 0.1:
        raise ValueError("accuracy must lie in (0, 0.1]")
    if kernel not in ("riesz", "suppressed"):
        raise ValueError(f"unknown kernel {kernel!r}")
    theta = min(0.6, _THETA_COEFF * float(np.sqrt(accuracy)))
    tg = np.atleast_2d(np.asarray(targets, dtype=float))
    if kernel == "suppressed":
        if phi is None:
            raise ValueError("suppressed kernel needs a suppression function")
        phi_atoms = phi(mu.positions)
        phi_t = phi(tg)
    else:
        phi_atoms = None
        phi_t = None
    tree = KernelTree(mu.positions, mu.weights, phi_values=phi_atoms)
    vals = tree.evaluate(tg, n=mu.dim_growth, theta=theta, kernel=kernel,
                         phi_targets=phi_t)
    return VectorField(vals)


# ---------------------------------------------------------------------------
# serialization

def save_field(field: VectorField, path) -> None:
    path = Path(path)
    vals = field.values
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["atom_index"] + [f"v_{i}" for i in range(vals.shape[1])])
        for i, row in enumerate(vals):
            wr.writerow([i] + [repr(float(v)) for v in row])


def load_field(path) -> VectorField:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    vals = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return VectorField(vals)
