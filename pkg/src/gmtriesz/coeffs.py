"""Per-cube and per-ball scalar coefficients.

Densities, flatness numbers, Poisson-type sums, Wolff energies and the
derived classification flags.  Everything here is a pure function of the
measure and the lattice; the CoeffTable caches the per-cube records.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .measure import Ball, DiscreteMeasure, ball_masses, mass_in_ball
from .lattice import Cube, Lattice, Params, lambda_dilate


def theta(mu: DiscreteMeasure, b: Ball) -> float:
    """Density mu(B)/r(B)^n."""
    return mass_in_ball(mu, b) / b.radius ** mu.dim_growth


def _weighted_moments(pos, w):
    W = float(w.sum())
    if W <= 0.0:
        return W, None, None
    c = (w[:, None] * pos).sum(axis=0) / W
    d = pos - c
    M = (w[:, None] * d).T @ d
    return W, c, M


def beta2_plane(mu: DiscreteMeasure, b: Ball):
    """(beta, centroid, unit normal) of the best-fitting affine n-plane.

    The objective is quadratic in the plane offset and a Rayleigh quotient
    in the normal, so the bottom singular pair of the sqrt-weighted
    centered data matrix gives the exact infimum: plane through the
    centroid, normal to the bottom right-singular vector.  Working on the
    data matrix rather than its Gram matrix keeps the absolute error of
    the bottom singular value at eps * sigma_max, so near-flat clouds
    report beta at true collinearity-defect scale instead of eps * r.
    """
    idx = mu.indices_in_ball(b.center, b.radius)
    up = np.zeros(mu.dim_ambient)
    up[-1] = 1.0
    if idx.size == 0:
        return 0.0, np.asarray(b.center, dtype=float), up
    pos = mu.positions[idx]
    w = mu.weights[idx]
    W = float(w.sum())
    if W <= 0.0 or idx.size == 1:
        return 0.0, pos[0].copy() if idx.size else np.asarray(b.center), up
    c = (w[:, None] * pos).sum(axis=0) / W
    y = np.sqrt(w)[:, None] * (pos - c)
    _, svals, vt = np.linalg.svd(y, full_matrices=True)
    sig = float(svals[-1]) if len(svals) == pos.shape[1] else 0.0
    n = mu.dim_growth
    beta_sq = sig * sig / b.radius ** (n + 2)
    return math.sqrt(beta_sq), c, vt[-1]


def beta2(mu: DiscreteMeasure, b: Ball) -> float:
    return beta2_plane(mu, b)[0]


def beta2_profile(mu: DiscreteMeasure, centers: np.ndarray,
                  radii: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """beta^2 and ball mass for a grid of centers x radii in one sweep.

    ``radii`` has shape (ncenters, nradii).  Uses per-center sorted-distance
    prefix moments so the whole sweep costs one distance sort per center
    instead of one eigenproblem per ball.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    radii = np.asarray(radii, dtype=float)
    if radii.ndim == 1:
        radii = np.broadcast_to(radii, (centers.shape[0], radii.size))
    nc, nr = radii.shape
    m = len(mu)
    D = mu.dim_ambient
    n = mu.dim_growth
    beta_sq = np.zeros((nc, nr))
    masses = np.zeros((nc, nr))
    pos, w = mu.positions, mu.weights
    # the cumulative second-moment block is (chunk, m, D, D); keep it small
    chunk = max(1, (1 << 20) // max(m * D * D, 1))
    for i0 in range(0, nc, chunk):
        cs = centers[i0:i0 + chunk]
        d = np.linalg.norm(pos[None, :, :] - cs[:, None, :], axis=2)
        order = np.argsort(d, axis=1)
        dsort = np.take_along_axis(d, order, axis=1)
        wsort = w[order]
        # moments in coordinates centered at the query point: the central
        # second moment is translation invariant, and small balls keep
        # entries of size r^2 instead of cancelling against coordinate^2
        psort = pos[order] - cs[:, None, :]
        cw = np.cumsum(wsort, axis=1)
        cwp = np.cumsum(wsort[:, :, None] * psort, axis=1)
        cwpp = np.cumsum(wsort[:, :, None, None]
                         * (psort[:, :, :, None] * psort[:, :, None, :]), axis=1)
        for row in range(cs.shape[0]):
            # closed-ball count per radius
            cnt = np.searchsorted(dsort[row],
                                  radii[i0 + row] * (1 + 1e-12), side="right")
            for jr, k in enumerate(cnt):
                if k == 0:
                    continue
                W = cw[row, k - 1]
                masses[i0 + row, jr] = W
                if k == 1 or W <= 0:
                    continue
                S1 = cwp[row, k - 1]
                S2 = cwpp[row, k - 1]
                M = S2 - np.outer(S1, S1) / W
                lam = float(np.linalg.eigvalsh(M)[0])
                r = radii[i0 + row, jr]
                beta_sq[i0 + row, jr] = max(lam, 0.0) / r ** (n + 2)
    return beta_sq, masses


# ---------------------------------------------------------------------------
# Coefficient table over a lattice.

@dataclass
class CoeffTable:
    lat: Lattice
    alpha: float
    theta2B: list = field(default_factory=list)     # per gen arrays
    BigTheta: list = field(default_factory=list)
    BigThetaExp: list = field(default_factory=list)  # integer bucket exponents
    P: list = field(default_factory=list)
    beta2_2B: list = field(default_factory=list)
    E4Q: list = field(default_factory=list)
    is_pdoubling: list = field(default_factory=list)
    is_HE: list = field(default_factory=list)

    def get(self, Q: Cube, name: str):
        return getattr(self, name)[Q.gen][Q.idx]

    def mass(self, Q: Cube) -> float:
        return Q.mass

    def sigma(self, family, p: float = 2.0) -> float:
        tot = 0.0
        for Q in family:
            tot += self.BigTheta[Q.gen][Q.idx] ** p * Q.mass
        return tot

    def to_csv(self, path) -> None:
        D = self.lat.mu.dim_ambient
        cols = (["gen", "idx"] + [f"cx{i}" for i in range(D)]
                + ["r_Q", "ell", "mass", "theta2B", "BigTheta", "P",
                   "beta2_2B", "E4Q", "is_pdoubling", "is_HE", "is_db"])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for level in self.lat.generations:
                for c in level:
                    g, i = c.gen, c.idx
                    wr.writerow([g, i] + [repr(float(v)) for v in c.center]
                                + [repr(float(c.r_Q)), repr(float(c.ell)),
                                   repr(float(c.mass)),
                                   repr(float(self.theta2B[g][i])),
                                   repr(float(self.BigTheta[g][i])),
                                   repr(float(self.P[g][i])),
                                   repr(float(self.beta2_2B[g][i])),
                                   repr(float(self.E4Q[g][i])),
                                   int(self.is_pdoubling[g][i]),
                                   int(self.is_HE[g][i]), int(c.is_db)])


def _bucket_exponent(value: float, A0: float, n: int) -> int:
    """Integer j with A0^(jn) <= value < A0^((j+1)n)."""
    if value <= 0.0:
        raise ValueError("density must be positive to bucket")
    j = math.floor(math.log(value) / (n * math.log(A0)))
    while A0 ** ((j + 1) * n) <= value:
        j += 1
    while A0 ** (j * n) > value:
        j -= 1
    return j


def compute_coeffs(lat: Lattice, alpha: float | None = None) -> CoeffTable:
    params = lat.params
    mu = lat.mu
    n = params.n
    if alpha is None:
        alpha = params.alpha
    tab = CoeffTable(lat=lat, alpha=alpha)

    for g, level in enumerate(lat.generations):
        th = np.empty(len(level))
        bexp = np.empty(len(level), dtype=np.int64)
        bth = np.empty(len(level))
        be = np.empty(len(level))
        for ci, c in enumerate(level):
            m2b = mu.mass_in_ball_xr(c.center, 2.0 * c.radius_B)
            th[ci] = m2b / c.ell ** n
            bexp[ci] = _bucket_exponent(th[ci], params.A0, n)
            bth[ci] = params.A0 ** (bexp[ci] * n)
            be[ci] = beta2(mu, Ball(c.center, 2.0 * c.radius_B))
        tab.theta2B.append(th)
        tab.BigThetaExp.append(bexp)
        tab.BigTheta.append(bth)
        tab.beta2_2B.append(be)

    for g, level in enumerate(lat.generations):
        pv = np.empty(len(level))
        for ci, c in enumerate(level):
            if c.parent is None:
                pv[ci] = tab.theta2B[g][ci]
            else:
                pg, pi = c.parent
                pv[ci] = tab.theta2B[g][ci] + tab.P[pg][pi] / params.A0
        tab.P.append(pv)
        tab.is_pdoubling.append(pv <= params.Cd * tab.theta2B[g])

    th2mu = [tab.BigTheta[g] ** 2
             * np.array([c.mass for c in lat.generations[g]])
             for g in range(lat.depth + 1)]
    for g, level in enumerate(lat.generations):
        ev = np.empty(len(level))
        for ci, c in enumerate(level):
            ev[ci] = _wolff_cube_from_tables(lat, c, 4.0, alpha, th2mu)
        tab.E4Q.append(ev)
        tab.is_HE.append(ev >= params.M0 ** 2 * th2mu[g])
    for g, level in enumerate(lat.generations):
        for ci, c in enumerate(level):
            c.is_pdoubling = bool(tab.is_pdoubling[g][ci])
            c.is_HE = bool(tab.is_HE[g][ci])
    return tab


def _wolff_cube_from_tables(lat, Q, lam, alpha, th2mu):
    atoms = lambda_dilate(lat, Q, lam)
    total = 0.0
    for g in range(Q.gen, lat.depth + 1):
        cnt = np.bincount(lat.membership[g][atoms],
                          minlength=len(lat.generations[g]))
        full = cnt == lat._sizes[g]
        if not np.any(full):
            continue
        ratio = lat.params.A0 ** (-(g - Q.gen) * 1.0)
        total += ratio ** alpha * float(th2mu[g][full].sum())
    return total


def p_coeff(lat: Lattice, Q: Cube, table: CoeffTable | None = None) -> float:
    """Poisson-type coefficient; the sum starts at R = Q (non-strict)."""
    if table is not None:
        return float(table.P[Q.gen][Q.idx])
    params = lat.params
    n = params.n
    total = 0.0
    R = Q
    while R is not None:
        m2b = lat.mu.mass_in_ball_xr(R.center, 2.0 * R.radius_B)
        total += (Q.ell / R.ell) * (m2b / R.ell ** n)
        R = lat.parent(R)
    return total


def is_p_doubling(lat: Lattice, Q: Cube, params: Params | None = None,
                  table: CoeffTable | None = None) -> bool:
    params = params or lat.params
    if table is not None:
        return bool(table.is_pdoubling[Q.gen][Q.idx])
    m2b = lat.mu.mass_in_ball_xr(Q.center, 2.0 * Q.radius_B)
    return p_coeff(lat, Q) <= params.Cd * (m2b / Q.ell ** params.n)


def hd_k(lat: Lattice, table: CoeffTable, Q: Cube, k: int) -> list:
    """Maximal cubes P with ell(P) < ell(Q) and Theta(P) >= A0^(kn) Theta(Q).

    Membership is global (side length and density only); callers intersect
    with whatever region they need.  Bucket exponents make the density
    comparison exact integer arithmetic.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    thr = table.BigThetaExp[Q.gen][Q.idx] + k
    hits = []
    for g in range(Q.gen + 1, lat.depth + 1):
        for ci in np.nonzero(table.BigThetaExp[g] >= thr)[0]:
            hits.append(lat.generations[g][ci])
    return lat.maximal_cubes(hits)


def wolff_energy_ball(mu: DiscreteMeasure, b: Ball, alpha: float,
                      step: float = 2.0) -> float:
    """Radial Wolff energy of mu restricted to B.

    Integrates (r/diam)^alpha theta(x,r)^2 dr/r over r in (0, diam] and
    atoms x, where theta excludes the atom at x itself (the continuous
    measure being approximated has no atoms, so self-scale contributions
    are dropped; radii below the minimal interpoint gap then contribute
    nothing).  Between consecutive neighbor distances the integrand is
    exactly W^2 r^(alpha-2n-1), so each piece is integrated in closed
    form.  Any radial grid with ratio ``step`` only subdivides pieces and
    cannot change the value; the parameter is kept for interface
    compatibility with grid-based callers.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    if step <= 1.0:
        raise ValueError("step must be > 1")
    idx = mu.indices_in_ball(np.asarray(b.center, dtype=float), b.radius)
    if idx.size <= 1:
        return 0.0
    sub = mu.restrict(idx)
    diam = sub.diameter()
    if diam <= 0.0 or sub.has_coincident_atoms():
        raise ValueError("coincident atoms give infinite Wolff energy")
    n = sub.dim_growth
    p = alpha - 2.0 * n
    pos, w = sub.positions, sub.weights
    m = len(sub)
    total = 0.0
    chunk = max(1, (1 << 21) // m)
    for i0 in range(0, m, chunk):
        d = np.linalg.norm(pos[i0:i0 + chunk, None, :] - pos[None, :, :], axis=2)
        dsort = np.sort(d, axis=1)
        order = np.argsort(d, axis=1, kind="stable")
        cumw = np.cumsum(w[order], axis=1)
        # column 0 is the atom itself at distance 0
        rho = dsort[:, 1:]
        W = cumw[:, 1:] - w[i0:i0 + chunk, None]
        nxt = np.concatenate([rho[:, 1:], np.full((rho.shape[0], 1), diam)],
                             axis=1)
        pieces = (nxt ** p - rho ** p) / p
        total += float((w[i0:i0 + chunk]
                        * (W ** 2 * pieces).sum(axis=1)).sum())
    return total / diam ** alpha


def wolff_energy_cube(lat: Lattice, Q: Cube, lam: float, alpha: float,
                      table: CoeffTable | None = None) -> float:
    """Sum of (ell(P)/ell(Q))^alpha Theta(P)^2 mu(P) over cells inside lam*Q."""
    if lam < 1.0:
        raise ValueError("lambda must be >= 1")
    if table is None:
        table = compute_coeffs(lat, alpha)
    th2mu = [table.BigTheta[g] ** 2
             * np.array([c.mass for c in lat.generations[g]])
             for g in range(lat.depth + 1)]
    return _wolff_cube_from_tables(lat, Q, lam, alpha, th2mu)


def is_high_energy(lat: Lattice, Q: Cube, params: Params | None = None,
                   table: CoeffTable | None = None) -> bool:
    params = params or lat.params
    if table is None:
        table = compute_coeffs(lat)
    e = table.E4Q[Q.gen][Q.idx]
    return bool(e >= params.M0 ** 2
                * table.BigTheta[Q.gen][Q.idx] ** 2 * Q.mass)


def q_reg_coeff(lat: Lattice, reg_family, Q: Cube) -> float:
    """Sum of ell(P) mu(P) / D(P,Q)^(n+1), D = ell(P) + dist(P,Q) + ell(Q)."""
    mu = lat.mu
    n = lat.params.n
    qpos = mu.positions[Q.members]
    total = 0.0
    for P in reg_family:
        ppos = mu.positions[P.members]
        chunk = max(1, (1 << 20) // max(1, qpos.shape[0]))
        dmin = math.inf
        for i0 in range(0, ppos.shape[0], chunk):
            d = np.linalg.norm(ppos[i0:i0 + chunk, None, :] - qpos[None, :, :],
                               axis=2)
            dmin = min(dmin, float(d.min()))
        D = P.ell + dmin + Q.ell
        total += P.ell * P.mass / D ** (n + 1)
    return total


def beta_wolff_sum(lat: Lattice, table: CoeffTable) -> float:
    """Sum over all cells of beta2(2B_Q)^2 Theta(Q) mu(Q)."""
    total = 0.0
    for g, level in enumerate(lat.generations):
        mass = np.array([c.mass for c in level])
        total += float((table.beta2_2B[g] ** 2 * table.BigTheta[g] * mass).sum())
    return total


def sigma(table: CoeffTable, family, p: float = 2.0) -> float:
    return table.sigma(family, p)


# ---------------------------------------------------------------------------
# Diagnostic reports used by the test suite.

def chain_decay_report(lat: Lattice, table: CoeffTable, rtol=1e-9) -> dict:
    """Check decay along parent-child chains of non-P-doubling cubes.

    For every chain Q_0 > Q_1 > ... > Q_m with Q_1..Q_m non-P-doubling:
    mu(2B_Qm)/ell(Qm)^n <= A0^(-m/2) P(Q_0) and P(Qm) <= 2 A0^(-m/2) P(Q_0).
    """
    A0 = lat.params.A0
    checked = 0
    violations = []
    for g in range(1, lat.depth + 1):
        for c in lat.generations[g]:
            if table.is_pdoubling[g][c.idx]:
                continue
            m = 0
            anc = c
            while anc.parent is not None:
                par = lat.parent(anc)
                m += 1
                lhs1 = table.theta2B[g][c.idx]
                lhs2 = table.P[g][c.idx]
                bound = A0 ** (-m / 2.0) * table.P[par.gen][par.idx]
                checked += 1
                if lhs1 > bound * (1 + rtol) or lhs2 > 2 * bound * (1 + rtol):
                    violations.append((c.id, par.id, m))
                if table.is_pdoubling[par.gen][par.idx]:
                    break
                anc = par
    return {"checked": checked, "violations": violations}


def theta_child_report(lat: Lattice, table: CoeffTable) -> dict:
    """Exact check that Theta(child) <= A0^n Theta(parent)."""
    bad = []
    for g in range(1, lat.depth + 1):
        for c in lat.generations[g]:
            pg, pi = c.parent
            if table.BigThetaExp[g][c.idx] > table.BigThetaExp[pg][pi] + 1:
                bad.append(c.id)
    return {"violations": bad}


def hd_alignment_report(lat: Lattice, table: CoeffTable, k: int = 4) -> dict:
    """Density and doubling alignment of hd_k cells inside 4Q.

    In the large-A0 regime every P in hd_k(Q) with P inside 4Q and Q
    P-doubling has Theta(P) exactly A0^(kn) Theta(Q) and is P-doubling;
    at desk scale the report carries the violation rate instead.
    """
    pairs = theta_exact = pd_ok = 0
    for g in range(lat.depth + 1):
        for Q in lat.generations[g]:
            if not table.is_pdoubling[g][Q.idx]:
                continue
            fam = hd_k(lat, table, Q, k)
            if not fam:
                continue
            atoms4 = set(map(int, lambda_dilate(lat, Q, 4.0)))
            for P in fam:
                if not set(map(int, P.members)) <= atoms4:
                    continue
                pairs += 1
                if (table.BigThetaExp[P.gen][P.idx]
                        == table.BigThetaExp[g][Q.idx] + k):
                    theta_exact += 1
                if table.is_pdoubling[P.gen][P.idx]:
                    pd_ok += 1
    return {"pairs": pairs, "theta_exact": theta_exact, "pdoubling": pd_ok}
