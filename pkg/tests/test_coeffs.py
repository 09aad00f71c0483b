import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmtriesz.measure import (Ball, DiscreteMeasure, generate,
                              two_density_segment)
from gmtriesz.lattice import Params, build_lattice
from gmtriesz.coeffs import (beta2, beta2_plane, beta2_profile, beta_wolff_sum,
                             chain_decay_report, compute_coeffs,
                             hd_alignment_report, hd_k, is_high_energy,
                             is_p_doubling, p_coeff, q_reg_coeff, sigma, theta,
                             theta_child_report, wolff_energy_ball,
                             wolff_energy_cube)


def _single_atom(w=1.0):
    return DiscreteMeasure(np.array([[0.0, 0.0]]), np.array([w]), dim_growth=1)


# -- theta -------------------------------------------------------------------

def test_theta_point_mass():
    assert theta(_single_atom(), Ball(np.zeros(2), 2.0)) == 0.5


def test_theta_empty_ball():
    mu = _single_atom()
    assert theta(mu, Ball(np.array([5.0, 5.0]), 1.0)) == 0.0


def test_theta_segment_interior():
    mu = generate("segment", 10)
    r = 0.25
    got = theta(mu, Ball(np.array([0.5, 0.0]), r))
    # density-1 line: mass 2r over r^1
    assert got == pytest.approx(2.0, abs=2 ** -10 / r + 1e-12)


# -- beta2 -------------------------------------------------------------------

def test_beta2_flat_line():
    mu = generate("segment", 8)
    assert beta2(mu, Ball(np.array([0.5, 0.0]), 0.4)) <= 1e-12


def test_beta2_four_corners():
    pos = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    mu = DiscreteMeasure(pos, np.ones(4), dim_growth=1)
    got = beta2(mu, Ball(np.zeros(2), 2.0))
    assert got == pytest.approx(math.sqrt(0.5), rel=1e-12)


def test_beta2_single_atom():
    assert beta2(_single_atom(), Ball(np.zeros(2), 1.0)) == 0.0


def _beta2_oracle(mu, center, radius):
    """Independent route: SVD of the centered sqrt-weighted coordinates."""
    d = np.linalg.norm(mu.positions - center, axis=1)
    sel = d <= radius
    if sel.sum() == 0:
        return 0.0
    pos = mu.positions[sel]
    w = mu.weights[sel]
    W = w.sum()
    if W <= 0 or sel.sum() == 1:
        return 0.0
    c = (w[:, None] * pos).sum(axis=0) / W
    A = np.sqrt(w)[:, None] * (pos - c)
    s = np.linalg.svd(A, compute_uv=False)
    lam = s[-1] ** 2
    return math.sqrt(lam / radius ** (mu.dim_growth + 2))


@pytest.mark.parametrize("kind,depth", [("lipschitz_graph", 8),
                                        ("cantor4corner", 4),
                                        ("cantor_line", 6)])
def test_beta2_matches_svd_oracle(kind, depth):
    mu = generate(kind, depth)
    rng = np.random.default_rng(3)
    for _ in range(60):
        i = int(rng.integers(len(mu)))
        r = float(rng.uniform(0.02, 0.5))
        got = beta2(mu, Ball(mu.positions[i], r))
        want = _beta2_oracle(mu, mu.positions[i], r)
        assert got == pytest.approx(want, rel=1e-10, abs=1e-13)


def test_beta2_plane_normal_is_unit():
    mu = generate("lipschitz_graph", 6)
    b, c, nvec = beta2_plane(mu, Ball(np.array([0.5, 0.2]), 0.4))
    assert np.linalg.norm(nvec) == pytest.approx(1.0, rel=1e-12)
    assert b > 0


def test_beta2_profile_matches_pointwise():
    mu = generate("cantor4corner", 4)
    rng = np.random.default_rng(5)
    centers = mu.positions[rng.integers(len(mu), size=8)]
    radii = np.array([[0.05, 0.13, 0.31, 0.49]] * 8)
    bsq, mass = beta2_profile(mu, centers, radii)
    for i in range(8):
        for j in range(4):
            want = beta2(mu, Ball(centers[i], radii[i, j]))
            assert bsq[i, j] == pytest.approx(want ** 2, rel=1e-9, abs=1e-15)
            assert mass[i, j] == pytest.approx(
                mu.mass_in_ball_xr(centers[i], radii[i, j]), rel=1e-12)


def test_beta2_scale_invariance():
    mu = generate("lipschitz_graph", 7)
    b1 = beta2(mu, Ball(np.array([0.5, 0.2]), 0.3))
    s = 0.125
    mus = DiscreteMeasure(mu.positions * s, mu.weights * s, dim_growth=1)
    b2 = beta2(mus, Ball(np.array([0.5, 0.2]) * s, 0.3 * s))
    assert b2 == pytest.approx(b1, rel=1e-12)


# -- Poisson coefficient and flags --------------------------------------------

def test_p_coeff_root_single_term(seg7_lattice):
    tab = compute_coeffs(seg7_lattice)
    root = seg7_lattice.root
    assert p_coeff(seg7_lattice, root) == pytest.approx(
        tab.theta2B[0][0], rel=1e-14)


def test_p_coeff_hand_sum(seg7_lattice):
    # two-generation hand evaluation of the series
    lat = seg7_lattice
    mu = lat.mu
    Q = lat.generations[1][0]
    n = lat.params.n
    t_q = mu.mass_in_ball_xr(Q.center, 56 * Q.r_Q) / Q.ell ** n
    R = lat.root
    t_r = mu.mass_in_ball_xr(R.center, 56 * R.r_Q) / R.ell ** n
    want = t_q + (Q.ell / R.ell) * t_r
    assert p_coeff(lat, Q) == pytest.approx(want, rel=1e-13)


def test_p_coeff_table_agrees(seg7_lattice):
    tab = compute_coeffs(seg7_lattice)
    for Q in list(seg7_lattice.cubes())[::7]:
        assert p_coeff(seg7_lattice, Q) == pytest.approx(
            p_coeff(seg7_lattice, Q, table=tab), rel=1e-12)


def test_root_is_p_doubling(seg7_lattice):
    assert is_p_doubling(seg7_lattice, seg7_lattice.root)


def test_two_density_has_non_p_doubling_cells():
    mu = two_density_segment(7, eps=1e-4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lat = build_lattice(mu, Params(n=1), max_depth=4)
    tab = compute_coeffs(lat)
    flags = [bool(f) for g in range(lat.depth + 1) for f in tab.is_pdoubling[g]]
    assert not all(flags)
    rep = chain_decay_report(lat, tab)
    assert rep["checked"] > 0
    assert rep["violations"] == []


def test_chain_decay_on_fixtures(seg7_lattice, cantor_line5_lattice):
    for lat in (seg7_lattice, cantor_line5_lattice):
        tab = compute_coeffs(lat)
        assert chain_decay_report(lat, tab)["violations"] == []


def test_theta_child_bucket_exact(seg7_lattice, cantor4_lattice,
                                  cantor_line5_lattice):
    for lat in (seg7_lattice, cantor4_lattice, cantor_line5_lattice):
        tab = compute_coeffs(lat)
        assert theta_child_report(lat, tab)["violations"] == []


# -- hd_k ---------------------------------------------------------------------

def test_hd_k_uniform_hits_only_resolution_floor(seg7_lattice):
    # uniform density carries no genuine density growth; the only cells
    # clearing the threshold are resolution-floor singletons, whose density
    # grows by A0 per generation because one atom's weight never splits
    tab = compute_coeffs(seg7_lattice)
    for Q in seg7_lattice.generations[2]:
        for P in hd_k(seg7_lattice, tab, Q, 1):
            assert len(P.members) == 1


def test_hd_k_threshold_exceeds_max(seg7_lattice):
    tab = compute_coeffs(seg7_lattice)
    assert hd_k(seg7_lattice, tab, seg7_lattice.root, 50) == []


def test_hd_k_finds_density_jump(cantor_line5_lattice):
    tab = compute_coeffs(cantor_line5_lattice)
    fam = hd_k(cantor_line5_lattice, tab, cantor_line5_lattice.root, 2)
    assert fam
    rexp = tab.BigThetaExp[0][0]
    for P in fam:
        assert tab.BigThetaExp[P.gen][P.idx] >= rexp + 2
        assert P.ell < cantor_line5_lattice.root.ell


def test_hd_k_maximality(cantor_line5_lattice):
    lat = cantor_line5_lattice
    tab = compute_coeffs(lat)
    fam = hd_k(lat, tab, lat.root, 1)
    for a in fam:
        for b in fam:
            if a is not b:
                assert not lat.contains(a, b)


def test_hd_alignment_report(cantor_line5_lattice):
    tab = compute_coeffs(cantor_line5_lattice)
    rep = hd_alignment_report(cantor_line5_lattice, tab, k=2)
    assert rep["pairs"] >= 0
    assert 0 <= rep["theta_exact"] <= rep["pairs"]


# -- Wolff energies ------------------------------------------------------------

def test_wolff_ball_single_atom_zero():
    assert wolff_energy_ball(_single_atom(), Ball(np.zeros(2), 1.0), 0.75) == 0.0


def test_wolff_ball_empty_zero():
    mu = _single_atom()
    assert wolff_energy_ball(mu, Ball(np.array([9.0, 9.0]), 1.0), 0.75) == 0.0


def test_wolff_ball_exact_two_atoms():
    # closed form: two atoms distance g apart, diam = g; theta' jumps to
    # w/r^n at r = g, so the only piece [g, g] has zero width -> 0
    pos = np.array([[0.0, 0.0], [0.5, 0.0]])
    mu = DiscreteMeasure(pos, np.ones(2), dim_growth=1)
    assert wolff_energy_ball(mu, Ball(np.array([0.25, 0.0]), 1.0), 0.75) == 0.0


def test_wolff_ball_exact_three_atoms():
    # atoms at 0, g, 1 (g < 1): piece structure integrates in closed form
    g = 0.25
    pos = np.array([[0.0, 0.0], [g, 0.0], [1.0, 0.0]])
    w = np.ones(3)
    mu = DiscreteMeasure(pos, w, dim_growth=1)
    alpha, n = 0.75, 1
    p = alpha - 2 * n

    def piece(W, lo, hi):
        return W ** 2 * (hi ** p - lo ** p) / p

    want = (piece(1.0, g, 1.0)            # x=0 sees atom at g, then 1 at diam
            + piece(1.0, g, 1.0 - g)      # x=g sees 0 at g, then 1 at 1-g
            + piece(2.0, 1.0 - g, 1.0)
            + piece(1.0, 1.0 - g, 1.0))   # x=1 sees g at 1-g, then 0 at diam
    want /= 1.0 ** alpha
    got = wolff_energy_ball(mu, Ball(np.array([0.5, 0.0]), 1.0), 0.75)
    assert got == pytest.approx(want, rel=1e-13)


def test_wolff_ball_grid_invariance():
    mu = generate("cantor_line", 5)
    b = Ball(np.array([0.2, 0.0]), 0.4)
    v1 = wolff_energy_ball(mu, b, 0.75, step=2.0)
    v2 = wolff_energy_ball(mu, b, 0.75, step=math.sqrt(2.0))
    assert v1 == v2
    assert abs(v1 - v2) < 0.01 * v1 + 1e-30


def test_wolff_ball_coincident_atoms_error():
    pos = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    mu = DiscreteMeasure(pos, np.ones(3), dim_growth=1)
    with pytest.raises(ValueError, match="coincident"):
        wolff_energy_ball(mu, Ball(np.array([0.0, 0.0]), 2.0), 0.75)


def test_wolff_ball_polynomial_growth_bound():
    # record the fitted constant of the growth bound and require stability
    from gmtriesz.measure import growth_constant
    cs = []
    for depth in (5, 7, 9):
        mu = generate("segment", depth)
        b = Ball(np.array([0.5, 0.0]), 0.3)
        W = wolff_energy_ball(mu, b, 0.75)
        th0 = growth_constant(mu)
        m2b = mu.mass_in_ball_xr(b.center, 2 * b.radius)
        cs.append(W / (th0 ** 2 * b.radius ** 0.75 * m2b))
    assert max(cs) <= 2.0 * min(cs) + 1e-12
    assert max(cs) < 50.0


def test_wolff_cube_single_cell():
    mu = _single_atom()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lat = build_lattice(mu, Params(n=1), max_depth=1)
    tab = compute_coeffs(lat)
    Q = lat.generations[-1][0]
    want = tab.BigTheta[Q.gen][0] ** 2 * Q.mass
    assert wolff_energy_cube(lat, Q, 4.0, 0.75, table=tab) == pytest.approx(
        want, rel=1e-14)


def test_wolff_cube_plateau_on_segment():
    ratios = []
    for depth in (6, 8, 10):
        mu = generate("segment", depth)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lat = build_lattice(mu, Params(n=1), max_depth=4)
        tab = compute_coeffs(lat)
        Q = lat.generations[2][len(lat.generations[2]) // 2]
        e = wolff_energy_cube(lat, Q, 4.0, 0.75, table=tab)
        ratios.append(e / (tab.BigTheta[2][Q.idx] ** 2 * Q.mass))
    assert max(ratios) <= 1.6 * min(ratios)


def test_high_energy_flags():
    # uniform segment with density 4 (mid-bucket, so support-edge cells do
    # not flutter one bucket down), lattice truncated above the single-atom
    # floor: no high-energy cells outside the coarse ramp
    m = 1 << 10
    pos = np.stack([(np.arange(m) + 0.5) / m, np.zeros(m)], axis=1)
    mu = DiscreteMeasure(pos, np.full(m, 4.0 / m), dim_growth=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lat = build_lattice(mu, Params(n=1), max_depth=3)
    tab = compute_coeffs(lat)
    assert all(len(c.members) > 1 for c in lat.generations[lat.depth])
    for g in range(2, lat.depth + 1):
        assert len(set(tab.BigThetaExp[g])) == 1   # bucket-stable band
        assert not tab.is_HE[g].any()


def test_high_energy_spike():
    # heavy atom: its small ancestors see E(4Q) blow past M0^2 Theta^2 mu
    m = 256
    base = np.stack([(np.arange(m) + 0.5) / m, np.zeros(m)], axis=1)
    pos = np.vstack([base, [[0.4 + 1e-7, 0.0]]])
    w = np.concatenate([np.full(m, 0.5 / m), [0.5]])
    mu = DiscreteMeasure(pos, w, dim_growth=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lat = build_lattice(mu, Params(n=1), max_depth=4)
    tab = compute_coeffs(lat)
    heavy = int(np.argmax(mu.weights))
    hit = False
    for g in range(1, lat.depth + 1):
        ci = lat.membership[g][heavy]
        Q = lat.generations[g][ci]
        if is_high_energy(lat, Q, table=tab):
            e = tab.E4Q[g][ci]
            thr = lat.params.M0 ** 2 * tab.BigTheta[g][ci] ** 2 * Q.mass
            if e >= 2 * thr:
                hit = True
    assert hit


def test_one_cell_not_high_energy():
    mu = _single_atom()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lat = build_lattice(mu, Params(n=1), max_depth=1)
    tab = compute_coeffs(lat)
    assert not is_high_energy(lat, lat.generations[-1][0], table=tab)


# -- q_reg_coeff ---------------------------------------------------------------

def test_q_reg_self_family(seg7_lattice):
    Q = seg7_lattice.generations[2][0]
    n = seg7_lattice.params.n
    want = Q.ell * Q.mass / (2 * Q.ell) ** (n + 1)
    assert q_reg_coeff(seg7_lattice, [Q], Q) == pytest.approx(want, rel=1e-13)


def test_q_reg_empty_family(seg7_lattice):
    assert q_reg_coeff(seg7_lattice, [], seg7_lattice.root) == 0.0


def test_q_reg_far_separation(seg7_lattice):
    lat = seg7_lattice
    level = lat.generations[3]
    Q, P = level[0], level[-1]
    mu = lat.mu
    dist = min(np.linalg.norm(mu.positions[a] - mu.positions[b])
               for a in P.members for b in Q.members)
    got = q_reg_coeff(lat, [P], Q)
    approx = P.ell * P.mass / dist ** (lat.params.n + 1)
    assert got == pytest.approx(approx,
                                rel=3 * (P.ell + Q.ell) / dist)


# -- aggregate sums --------------------------------------------------------------

def test_beta_wolff_sum_flat_null(seg7_lattice):
    tab = compute_coeffs(seg7_lattice)
    s = beta_wolff_sum(seg7_lattice, tab)
    tot = sum(tab.BigTheta[c.gen][c.idx] * c.mass
              for c in seg7_lattice.cubes())
    assert s <= 1e-10 * tot


def test_beta_wolff_sum_grows_on_cantor4():
    vals = []
    for depth in (2, 3, 4):
        mu = generate("cantor4corner", depth)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lat = build_lattice(mu, Params(n=1, A0=4.0), max_depth=depth)
        tab = compute_coeffs(lat)
        vals.append(beta_wolff_sum(lat, tab))
    assert vals[0] < vals[1] < vals[2]


def test_sigma_exact_recompute(cantor4_lattice):
    tab = compute_coeffs(cantor4_lattice)
    fam = list(cantor4_lattice.generations[2])
    direct = sum(tab.BigTheta[2][c.idx] ** 2 * c.mass for c in fam)
    assert sigma(tab, fam) == direct
    assert sigma(tab, [cantor4_lattice.root]) == (
        tab.BigTheta[0][0] ** 2 * cantor4_lattice.root.mass)


def test_sigma_p_general(cantor4_lattice):
    tab = compute_coeffs(cantor4_lattice)
    fam = list(cantor4_lattice.generations[1])
    s1 = sigma(tab, fam, p=1.0)
    direct = sum(tab.BigTheta[1][c.idx] * c.mass for c in fam)
    assert s1 == pytest.approx(direct, rel=1e-14)


def test_csv_dump(tmp_path, cantor4_lattice):
    import csv as _csv
    tab = compute_coeffs(cantor4_lattice)
    path = tmp_path / "coeffs.csv"
    tab.to_csv(path)
    with open(path) as fh:
        rows = list(_csv.reader(fh))
    ncubes = sum(len(g) for g in cantor4_lattice.generations)
    assert len(rows) == ncubes + 1
    assert rows[0][:2] == ["gen", "idx"]
    # repr round-trip of a sampled numeric field
    gen, idx = int(rows[3][0]), int(rows[3][1])
    col = rows[0].index("theta2B")
    assert float(rows[3][col]) == tab.theta2B[gen][idx]


# -- properties ------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_theta_ball_mass_ratio(r1, r2):
    mu = generate("segment", 6)
    c = np.array([0.5, 0.0])
    t1 = theta(mu, Ball(c, r1)) * r1
    t2 = theta(mu, Ball(c, r2)) * r2
    if r1 <= r2:
        assert t1 <= t2 + 1e-15
    else:
        assert t2 <= t1 + 1e-15


@pytest.mark.parametrize("seed", [0, 7, 19, 40, 77])
def test_p_coeff_walk_matches_table(seed, seg7_lattice):
    tab = compute_coeffs(seg7_lattice)
    cubes = list(seg7_lattice.cubes())
    Q = cubes[seed % len(cubes)]
    assert p_coeff(seg7_lattice, Q) == pytest.approx(
        float(tab.P[Q.gen][Q.idx]), rel=1e-12)
