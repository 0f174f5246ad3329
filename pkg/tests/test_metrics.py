import math

import numpy as np
import pytest

from singletsim.geometry import UnitVector
from singletsim.metrics import (
    CHSH_LABELS,
    ChshConfig,
    analytic_correlator,
    chi_square_gof,
    chi_square_p,
    chsh,
    chsh_analytic,
    correlator,
    free_will_M,
    integrate_sign_regions,
    joint_from_hall_density,
    normalization_check,
    two_sample_chi_square,
)
from singletsim.models import SettingsPair, joint_analytic
from singletsim.protocol import CountTable

Z = UnitVector(0.0, 0.0, 1.0)


def planar(deg):
    th = math.radians(deg)
    return UnitVector.normalized(math.sin(th), 0.0, math.cos(th))


def pair(deg):
    return SettingsPair(Z, planar(deg))


def table(counts, deg=60.0, model="A"):
    return CountTable("t", model, pair(deg), dict(counts))


def test_correlator_examples():
    t = table({(1, 1): 0, (1, -1): 500_000, (-1, 1): 500_000, (-1, -1): 0})
    assert correlator(t) == -1.0
    t = table({(1, 1): 250, (1, -1): 250, (-1, 1): 250, (-1, -1): 250})
    assert correlator(t) == 0.0
    with pytest.raises(ValueError):
        correlator(table({(1, 1): 0, (1, -1): 0, (-1, 1): 0, (-1, -1): 0}))


def test_analytic_correlator():
    assert analytic_correlator("A", pair(60.0)) == pytest.approx(-0.5)
    assert analytic_correlator("QM", pair(180.0)) == pytest.approx(1.0)
    assert analytic_correlator("C", pair(60.0)) == pytest.approx(-1.0)
    assert analytic_correlator("C", pair(120.0)) == pytest.approx(1.0)


def qm_config():
    # the standard maximal-violation geometry: a=0, a'=90, b=225, b'=135 deg
    return ChshConfig(planar(0.0), planar(90.0), planar(225.0), planar(135.0))


def test_chsh_analytic_tsirelson():
    res = chsh_analytic("QM", qm_config())
    assert res.E == pytest.approx(2.0 * math.sqrt(2.0), abs=1e-12)


def test_chsh_analytic_model_c_reaches_four():
    cfg = ChshConfig(planar(0.0), planar(270.0), planar(135.0), planar(225.0))
    res = chsh_analytic("C", cfg)
    assert res.E == pytest.approx(4.0)
    signs = [res.correlators[lab] for lab in CHSH_LABELS]
    assert signs == [1.0, 1.0, 1.0, -1.0]


def test_chsh_from_tables():
    # identical perfectly-correlated tables: each C = 1, E = |1+1+1-1| = 2
    t = table({(1, 1): 500, (1, -1): 0, (-1, 1): 0, (-1, -1): 500})
    res = chsh({lab: t for lab in CHSH_LABELS})
    assert res.E == pytest.approx(2.0)
    with pytest.raises(ValueError):
        chsh({"ab": t})


def test_chsh_recomputable_from_correlators():
    res = chsh_analytic("QM", qm_config())
    c = res.correlators
    again = abs(c["ab"] + c["a'b"] + c["ab'"] - c["a'b'"])
    assert abs(again - res.E) < 1e-12


def test_sign_region_quadrature_areas():
    # oracle: each hemisphere of a single great circle has area 2 pi
    m = planar(33.0).as_array()
    up = integrate_sign_regions([m], lambda s: 1.0 if s[0] == 1 else 0.0)
    assert up == pytest.approx(2.0 * math.pi, abs=1e-9)
    total = integrate_sign_regions([m], lambda s: 1.0)
    assert total == pytest.approx(4.0 * math.pi, abs=1e-9)


def test_sign_region_quadrature_lune():
    # oracle: the lune where sgn(u.m1) = sgn(u.m2) = +1 has area 2(pi - gamma)
    # for gamma the angle between the normals
    for deg in (30.0, 60.0, 90.0, 144.0):
        gamma = math.radians(deg)
        m1 = Z.as_array()
        m2 = planar(deg).as_array()
        area = integrate_sign_regions(
            [m1, m2], lambda s: 1.0 if s == (1, 1) else 0.0
        )
        assert area == pytest.approx(2.0 * (math.pi - gamma), abs=1e-8)


def test_normalization_quadrature():
    for deg in (1.0, 60.0, 90.0, 179.0):
        val, err = normalization_check(pair(deg), method="quadrature")
        assert abs(val - 1.0) < 1e-6
    with pytest.raises(ValueError):
        normalization_check(pair(60.0), method="bogus")


def test_normalization_monte_carlo():
    rng = np.random.default_rng(2)
    val, err = normalization_check(
        pair(60.0), method="monte_carlo", mc_samples=1_000_000, rng=rng
    )
    assert abs(val - 1.0) < 1e-3
    assert err < 1e-3


def test_joint_from_hall_density_matches_singlet_law():
    for deg in (20.0, 60.0, 90.0, 150.0):
        s = pair(deg)
        for sg in (1, -1):
            for tu in (1, -1):
                got = joint_from_hall_density(sg, tu, s)
                assert got == pytest.approx(joint_analytic("B1", sg, tu, s), abs=1e-8)


def test_free_will_M_atomic_values():
    # fully disjoint atoms: M = 2
    generic = (
        SettingsPair(planar(20.0), planar(60.0)),
        SettingsPair(planar(100.0), planar(150.0)),
    )
    m, _ = free_will_M("A", [generic])
    assert m == pytest.approx(2.0, abs=1e-12)
    # identical pairs: M = 0
    m, _ = free_will_M("A", [(pair(60.0), pair(60.0))])
    assert m == pytest.approx(0.0, abs=1e-12)
    # shared left setting (both pairs contain +-n_L = +-z): M = 1
    m, _ = free_will_M("C", [(pair(60.0), pair(10.0))])
    assert m == pytest.approx(1.0, abs=1e-12)


def test_free_will_M_picks_best_candidate():
    cands = [
        (pair(60.0), pair(60.0)),
        (
            SettingsPair(planar(20.0), planar(60.0)),
            SettingsPair(planar(100.0), planar(150.0)),
        ),
    ]
    m, idx = free_will_M("A", cands)
    assert (m, idx) == (2.0, 1)


def test_free_will_M_symmetric():
    a, b = pair(60.0), pair(110.0)
    m1, _ = free_will_M("B1", [(a, b)])
    m2, _ = free_will_M("B1", [(b, a)])
    assert m1 == pytest.approx(m2, abs=1e-8)


def test_free_will_M_hall_realizations_agree():
    a, b = pair(45.0), pair(135.0)
    m1, _ = free_will_M("B1", [(a, b)])
    m2, _ = free_will_M("B2", [(a, b)])
    assert m1 == pytest.approx(m2, abs=1e-10)
    assert 0.0 < m1 < 2.0


def test_free_will_M_rejects_bad_input():
    with pytest.raises(ValueError):
        free_will_M("QM", [(pair(0.0), pair(1.0))])
    with pytest.raises(ValueError):
        free_will_M("A", [])


def test_chi_square_p_values():
    assert chi_square_p(0.0, 3) == pytest.approx(1.0)
    # oracle: chi2 survival at dof=2 is exp(-x/2)
    for x in (0.5, 2.0, 10.0):
        assert chi_square_p(x, 2) == pytest.approx(math.exp(-x / 2.0), abs=1e-12)


def test_chi_square_gof_exact_proportions():
    n = 800_000
    s = pair(60.0)
    counts = {
        (sg, tu): int(round(n * joint_analytic("A", sg, tu, s)))
        for sg in (1, -1) for tu in (1, -1)
    }
    stat, p, dof = chi_square_gof(table(counts), "A")
    assert stat == pytest.approx(0.0, abs=1e-9)
    assert p == pytest.approx(1.0)
    assert dof == 3


def test_chi_square_gof_forbidden_cell():
    # model C at 60 deg forbids like-sign outcomes; one count there is fatal
    counts = {(1, 1): 1, (1, -1): 500, (-1, 1): 499, (-1, -1): 0}
    stat, p, dof = chi_square_gof(table(counts, model="C"), "C")
    assert p == 0.0
    assert math.isinf(stat)


def test_chi_square_gof_needs_enough_trials():
    with pytest.raises(ValueError):
        chi_square_gof(table({(1, 1): 10, (1, -1): 10, (-1, 1): 10, (-1, -1): 10}), "A")


def test_two_sample_chi_square():
    rng = np.random.default_rng(1)
    c1 = rng.multinomial(100_000, [0.25] * 4)
    c2 = rng.multinomial(100_000, [0.25] * 4)
    stat, p, dof = two_sample_chi_square(c1, c2)
    assert dof == 3
    assert p > 1e-3
    # grossly different proportions must be rejected
    stat, p, dof = two_sample_chi_square([100, 100, 100, 100], [400, 10, 10, 10])
    assert p < 1e-6
    with pytest.raises(ValueError):
        two_sample_chi_square([1, 2], [1, 2, 3])


def test_two_sample_drops_jointly_empty_bins():
    stat, p, dof = two_sample_chi_square([50, 50, 0], [55, 45, 0])
    assert dof == 1
    assert p > 1e-3
