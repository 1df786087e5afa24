import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bgre.dgp import DgpSpec, generate
from bgre.errors import ValidationError
from bgre.gibbs import run_chain
from bgre.panel import ModelSpec
from bgre.rng import make_rng
from bgre.sgp import (SgpPrior, build_scenario, dirichlet_with_zeros, read_a_table,
                      write_a_table)


def test_dirichlet_zeros_exact():
    rng = np.random.default_rng(0)
    p = np.array([[1.0, 0.0, 2.0], [0.0, 0.0, 1.0]])
    for _ in range(100):
        d = dirichlet_with_zeros(p, rng)
        assert np.all(d[p == 0] == 0) and np.allclose(d.sum(axis=1), 1)
        assert d[1, 2] == 1.0


def test_dirichlet_mean():
    rng = np.random.default_rng(1)
    p = np.array([[2.0, 1.0, 3.0]])
    draws = np.vstack([dirichlet_with_zeros(p, rng) for _ in range(20_000)])
    se = np.sqrt((p / 6) * (1 - p / 6) / 7 / 20_000)
    assert np.all(np.abs(draws.mean(axis=0) - p / 6) < 4 * se)


def test_prior_table_cases():
    tab = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    sgp = SgpPrior(tab, 0.3)
    assert np.array_equal(sgp.prior_table(3), tab)
    more = sgp.prior_table(5)
    assert np.allclose(more[:, :3], 0.7 * tab) and np.allclose(more[:, 3:], 0.15)
    assert np.allclose(sgp.prior_table(5), more)  # recomputed, never compounded
    fewer = sgp.prior_table(2, membership=np.array([2, 2]))
    # label 2 is used most; backfilled by label 0; columns keep label order
    expect = tab[:, [0, 2]] / tab[:, [0, 2]].sum(axis=1, keepdims=True)
    assert np.allclose(fewer, expect)
    one = SgpPrior(np.array([[0.0, 1.0]]), 0.3).prior_table(1, membership=np.array([0]))
    assert np.allclose(one, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 8), st.integers(0, 10_000))
def test_prior_table_rows_sum_to_one(n, kp, k_star, seed):
    rng = np.random.default_rng(seed)
    tab = rng.dirichlet(np.ones(kp), size=n)
    tab[rng.random(tab.shape) < 0.3] = 0
    tab[tab.sum(axis=1) == 0, 0] = 1
    tab /= tab.sum(axis=1, keepdims=True)
    sgp = SgpPrior(tab, 0.3)
    out = sgp.prior_table(k_star, rng.integers(0, max(kp, k_star), n))
    assert out.shape == (n, k_star)
    assert np.allclose(out.sum(axis=1), 1) and np.all(out >= 0)


def test_prior_validation():
    with pytest.raises(ValidationError):
        SgpPrior(np.array([[0.5, 0.6]]))
    with pytest.raises(ValidationError):
        SgpPrior(np.array([[1.0]]), epsilon=1.0)


def test_scenarios():
    g = np.repeat(np.arange(4), 5)
    s1 = build_scenario(1, g, 4)
    assert np.array_equal(s1.argmax(axis=1), g) and np.all(s1.max(axis=1) == 1)
    s2 = build_scenario(2, g, 4)
    assert np.allclose(s2[np.arange(20), g], 0.7) and np.allclose(s2.sum(axis=1), 1)
    assert np.allclose(build_scenario(3, g, 4), 0.25)
    assert build_scenario(4, g, 4).shape == (20, 3)
    assert build_scenario(5, g, 4).shape == (20, 5)
    with pytest.raises(ValidationError):
        build_scenario(6, g, 4)


def test_table_csv_roundtrip(tmp_path):
    tab = build_scenario(2, np.repeat(np.arange(3), 3), 3)
    write_a_table(tmp_path / "a.csv", tab)
    assert np.array_equal(read_a_table(tmp_path / "a.csv"), tab)


def test_certain_table_fixes_memberships():
    data, truth = generate(DgpSpec(dgp_id=1, n_units=20, n_periods=6), make_rng(2))
    table = build_scenario(1, truth.membership, truth.k0)
    d = run_chain(data, ModelSpec.from_name("sgp1:ti-homo"), m_iter=100, burn_in=20,
                  sgp_table=table, seed=1)
    kp = truth.k0
    for s in d.states:
        # a unit may drift to an extra group beyond K^p, never to another preset group
        preset = s.membership < kp
        assert np.array_equal(s.membership[preset], truth.membership[preset])
        # the table's zero entries stay exactly zero among the first K^p columns
        off = table[:, :kp] == 0
        assert np.all(s.omega[:, :kp][off] == 0)
