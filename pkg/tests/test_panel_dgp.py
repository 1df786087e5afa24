import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bgre.dgp import DgpSpec, balanced_membership, dgp2_sigma2, dgp3_mean_paths, generate
from bgre.errors import (DimensionMismatch, NonFinite, SingularDesign, UnknownDgp,
                         ValidationError)
from bgre.panel import (ModelSpec, PanelData, PriorSpec, TrueParams, calibrate_priors,
                        ols_sd_matrix, pooled_ols, read_panel_csv, validate_panel,
                        write_panel_csv)
from bgre.rng import make_rng


def test_validate_panel_errors():
    with pytest.raises(DimensionMismatch):
        validate_panel(PanelData(y=np.zeros(5)))
    y = np.zeros((3, 4))
    y[1, 2] = np.nan
    with pytest.raises(NonFinite):
        validate_panel(PanelData(y=y))
    with pytest.raises(DimensionMismatch):
        validate_panel(PanelData(y=np.zeros((3, 4)), x=np.zeros((3, 2, 1))))


def test_pooled_ols_matches_lstsq():
    rng = np.random.default_rng(0)
    for tv in (False, True):
        y = rng.normal(size=(12, 6))
        x = rng.normal(size=(12, 5, 2))
        data = PanelData(y=y, x=x)
        fit = pooled_ols(data, tv)
        t = 5
        rows, target = [], []
        for i in range(12):
            for s in range(t):
                dummies = list(np.eye(t)[s]) if tv else [1.0]
                rows.append(dummies + [y[i, s]] + list(x[i, s]))
                target.append(y[i, s + 1])
        coef = np.linalg.lstsq(np.array(rows), np.array(target), rcond=None)[0]
        L = t if tv else 1
        assert np.allclose(fit.alpha, coef[:L]) and np.isclose(fit.rho, coef[L])
        assert np.allclose(fit.beta, coef[L + 1:])


def test_pooled_ols_singular():
    with pytest.raises(SingularDesign):
        pooled_ols(PanelData(y=np.ones((4, 5))))


def test_sd_matrix_squares_to_covariance():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4))
    cov = a @ a.T + np.eye(4)
    sd = ols_sd_matrix(cov)
    assert np.allclose(sd @ sd, cov) and np.allclose(sd, sd.T)


def test_calibrated_prior_scale():
    data, _ = generate(DgpSpec(dgp_id=1), make_rng(0))
    spec = ModelSpec.from_name("ti-homo")
    pr = calibrate_priors(data, spec)
    ols = pooled_ols(data)
    assert np.allclose(pr.sigma_alpha, 200 * np.sqrt(ols.alpha_cov))
    assert np.allclose(pr.mu_alpha, ols.alpha)
    assert pr.a_prior_mean == pytest.approx(0.04)
    th = calibrate_priors(data, ModelSpec.from_name("theta"))
    assert th.mu_theta.size == 2 and th.sigma_theta.shape == (2, 2)


def test_prior_validation():
    with pytest.raises(ValidationError):
        PriorSpec(mu_alpha=[0.0], sigma_alpha=[[1.0]], a_rate=0)
    with pytest.raises(DimensionMismatch):
        PriorSpec(mu_alpha=[0.0, 1.0], sigma_alpha=[[1.0]])
    pr = PriorSpec(mu_alpha=[0.0], sigma_alpha=[[2.0]])
    assert PriorSpec.from_dict(json.loads(json.dumps(pr.to_dict()))).sigma_alpha[0, 0] == 2.0


def test_model_spec_names():
    assert ModelSpec.from_name("tv-hetero").label == "tv-hetero"
    assert ModelSpec.from_name("sgp2").sgp_scenario == 2
    assert ModelSpec.from_name("two-step-kmeans:tv-homo").time_varying_alpha
    with pytest.raises(ValidationError, match="valid"):
        ModelSpec.from_name("nope")
    with pytest.raises(ValidationError):
        ModelSpec(coefficient_mode="fully-grouped-theta", time_varying_alpha=True)
    spec = ModelSpec.from_name("theta-hetero")
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    data = PanelData(y=rng.normal(size=(4, 5)), x=rng.normal(size=(4, 4, 2)),
                     holdout=rng.normal(size=4), x_next=rng.normal(size=(4, 2)))
    path = tmp_path / "p.csv"
    write_panel_csv(path, data)
    back = read_panel_csv(path, holdout_last=True)
    assert np.array_equal(back.y, data.y) and np.array_equal(back.x, data.x)
    assert np.array_equal(back.holdout, data.holdout)
    assert np.array_equal(back.x_next, data.x_next)
    plain = read_panel_csv(path)
    assert plain.n_periods == 5 and plain.holdout is None


def test_csv_forecast_only_period(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("unit,t,y\n1,0,0\n1,1,1\n1,2,2\n1,3,\n2,0,1\n2,1,0\n2,2,1\n2,3,\n")
    d = read_panel_csv(path, holdout_last=True)
    assert d.holdout is None and d.n_periods == 2


def test_csv_unbalanced(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("unit,t,y\n1,0,0\n1,1,1\n2,0,1\n")
    with pytest.raises(DimensionMismatch):
        read_panel_csv(path)


def test_balanced_membership():
    g = balanced_membership(10, 3)
    assert g.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]


def test_dgp2_variances_and_paths():
    assert np.allclose(dgp2_sigma2(4), 1.5 * np.array([1, 0.75, 0.5, 0.25]) ** 2)
    p = dgp3_mean_paths(4, 10)
    assert np.all(p[0] == p[0, 0]) and p[1, 0] != p[1, -1]
    assert np.all(np.diff(p[2]) > 0) and np.all(np.diff(p[3]) < 0)


@pytest.mark.parametrize("dgp", range(1, 8))
def test_generate_shapes_and_determinism(dgp):
    spec = DgpSpec(dgp_id=dgp, n_units=20, n_periods=8)
    a, ta = generate(spec, make_rng(5))
    b, tb = generate(spec, make_rng(5))
    assert a.y.shape == (20, 8) and a.holdout.shape == (20,)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.holdout, b.holdout)
    assert ta.unit_alpha_paths().shape == (20, 8)
    back = TrueParams.from_dict(json.loads(json.dumps(ta.to_dict())))
    assert np.array_equal(back.membership, ta.membership)


def test_unknown_dgp():
    with pytest.raises(UnknownDgp):
        DgpSpec(dgp_id=9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32), st.sampled_from([1, 2, 4]))
def test_generated_ar_recursion(seed, dgp):
    # y_t - rho y_{t-1} - alpha_it is the innovation; its scale matches sigma2
    data, truth = generate(DgpSpec(dgp_id=dgp, n_units=40, n_periods=6), make_rng(seed))
    y = np.column_stack([data.y, data.holdout])
    resid = y[:, 1:] - truth.rho * y[:, :-1] - truth.unit_alpha_paths()
    assert np.all(np.isfinite(resid))
    assert resid.var() < 5 * truth.unit_sigma2().max()


def test_initial_conditions():
    z, _ = generate(DgpSpec(dgp_id=3, n_units=8), make_rng(1))
    assert np.all(z.y[:, 0] == 0)
    s, _ = generate(DgpSpec(dgp_id=1, n_units=8, initial="stationary"), make_rng(1))
    assert np.all(s.y[:, 0] != 0)
    with pytest.raises(ValidationError):
        DgpSpec(initial="bogus")
