import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from curbzones.exceptions import ComponentCollapse, InvalidInputError, InvalidModelError
from curbzones.mixture import (
    EMConfig,
    MinMaxFeatures,
    ZoneMixture,
    ZoneModel,
    assign,
    bic,
    denormalize,
    e_step,
    em_fit,
    fit_norm_params,
    fit_slice,
    log_likelihood,
    m_step,
    n_parameters,
    normalize,
)
from curbzones.synth import (
    oracle_log_likelihood,
    oracle_responsibilities,
    oracle_weighted_moments,
)

FAST = EMConfig(restarts=3, seed=7)


def model(weights, means, variances):
    d = np.atleast_2d(means).shape[1]
    return ZoneModel(weights, means, variances, np.tile([0.0, 1.0], (d, 1)))


def random_model(rng, k=3, d=3):
    w = rng.dirichlet(np.ones(k))
    return model(w, rng.uniform(0, 1, (k, d)), rng.uniform(0.01, 0.2, (k, d)))


def blobs(rng, centers, per=40, scale=0.03):
    centers = np.asarray(centers, dtype=float)
    x = np.concatenate([c + rng.normal(0, scale, (per, centers.shape[1])) for c in centers])
    return x, np.repeat(np.arange(len(centers)), per)


# ------------------------------------------------------------------ likelihood


def test_single_point_log_likelihood():
    m = model([1.0], [[0.2, 0.4, 0.6]], [[1.0, 1.0, 1.0]])
    # -(d/2) ln(2 pi) with d = 3
    assert log_likelihood([[0.2, 0.4, 0.6]], m) == pytest.approx(-2.756815599614018, abs=1e-12)


def test_duplicated_data_doubles_log_likelihood(rng):
    m = random_model(rng)
    x = rng.uniform(0, 1, (17, 3))
    assert log_likelihood(np.vstack([x, x]), m) == pytest.approx(2 * log_likelihood(x, m), rel=1e-14)


def test_log_likelihood_matches_oracle(rng):
    for _ in range(5):
        m = random_model(rng)
        x = rng.uniform(0, 1, (30, 3))
        expected = oracle_log_likelihood(x, m.weights, m.means, m.variances)
        assert abs(log_likelihood(x, m) - expected) <= 1e-9


def test_log_likelihood_is_stable_far_from_every_component():
    m = model([0.5, 0.5], [[0, 0, 0], [1, 1, 1]], np.full((2, 3), 1e-6))
    ll = log_likelihood([[0.5, 0.5, 0.5]], m)
    assert math.isfinite(ll)


def test_invalid_model_is_rejected():
    bad = model([0.7, 0.7], [[0, 0, 0], [1, 1, 1]], np.ones((2, 3)))
    with pytest.raises(InvalidModelError):
        log_likelihood([[0, 0, 0]], bad)
    low = model([1.0], [[0, 0, 0]], [[1e-9, 1, 1]])
    with pytest.raises(InvalidModelError):
        e_step([[0, 0, 0]], low)


# ---------------------------------------------------------------------- E step


def test_e_step_symmetric_point():
    m = model([0.5, 0.5], [[0, 0, 0], [1, 0, 0]], np.ones((2, 3)))
    np.testing.assert_allclose(e_step([[0.5, 0, 0]], m), [[0.5, 0.5]], atol=1e-15)


def test_e_step_single_component(rng):
    m = random_model(rng, k=1)
    np.testing.assert_array_equal(e_step(rng.uniform(0, 1, (9, 3)), m), np.ones((9, 1)))


def test_e_step_matches_oracle(rng):
    m = random_model(rng, k=4)
    x = rng.uniform(0, 1, (25, 3))
    resp = e_step(x, m)
    np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(resp, oracle_responsibilities(x, m.weights, m.means, m.variances),
                               atol=1e-9)


# ---------------------------------------------------------------------- M step


def test_m_step_one_hot():
    x = np.array([[0.0, 0.0, 0.0], [0.2, 0.4, 0.0], [1.0, 1.0, 1.0], [0.8, 1.0, 0.6]])
    r = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
    w, mu, var = m_step(x, r)
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(mu, [[0.1, 0.2, 0.0], [0.9, 1.0, 0.8]], atol=1e-12)
    # the middle coordinate of cluster 1 has zero spread and hits the floor
    np.testing.assert_allclose(var, [[0.01, 0.04, 1e-6], [0.01, 1e-6, 0.04]], atol=1e-12)


def test_m_step_uniform_responsibilities_give_global_moments(rng):
    x = rng.uniform(0, 1, (50, 3))
    w, mu, var = m_step(x, np.full((50, 2), 0.5))
    np.testing.assert_allclose(w, [0.5, 0.5])
    for j in range(2):
        np.testing.assert_allclose(mu[j], x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(var[j], x.var(axis=0), atol=1e-12)


def test_m_step_matches_oracle(rng):
    x = rng.uniform(0, 1, (40, 3))
    r = rng.dirichlet(np.ones(3), size=40)
    got = m_step(x, r)
    for a, b in zip(got, oracle_weighted_moments(x, r)):
        np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)


def test_m_step_collapse():
    x = np.zeros((10, 3))
    r = np.column_stack([np.ones(10), np.zeros(10)])
    with pytest.raises(ComponentCollapse) as info:
        m_step(x, r)
    assert info.value.components == [1]


def test_m_step_rejects_non_stochastic():
    with pytest.raises(InvalidInputError):
        m_step(np.zeros((2, 3)), [[0.4, 0.4], [0.5, 0.5]])


# ------------------------------------------------------------------- full fit


def test_single_component_closed_form(rng):
    x = rng.uniform(0, 1, (60, 3))
    m = em_fit(x, 1, FAST)
    np.testing.assert_allclose(m.weights, [1.0])
    np.testing.assert_allclose(m.means[0], x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(m.variances[0], x.var(axis=0), atol=1e-12)


def test_recovers_separated_clusters(rng):
    x, truth = blobs(rng, [[0.1, 0.1, 0.2], [0.5, 0.9, 0.5], [0.9, 0.2, 0.8]])
    m = em_fit(x, 3, FAST)
    # each recovered component maps onto exactly one true cluster
    pairs = set(zip(truth.tolist(), m.assignments.tolist()))
    assert len(pairs) == 3


def test_fit_is_bitwise_deterministic(rng):
    x, _ = blobs(rng, [[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]])
    a = em_fit(x, 2, FAST)
    b = em_fit(x, 2, FAST)
    assert a.to_json() == b.to_json()


def test_log_likelihood_never_decreases(rng):
    x, _ = blobs(rng, [[0.2, 0.2, 0.2], [0.8, 0.8, 0.8], [0.2, 0.8, 0.5]], scale=0.15)
    m = em_fit(x, 4, EMConfig(restarts=1, seed=3, epsilon=0.0, max_iter=60))
    diffs = np.diff(m.ll_history)
    assert np.all(diffs >= -1e-9)
    assert m.log_likelihood == pytest.approx(log_likelihood(x, m), abs=1e-9)


def test_fitted_model_invariants(rng):
    x = rng.uniform(0, 1, (80, 3))
    m = em_fit(x, 5, FAST)
    m.validate()
    assert abs(m.weights.sum() - 1.0) <= 1e-9
    assert np.all(m.variances >= 1e-6)


def test_too_few_points():
    with pytest.raises(InvalidInputError):
        em_fit(np.zeros((2, 3)), 3)


def test_assign_reproduces_fit_labels(rng):
    x, _ = blobs(rng, [[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]])
    m = em_fit(x, 2, FAST)
    labels = assign(x, m)
    np.testing.assert_array_equal(labels, m.assignments)
    np.testing.assert_array_equal(assign(x, m), labels)


def test_assign_tie_goes_to_lowest_index():
    m = model([0.5, 0.5], [[0, 0, 0], [1, 0, 0]], np.ones((2, 3)))
    assert assign([[0.5, 0, 0]], m).tolist() == [0]


def test_permutation_invariance(rng):
    x, _ = blobs(rng, [[0.1, 0.5, 0.2], [0.9, 0.5, 0.8], [0.5, 0.1, 0.5]])
    m = em_fit(x, 3, FAST)
    order = [2, 0, 1]
    p = m.permuted(order)
    assert log_likelihood(x, p) == pytest.approx(log_likelihood(x, m), abs=1e-12)
    np.testing.assert_array_equal(np.asarray(order)[assign(x, p)], assign(x, m))


def test_json_round_trip_is_lossless(rng):
    m = fit_slice(rng.uniform(0, 1, (30, 3)) * [0.01, 0.01, 1.2] + [47.6, -122.3, 0], 2, FAST)
    back = ZoneModel.from_json(m.to_json())
    for name in ("weights", "means", "variances", "norm_params", "assignments"):
        np.testing.assert_array_equal(getattr(back, name), getattr(m, name))
    assert back.log_likelihood == m.log_likelihood


def test_from_dict_checks_k(rng):
    doc = random_model(rng, k=2).to_dict()
    doc["k"] = 3
    with pytest.raises(InvalidModelError):
        ZoneModel.from_dict(doc)


# ------------------------------------------------------------------------ BIC


def test_bic_example():
    m = model([0.5, 0.5], np.zeros((2, 3)), np.ones((2, 3)))
    m.log_likelihood = -100.0
    # 200 + 14 ln 50 = 254.768322...
    assert bic(m, 50) == pytest.approx(254.768322, abs=1e-6)


def test_parameter_count():
    assert n_parameters(1) == 7
    assert n_parameters(4) == 28
    # BIC penalty is linear in k for fixed n and log likelihood
    m2 = model(np.full(2, 0.5), np.zeros((2, 3)), np.ones((2, 3)))
    m4 = model(np.full(4, 0.25), np.zeros((4, 3)), np.ones((4, 3)))
    m2.log_likelihood = m4.log_likelihood = 0.0
    assert bic(m4, 30) == pytest.approx(2 * bic(m2, 30), rel=1e-15)


# -------------------------------------------------------------- normalization


finite_rows = arrays(
    float, st.tuples(st.integers(2, 12), st.just(3)),
    elements=st.floats(-200, 200, allow_nan=False, allow_infinity=False, width=64),
)


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_normalization_round_trip(raw):
    params = fit_norm_params(raw)
    z = normalize(raw, params)
    assert np.all(z >= 0) and np.all(z <= 1)
    back = denormalize(z, params)
    spans = params[:, 1] - params[:, 0]
    varying = spans > 0
    scale = np.maximum(np.abs(params).max(axis=1), 1.0)
    err = np.abs(back - raw)[:, varying]
    assert np.all(err <= 1e-12 * scale[varying])


def test_constant_column_maps_to_zero():
    raw = np.array([[1.0, 5.0, 0.3], [2.0, 5.0, 0.6]])
    z = normalize(raw, fit_norm_params(raw))
    np.testing.assert_array_equal(z[:, 1], [0.0, 0.0])
    np.testing.assert_array_equal(z[:, 0], [0.0, 1.0])


# -------------------------------------------------------------- estimator API


def test_zone_mixture_estimator(rng):
    raw, truth = blobs(rng, [[47.60, -122.33, 0.2], [47.62, -122.35, 0.8]], scale=0.002)
    est = ZoneMixture(n_components=2, n_init=3, random_state=1)
    assert est.get_params()["n_components"] == 2
    labels = est.fit_predict(raw)
    np.testing.assert_array_equal(labels, est.labels_)
    np.testing.assert_array_equal(est.predict(raw), labels)
    assert len(set(zip(truth.tolist(), labels.tolist()))) == 2
    np.testing.assert_allclose(est.predict_proba(raw).sum(axis=1), 1.0, atol=1e-12)
    assert est.score(raw) * len(raw) == pytest.approx(est.log_likelihood_, abs=1e-8)
    assert est.bic(raw) == pytest.approx(bic(est.model_, len(raw)), abs=1e-6)


def test_estimator_clone_and_set_params():
    est = ZoneMixture(n_components=3, tol=1e-4)
    twin = clone(est).set_params(n_components=5)
    assert est.n_components == 3 and twin.n_components == 5 and twin.tol == 1e-4


def test_estimator_requires_fit():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        ZoneMixture().predict(np.zeros((3, 3)))


def test_min_max_transformer(rng):
    x = rng.normal(size=(20, 3))
    t = MinMaxFeatures().fit(x)
    np.testing.assert_allclose(t.inverse_transform(t.transform(x)), x, atol=1e-12)
    with pytest.raises(InvalidInputError):
        t.transform(np.zeros((2, 2)))
