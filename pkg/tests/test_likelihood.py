import math

import numpy as np
import pytest

from afgen import likelihood as lk
from afgen import meta_simplex as ms
from afgen.errors import DomainError
from afgen.flow_match import target_direction
from afgen.integrate import IntegratorConfig, integrate_batch
from afgen.payoff import Architecture, PayoffModel

LOG_2PI = math.log(2 * math.pi)


def constant_model(c, payoff):
    arch = Architecture(c=c, hidden=4)
    theta = np.zeros(arch.num_params)
    theta[-c:] = payoff
    return PayoffModel(arch, theta)


def random_model(c, seed=0, scale=0.5):
    r = np.random.default_rng(seed)
    model = PayoffModel.init(Architecture(c=c, hidden=6), r, zero_final=False)
    return model.with_theta(model.theta + scale * r.standard_normal(model.theta.size))


def exact_probe(**kw):
    return lk.LikelihoodConfig(hutchinson_dist="exact", **kw)


def test_chart_coordinates_round_trip(rng):
    chart = lk.Chart(3, 4)
    assert chart.dim == 9
    z = rng.standard_normal((5, 9))
    np.testing.assert_allclose(chart.to_z(chart.to_x(z)), z, atol=1e-14)
    np.testing.assert_allclose(chart.to_x(z).sum(axis=-1), 0.0, atol=1e-14)


def test_zero_field_density_at_origin():
    for n, c in [(1, 2), (2, 3), (3, 4)]:
        d = n * (c - 1)
        value = lk.log_density_at(constant_model(c, np.zeros(c)), np.zeros((n, c)))
        assert value == pytest.approx(-0.5 * d * LOG_2PI, abs=1e-12)


def test_constant_field_density_is_shifted_gaussian(rng):
    c, lam, t_max = 3, 1.0, 4.0
    v = lam * target_direction([2, 2], c)
    model = constant_model(c, v[0])
    chart = lk.Chart(2, c)
    x = chart.to_x(rng.standard_normal((6, chart.dim)))
    got = lk.log_density_batch(model, x, integ=IntegratorConfig(t_max=t_max), rng=rng)
    expect = lk.base_log_density(chart.to_z(x - t_max * v))
    np.testing.assert_allclose(got, expect, atol=1e-8)


def test_hutchinson_is_unbiased_for_trace(rng):
    model = random_model(3)
    chart = lk.Chart(2, 3)
    z = rng.standard_normal((1, chart.dim))
    exact = lk.divergence_terms(model, chart, z, 0.7, np.eye(chart.dim)[None]).sum()
    for dist in ("rademacher", "gaussian"):
        probes = lk.draw_probes(rng, (1, 10_000, chart.dim), dist)
        terms = lk.divergence_terms(model, chart, z, 0.7, probes)[0]
        se = terms.std(ddof=1) / math.sqrt(terms.size)
        assert abs(terms.mean() - exact) < 3 * se + 1e-9


def test_exact_trace_matches_flow_map_jacobian(rng):
    model = random_model(3, seed=2)
    integ = IntegratorConfig(t_max=2.0, rtol=1e-10, atol=1e-12, early_exit=False)
    chart = lk.Chart(1, 3)
    z0 = rng.standard_normal(chart.dim)

    def flow(z):
        return chart.to_z(integrate_batch(model, chart.to_x(z)[None], integ).y[0])

    h = 1e-5
    J = np.stack([(flow(z0 + h * e) - flow(z0 - h * e)) / (2 * h) for e in np.eye(chart.dim)], axis=1)
    x_end = chart.to_x(flow(z0))
    got = lk.log_density_batch(model, x_end[None], exact_probe(), integ=integ)[0]
    expect = lk.base_log_density(z0) - math.log(abs(np.linalg.det(J)))
    assert got == pytest.approx(expect, abs=1e-6)


def test_single_node_zero_field_gives_half(rng):
    model = constant_model(2, np.zeros(2))
    cfg = lk.LikelihoodConfig(num_proposal_samples=50, proposal_center_time=0.0)
    reps = np.array([math.exp(lk.log_likelihood(model, [1], cfg, rng).log_prob) for _ in range(200)])
    assert abs(reps.mean() - 0.5) < 3 * reps.std(ddof=1) / math.sqrt(reps.size)


def test_probabilities_sum_to_one():
    model = constant_model(3, np.zeros(3))
    cfg = lk.LikelihoodConfig(num_proposal_samples=200, proposal_center_time=0.0)
    # common random numbers: every beta sees the same proposal draws
    total = sum(math.exp(lk.log_likelihood(model, beta, cfg, np.random.default_rng(9)).log_prob)
                for beta in ms.all_configs(2, 3))
    assert total == pytest.approx(1.0, abs=1e-10)


def test_logmeanexp_spans_600_orders_of_magnitude():
    gap = 600 * math.log(10)
    lw = np.array([-1000.0, -1000.0 - gap, -1000.0 - 2 * gap])
    log_mean, se, ess = lk.logmeanexp_with_error(lw)
    assert log_mean == pytest.approx(-1000.0 - math.log(3))
    assert math.isfinite(se) and ess == pytest.approx(1.0)
    assert lk.logmeanexp_with_error([-math.inf, -math.inf])[0] == -math.inf
    with pytest.raises(DomainError):
        lk.logmeanexp_with_error([0.0, math.nan])


def test_logmeanexp_error_and_ess():
    log_mean, se, ess = lk.logmeanexp_with_error(np.zeros(10))
    assert log_mean == 0.0 and se == 0.0 and ess == pytest.approx(10.0)


def test_kl_surrogate_with_exact_oracle():
    p = ms.DenseJoint(np.array([0.4, 0.1, 0.2, 0.3]), 2, 2)
    q = np.array([0.5, 0.0, 0.25, 0.25])
    data = np.repeat(ms.all_configs(2, 2), (q * 8).astype(int), axis=0)
    out = lk.kl_surrogate(p, data)
    nz = q > 0
    h_q = -np.sum(q[nz] * np.log(q[nz]))
    kl = np.sum(q[nz] * np.log(q[nz] / p.probs[nz]))
    assert out["nats"] == pytest.approx(h_q + kl)
    assert out["nats"] >= h_q
    assert out["failed"] == 0


def test_kl_surrogate_uniform_is_one_bit_per_dim(rng):
    data = rng.integers(1, 3, size=(20, 4))
    assert lk.kl_surrogate(ms.DenseJoint.uniform(4, 2), data)["bits_per_dim"] == pytest.approx(1.0)
    cfg = lk.LikelihoodConfig(num_proposal_samples=400, proposal_center_time=0.0)
    out = lk.kl_surrogate(constant_model(2, np.zeros(2)), data[:3], cfg, rng)
    assert out["bits_per_dim"] == pytest.approx(1.0, abs=0.1)


def test_kl_surrogate_repeated_datum():
    p = ms.DenseJoint(np.array([0.4, 0.1, 0.2, 0.3]), 2, 2)
    assert lk.kl_surrogate(p, [[2, 1]] * 5)["nats"] == pytest.approx(-math.log(0.2))
    with pytest.raises(DomainError):
        lk.kl_surrogate(p, np.zeros((0, 2), dtype=int))


def test_rounding_variant_flags_empty_region(rng):
    model = constant_model(2, np.zeros(2))
    # a proposal centred on the opposite vertex never lands in the region of beta
    cfg = lk.LikelihoodConfig(num_proposal_samples=20, model_variant="rounding", lambda_rate=-1.0,
                              proposal_sigma=0.1)
    res = lk.log_likelihood(model, [1, 2], cfg, rng)
    assert res.log_prob == -math.inf and "no_proposal_in_region" in res.flags
    out = lk.kl_surrogate(model, [[1, 2]], cfg, rng)
    assert out["failed"] == 1 and out["nats"] == math.inf


def test_rounding_variant_single_node(rng):
    cfg = lk.LikelihoodConfig(num_proposal_samples=400, model_variant="rounding", proposal_center_time=0.0)
    res = lk.log_likelihood(constant_model(2, np.zeros(2)), [2], cfg, rng)
    assert math.exp(res.log_prob) == pytest.approx(0.5, abs=4 * 0.5 / math.sqrt(400))
    assert res.flags == []


def test_config_validation():
    with pytest.raises(DomainError):
        lk.LikelihoodConfig(num_proposal_samples=0)
    with pytest.raises(DomainError):
        lk.LikelihoodConfig(hutchinson_dist="uniform")
    with pytest.raises(DomainError):
        lk.LikelihoodConfig(model_variant="mode")
    with pytest.raises(DomainError):
        lk.log_density_at(constant_model(2, np.zeros(2)), np.array([[np.nan, 0.0]]))
