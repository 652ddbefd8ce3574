import numpy as np
import pytest

from afgen import geometry as g
from afgen import integrate as it
from afgen.errors import DomainError, IntegrationError
from afgen.flow_match import target_direction
from afgen.payoff import Architecture, PayoffModel


def constant_model(c, payoff):
    """Payoff network whose output is the constant row ``payoff`` at every node."""
    arch = Architecture(c=c, hidden=4)
    theta = np.zeros(arch.num_params)
    theta[-c:] = payoff
    return PayoffModel(arch, theta)


def zero_model(c):
    return constant_model(c, np.zeros(c))


def test_tableau_consistency():
    assert it._B5.sum() == pytest.approx(1.0, abs=1e-15)
    assert it._B4.sum() == pytest.approx(1.0, abs=1e-15)
    for ci, row in zip(it._C[1:], it._A[1:]):
        assert sum(row) == pytest.approx(ci, abs=1e-14)


def test_zero_field_keeps_start(rng):
    x0 = g.project_tangent(rng.standard_normal((3, 2, 4)))
    res = it.integrate_batch(zero_model(4), x0, it.IntegratorConfig(early_exit=False))
    np.testing.assert_array_equal(res.y, x0)


def test_constant_field_closed_form(rng):
    c, lam, t_max = 3, 0.8, 6.0
    beta = np.array([3, 3])
    v = lam * target_direction(beta, c)[0]
    x0 = g.project_tangent(rng.standard_normal((5, 2, c)))
    cfg = it.IntegratorConfig(t_max=t_max, early_exit=False)
    res = it.integrate_batch(constant_model(c, v), x0, cfg)
    np.testing.assert_allclose(res.y, x0 + t_max * v, atol=1e-8)
    w = g.softmax(res.y)
    np.testing.assert_allclose(w, g.softmax(x0 + t_max * v), atol=1e-8)


def test_single_trajectory_stays_on_simplex(rng):
    traj = it.integrate(constant_model(3, [1.0, -0.5, -0.5]), g.project_tangent(rng.standard_normal((2, 3))),
                        it.IntegratorConfig(t_max=5.0, early_exit=False))
    assert traj.times[0] == 0.0 and traj.times[-1] == 5.0
    assert len(traj.chart_states) == traj.accepted + 1
    for x in traj.chart_states:
        w = g.softmax(x)
        assert np.all(w > 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-14)


def test_linear_decay_convergence_order(rng):
    k, t_max = 0.7, 10.0
    y0 = rng.standard_normal((4, 6))
    exact = y0 * np.exp(-k * t_max)
    steps, errors = [], []
    for rtol in np.logspace(-4, -8, 5):
        res = it.dopri5(lambda t, y: -k * y, y0, 0.0, t_max, rtol=rtol, atol=rtol * 1e-3)
        steps.append(t_max / res.accepted)
        errors.append(np.max(np.abs(res.y - exact)))
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert slope >= 4.0, slope


def test_backward_integration_reverses():
    y0 = np.array([[1.0, -2.0]])
    fwd = it.dopri5(lambda t, y: -0.5 * y, y0, 0.0, 3.0, rtol=1e-10, atol=1e-12)
    back = it.dopri5(lambda t, y: -0.5 * y, fwd.y, 3.0, 0.0, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(back.y, y0, atol=1e-8)


def test_max_steps_and_h_min_raise():
    with pytest.raises(IntegrationError):
        it.dopri5(lambda t, y: -y, np.ones((1, 2)), 0.0, 10.0, max_steps=3)
    with pytest.raises(IntegrationError):
        it.dopri5(lambda t, y: y**2, np.ones((1, 1)), 0.0, 2.0, h_min=1e-3)
    with pytest.raises(DomainError):
        it.IntegratorConfig(rtol=0.0)


def test_round_assignment_tie_break():
    assert it.round_assignment(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [1, 2]
    assert it.round_assignment(np.array([[0.3, 0.35, 0.35]])).tolist() == [2]


def test_rounding_matches_region(rng):
    w = g.softmax(3 * rng.standard_normal((2000, 3, 4)))
    beta = it.round_assignment(w)
    assert np.all(it.in_rounding_region(w, beta))
    other = beta.copy()
    other[:, 0] = other[:, 0] % 4 + 1
    assert not np.any(it.in_rounding_region(w, other))


def test_draw_categorical_frequencies(rng):
    w = np.tile([[0.1, 0.6, 0.3]], (60_000, 1))
    counts = np.bincount(it.draw_categorical(rng, w), minlength=4)[1:] / 60_000
    np.testing.assert_allclose(counts, [0.1, 0.6, 0.3], atol=4 * np.sqrt(0.25 / 60_000))


def test_zero_field_samples_are_uniform(rng):
    m, c = 30_000, 3
    labels, states = it.sample_arrays(zero_model(c), it.IntegratorConfig(t_max=2.0), rng, m, 2)
    assert labels.shape == (m, 2) and states.shape == (m, 2, c)
    freq = np.bincount((labels - 1)[:, 0] * c + labels[:, 1] - 1, minlength=c * c) / m
    np.testing.assert_allclose(freq, 1 / 9, atol=4 * np.sqrt((1 / 9) / m))


def test_early_exit_is_sound(rng):
    v = 2.0 * target_direction([1, 2], 2)
    model = constant_model(2, v[0])
    x0 = g.project_tangent(rng.standard_normal((200, 1, 2)))
    cfg = it.IntegratorConfig(t_max=15.0, h_max=0.5)
    early = it.integrate_batch(model, x0, cfg)
    full = it.integrate_batch(model, x0, cfg, early_exit=False)
    assert np.any(early.t_end < cfg.t_max)
    stopped = early.t_end < cfg.t_max
    assert np.all(it.near_vertex(early.y[stopped], cfg.early_exit_tol))
    np.testing.assert_array_equal(it.round_assignment(g.softmax(early.y)),
                                  it.round_assignment(g.softmax(full.y)))


def test_sampling_is_deterministic(rng):
    model = PayoffModel.init(Architecture(c=3, hidden=4), rng, zero_final=False)
    cfg = it.IntegratorConfig(t_max=3.0, rtol=1e-5)
    a = it.sample_arrays(model, cfg, np.random.default_rng(4), 300, 2, chunk_size=128)
    b = it.sample_arrays(model, cfg, np.random.default_rng(4), 300, 2, chunk_size=128)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    pairs = it.sample(model, cfg, np.random.default_rng(4), 3, 2, variant="rounding", chunk_size=128)
    assert all(np.all(lab == it.round_assignment(w)) for lab, w in pairs)


def test_sampling_failure_names_chunk(rng):
    cfg = it.IntegratorConfig(max_steps=2, early_exit=False)
    with pytest.raises(IntegrationError) as info:
        it.sample_arrays(constant_model(2, [1.0, -1.0]), cfg, rng, 10, 1, chunk_size=4)
    assert info.value.index == 0
    with pytest.raises(DomainError):
        it.sample_arrays(zero_model(2), cfg, rng, 1, 1, variant="mode")
