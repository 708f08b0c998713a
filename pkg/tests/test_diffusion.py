"""Noise schedule, forward corruption, component loss, and reverse updates."""

import dataclasses
import math

import numpy as np
import pytest

from fdp.diffusion import (
    NoisyAction,
    ScheduleError,
    component_loss,
    forward_noise,
    make_schedule,
    reverse_step,
    subsample_schedule,
)
from fdp.numerics import FeedForwardNet, Rng

from .oracles import (
    AnalyticGaussianDenoiser,
    FixedOutputDenoiser,
    PointMassDenoiser,
    central_diff,
    max_rel_err,
)


# ---------------------------------------------------------------------------
# make_schedule
# ---------------------------------------------------------------------------


def test_cosine_terminal_is_near_pure_noise():
    sched = make_schedule(100, "cosine")
    assert sched.alpha_bar[-1] < 0.01
    # oracle: squared-cosine profile with the documented 0.999 beta clip,
    # recomputed from scratch
    s = 0.008
    f = lambda x: math.cos((x + s) / (1 + s) * math.pi / 2.0) ** 2
    abar = 1.0
    prev = 1.0
    for k in range(1, 101):
        cur = f(k / 100) / f(0.0)
        beta = min(max(1.0 - cur / prev, 1e-8), 0.999)
        abar *= 1.0 - beta
        prev = cur
    assert sched.alpha_bar[-1] == pytest.approx(abar, rel=1e-12)


def test_abar_zero_is_exactly_one():
    for kind in ("cosine", "linear"):
        assert make_schedule(10, kind).alpha_bar[0] == 1.0


def test_linear_abar_strictly_decreasing():
    sched = make_schedule(100, "linear")
    assert np.all(np.diff(sched.alpha_bar) < 0.0)
    assert sched.betas[0] == pytest.approx(1e-4)
    assert sched.betas[-1] == pytest.approx(0.02)


@pytest.mark.parametrize("K", [2, 5, 50, 100, 250])
@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedule_invariants(K, kind):
    sched = make_schedule(K, kind)
    assert np.all(sched.betas > 0.0) and np.all(sched.betas < 1.0)
    assert np.all(np.diff(sched.betas) >= -1e-12)
    assert np.all(np.diff(sched.alpha_bar) < 0.0)
    assert sched.sigma[0] == 0.0
    assert np.all(sched.sigma >= 0.0)
    for arr in (sched.gamma, sched.sigma, sched.recip_sqrt_alpha):
        assert np.all(np.isfinite(arr))


def test_schedule_rejects_small_K_and_unknown_kind():
    with pytest.raises(ScheduleError):
        make_schedule(1)
    with pytest.raises(ScheduleError):
        make_schedule(10, "quadratic")


def test_schedule_json_round_trip():
    sched = make_schedule(30, "cosine")
    clone = type(sched).from_json(sched.to_json())
    np.testing.assert_array_equal(clone.betas, sched.betas)
    np.testing.assert_array_equal(clone.sigma, sched.sigma)
    assert clone.kind == sched.kind


# ---------------------------------------------------------------------------
# forward_noise
# ---------------------------------------------------------------------------


def test_forward_noise_k0_returns_clean_window():
    sched = make_schedule(20)
    a0 = Rng(1).gaussian(8)
    out = forward_noise(sched, a0, 0, np.zeros(8))
    np.testing.assert_array_equal(out.values, a0)
    assert out.k == 0


def test_forward_noise_zero_signal_is_scaled_noise():
    sched = make_schedule(20)
    eps = Rng(2).gaussian(6)
    k = 7
    out = forward_noise(sched, np.zeros(6), k, eps)
    np.testing.assert_allclose(
        out.values, math.sqrt(1.0 - sched.alpha_bar[k]) * eps, rtol=1e-15
    )


def test_forward_noise_length_mismatch():
    sched = make_schedule(10)
    with pytest.raises(ValueError):
        forward_noise(sched, np.zeros(4), 3, np.zeros(5))


def test_forward_noise_marginal_moments_monte_carlo():
    # oracle: E = sqrt(abar) a0, Var = (1 - abar) per coordinate
    sched = make_schedule(50)
    a0 = np.array([0.8, -0.3, 1.5])
    k = 20
    rng = Rng(77)
    n = 10**5
    draws = np.empty((n, 3))
    eps = rng.gaussian(3 * n).reshape(n, 3)
    ab = sched.alpha_bar[k]
    for i in range(3):
        draws[:, i] = math.sqrt(ab) * a0[i] + math.sqrt(1 - ab) * eps[:, i]
    expected_mean = math.sqrt(ab) * a0
    expected_var = (1.0 - ab) * np.ones(3)
    single = forward_noise(sched, a0, k, eps[0]).values
    np.testing.assert_allclose(single, draws[0], rtol=1e-12)
    assert np.all(np.abs(draws.mean(axis=0) - expected_mean) < 0.02)
    assert np.all(np.abs(draws.var(axis=0) / expected_var - 1.0) < 0.02)


# ---------------------------------------------------------------------------
# component_loss
# ---------------------------------------------------------------------------


class _EchoNoiseDenoiser:
    """Cheats by replaying the exact noise the loss drew (loss must be 0).

    Works because component_loss inverts the corruption: for known k and a0,
    eps = (noisy - sqrt(abar_k) a0) / sqrt(1 - abar_k).
    """

    def __init__(self, schedule, a0):
        self.schedule = schedule
        self.a0 = a0

    def predict(self, values, obs_embedding, k):
        ab = self.schedule.alpha_bar[k]
        return (values - math.sqrt(ab) * self.a0) / math.sqrt(1.0 - ab), None

    def backward(self, cache, grad_out):
        return {}, np.zeros_like(grad_out), None


def test_exact_noise_prediction_gives_zero_loss():
    sched = make_schedule(40)
    a0 = Rng(5).gaussian(10)
    loss, _ = component_loss(_EchoNoiseDenoiser(sched, a0), sched, a0, None, Rng(6))
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_zero_output_denoiser_loss_is_mean_eps_squared():
    sched = make_schedule(40)
    a0 = np.zeros(32)
    rng = Rng(7)
    losses = [
        component_loss(FixedOutputDenoiser(dim=32), sched, a0, None, rng)[0]
        for _ in range(2000)
    ]
    # E[mean(eps^2)] = 1; CLT bound at 2000 draws of 32-dim means
    assert abs(np.mean(losses) - 1.0) < 0.02


class _NetDenoiser:
    """Minimal parametric denoiser: net over [values | emb | k/K]."""

    def __init__(self, net, K):
        self.net = net
        self.K = K

    def predict(self, values, obs_embedding, k):
        x = np.concatenate([values, obs_embedding, [k / self.K]])
        return self.net.forward(x)

    def backward(self, cache, grad_out):
        grads, gx = self.net.backward(cache, grad_out)
        d = grad_out.shape[-1]
        e = gx.shape[-1] - d - 1
        return grads, gx[:d], gx[d : d + e]


def test_component_loss_gradients_match_finite_differences():
    sched = make_schedule(12)
    dim, emb_dim = 6, 3
    rng = Rng(9)
    net = FeedForwardNet.init([dim + emb_dim + 1, 8, dim], ["tanh", "identity"], rng)
    den = _NetDenoiser(net, sched.K)
    a0 = rng.gaussian(dim) * 0.5
    emb = rng.gaussian(emb_dim)

    loss, grads = component_loss(den, sched, a0, emb, Rng(31))

    def loss_fn():
        return component_loss(den, sched, a0, emb, Rng(31))[0]

    for path, p in net.params().items():
        numeric = central_diff(loss_fn, p)
        assert max_rel_err(grads.denoiser[path], numeric) <= 1e-4, path
    numeric_emb = central_diff(loss_fn, emb)
    assert max_rel_err(grads.obs_embedding, numeric_emb) <= 1e-4


# ---------------------------------------------------------------------------
# reverse_step
# ---------------------------------------------------------------------------


def test_reverse_with_analytic_standard_normal_score():
    # 10^4 independent 1-d chains run as one wide vector
    sched = make_schedule(100, "cosine")
    den = AnalyticGaussianDenoiser(sched, mu=0.0, var=1.0)
    rng = Rng(404)
    n = 10**4
    a = NoisyAction(sched.K, rng.gaussian(n))
    for k in range(sched.K, 0, -1):
        a = reverse_step(sched, den, a, None, k, rng)
    assert abs(a.values.mean()) < 0.05
    assert abs(a.values.var() - 1.0) < 0.03


def test_reverse_sigma_zero_point_mass_converges():
    sched = make_schedule(60)
    quiet = dataclasses.replace(sched, sigma=np.zeros(sched.K))
    c = 0.7
    den = PointMassDenoiser(quiet, c)
    a = NoisyAction(quiet.K, Rng(12).gaussian(5))
    for k in range(quiet.K, 0, -1):
        a = reverse_step(quiet, den, a, None, k, Rng(0))
    np.testing.assert_allclose(a.values, c, atol=1e-8)


def test_last_reverse_step_is_noise_free():
    sched = make_schedule(10)
    den = FixedOutputDenoiser(dim=4)
    a1 = NoisyAction(1, np.array([0.5, -0.5, 1.0, 0.0]))
    rng = Rng(55)
    out1 = reverse_step(sched, den, a1, None, 1, rng)
    out2 = reverse_step(sched, den, a1, None, 1, rng)
    np.testing.assert_array_equal(out1.values, out2.values)  # no rng consumed
    expected = sched.recip_sqrt_alpha[0] * a1.values
    np.testing.assert_allclose(out1.values, expected, rtol=1e-15)
    assert out1.k == 0


def test_subsampled_schedule_matches_parent_levels():
    sched = make_schedule(50, "cosine")
    coarse = subsample_schedule(sched, 5)
    assert coarse.K == 10
    np.testing.assert_array_equal(coarse.step_ids, np.arange(5, 51, 5))
    # signal levels at the kept steps are identical to the parent's
    np.testing.assert_allclose(
        coarse.alpha_bar[1:], sched.alpha_bar[coarse.step_ids], rtol=1e-12
    )
    assert coarse.sigma[0] == 0.0
    with pytest.raises(ScheduleError):
        subsample_schedule(sched, 0)
    with pytest.raises(ScheduleError):
        subsample_schedule(sched, 50)


def test_solver_exchange_leaves_model_unchanged():
    # re-sample one checkpoint with the native loop and a stride-2 loop:
    # only the sampling changes, the model does not
    from fdp.composition import sample_values

    sched = make_schedule(40, "cosine")
    rng = Rng(88)
    net = FeedForwardNet.init([8 + 3 + 1, 12, 8], ["tanh", "identity"], rng)
    den = _NetDenoiser(net, sched.K)
    before = net.checksum()
    w = np.array([1.0])

    full, info_full = sample_values([den], w, rng.gaussian(3), sched, 8, Rng(5))
    coarse_sched = subsample_schedule(sched, 2)
    coarse, info_coarse = sample_values([den], w, rng.gaussian(3), coarse_sched, 8, Rng(5))
    assert net.checksum() == before
    assert info_full.denoiser_evals == 40 and info_coarse.denoiser_evals == 20
    assert np.all(np.isfinite(full)) and np.all(np.isfinite(coarse))


def test_reverse_step_index_checks():
    sched = make_schedule(10)
    den = FixedOutputDenoiser(dim=2)
    with pytest.raises(ScheduleError):
        reverse_step(sched, den, NoisyAction(3, np.zeros(2)), None, 4, Rng(0))
    with pytest.raises(ScheduleError):
        reverse_step(sched, den, NoisyAction(0, np.zeros(2)), None, 0, Rng(0))
