import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp

from ldct_ldm.schedule import (build_cosine_schedule, ddim_step, ddpm_step, forward_diffuse,
                               linear_beta_schedule, make_timestep_subsequence)


@pytest.fixture(scope="module")
def sched():
    return build_cosine_schedule(1000, 0.008)


def _mp_alpha_bar(t, T=1000, eps="0.008"):
    mp.dps = 40
    e = mp.mpf(eps)
    f = lambda s: mp.cos((mp.mpf(s) / T + e) / (1 + e) * mp.pi / 2) ** 2
    return f(t) / f(0)


def test_alpha_bar_endpoints(sched):
    assert sched.alpha_bar[0] == 1.0
    assert sched.alpha_bar[1000] == pytest.approx(0.0, abs=1e-15)
    assert sched.alpha_bar.dtype == np.float64


def test_alpha_bar_500_against_high_precision(sched):
    oracle = float(_mp_alpha_bar(500))
    # oracle is 0.493844; the quoted four-digit value 0.4939 is within 1e-4
    assert oracle == pytest.approx(0.4939, abs=1e-4)
    assert sched.alpha_bar[500] == pytest.approx(oracle, rel=1e-13)


def test_beta_1_against_high_precision(sched):
    oracle = float(1 - _mp_alpha_bar(1) / _mp_alpha_bar(0))
    assert oracle == pytest.approx(4.1e-5, rel=0.05)
    assert sched.beta[1] == pytest.approx(oracle, rel=1e-12)


def test_beta_matches_ratio_definition(sched):
    t = np.arange(1, 1000)
    ratio = 1 - sched.alpha_bar[t] / sched.alpha_bar[t - 1]
    np.testing.assert_allclose(sched.beta[t], ratio, rtol=1e-9, atol=1e-15)
    assert sched.beta[1000] == 1.0  # zero terminal SNR


def test_one_minus_alpha_bar_consistent(sched):
    np.testing.assert_allclose(sched.one_minus_alpha_bar, 1 - sched.alpha_bar, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 10000), st.floats(1e-4, 0.5))
def test_invariants_over_T(T, eps):
    s = build_cosine_schedule(T, eps)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    b = s.beta[1:T]
    assert np.all((b > 0) & (b < 1))
    if T >= 100:
        assert 0 <= s.alpha_bar[T] < 1e-4


@pytest.mark.parametrize("T, eps", [(0, 0.008), (-3, 0.008), (10, 0.0), (10, -1.0), (2.5, 0.008)])
def test_bad_arguments(T, eps):
    with pytest.raises(ValueError):
        build_cosine_schedule(T, eps)


def test_linear_contrast_schedule_not_zero_terminal():
    s = linear_beta_schedule(1000)
    assert s.alpha_bar[-1] > 0
    assert np.all(np.diff(s.alpha_bar) < 0)


# forward diffusion

def test_forward_diffuse_small_t_keeps_signal(sched):
    z0 = np.random.default_rng(0).normal(size=(4, 4))
    n = np.random.default_rng(1).normal(size=(4, 4))
    out = forward_diffuse(z0, 1, n, sched)
    assert np.max(np.abs(out - z0)) < 0.05


def test_forward_diffuse_zero_signal(sched):
    n = np.random.default_rng(1).normal(size=(3, 5))
    out = forward_diffuse(np.zeros((3, 5)), 321, n, sched)
    np.testing.assert_array_equal(out, math.sqrt(sched.one_minus_alpha_bar[321]) * n)


def test_forward_diffuse_variance_preserving(sched):
    rng = np.random.default_rng(7)
    n_el = 200_000
    out = forward_diffuse(rng.normal(size=n_el), 500, rng.normal(size=n_el), sched)
    se = math.sqrt(2.0 / (n_el - 1))  # std error of the sample variance of N(0, 1)
    assert abs(out.var(ddof=1) - 1.0) < 3 * se


def test_forward_diffuse_errors(sched):
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 10, np.zeros(4), sched)
    for t in (0, 1001, 2.5):
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros(3), t, np.zeros(3), sched)


def test_forward_diffuse_torch_keeps_dtype(sched):
    z = torch.randn(2, 3)
    assert forward_diffuse(z, 10, torch.randn(2, 3), sched).dtype == torch.float32


# DDIM

def test_ddim_exact_noise_identity(sched):
    rng = np.random.default_rng(3)
    z0, n = rng.normal(size=(8,)), rng.normal(size=(8,))
    zt = forward_diffuse(z0, 600, n, sched)
    out = ddim_step(zt, n, 600, 400, sched)
    expected = math.sqrt(sched.alpha_bar[400]) * z0 + math.sqrt(1 - sched.alpha_bar[400]) * n
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_ddim_zero_eps_reduction(sched):
    zt = np.random.default_rng(4).normal(size=(5,))
    out = ddim_step(zt, np.zeros(5), 700, 650, sched)
    np.testing.assert_allclose(out, math.sqrt(sched.alpha_bar[650] / sched.alpha_bar[700]) * zt, rtol=1e-12)


def test_ddim_deterministic_bitwise(sched):
    zt, eps = torch.randn(4, 4), torch.randn(4, 4)
    a = ddim_step(zt, eps, 500, 467, sched)
    b = ddim_step(zt.clone(), eps.clone(), 500, 467, sched)
    assert torch.equal(a, b)


def test_ddim_errors(sched):
    z = np.zeros(3)
    with pytest.raises(ValueError):
        ddim_step(z, z, 10, 10, sched)
    with pytest.raises(ValueError):
        ddim_step(z, z, 10, 20, sched)
    with pytest.raises(ValueError):
        ddim_step(z, z, 1001, 0, sched)
    with pytest.raises(ValueError):
        ddim_step(z, np.zeros(4), 10, 5, sched)


def _ideal_eps(z0, sched):
    def eps(zt, t):
        return (zt - math.sqrt(sched.alpha_bar[t]) * z0) / math.sqrt(sched.one_minus_alpha_bar[t])
    return eps


@pytest.mark.parametrize("dtype, tol", [(np.float32, 1e-4), (np.float64, 1e-10)])
@pytest.mark.parametrize("num_steps", [30, 1000, 7])
def test_ddim_round_trip_with_oracle(sched, dtype, tol, num_steps):
    rng = np.random.default_rng(11)
    z0 = rng.normal(size=(4, 16, 16)).astype(dtype)
    z = rng.normal(size=z0.shape).astype(dtype)
    eps = _ideal_eps(z0, sched)
    for t, t_prev in make_timestep_subsequence(1000, num_steps).pairs():
        z = ddim_step(z, eps(z, t).astype(dtype), t, t_prev, sched).astype(dtype)
    assert np.max(np.abs(z - z0)) < tol


# DDPM

def test_ddpm_t1_ignores_noise(sched):
    zt, eps = np.ones(4), np.full(4, 0.3)
    a = ddpm_step(zt, eps, 1, sched, np.zeros(4))
    b = ddpm_step(zt, eps, 1, sched, np.full(4, 100.0))
    np.testing.assert_array_equal(a, b)


def test_ddpm_zero_eps_zero_noise(sched):
    zt = np.random.default_rng(5).normal(size=(6,))
    out = ddpm_step(zt, np.zeros(6), 300, sched, np.zeros(6))
    np.testing.assert_allclose(out, zt / math.sqrt(1 - sched.beta[300]), rtol=1e-12)


def test_ddpm_deterministic_given_noise(sched):
    g = torch.Generator().manual_seed(0)
    zt, eps, n = (torch.randn(3, 3, generator=g) for _ in range(3))
    assert torch.equal(ddpm_step(zt, eps, 50, sched, n), ddpm_step(zt, eps, 50, sched, n))


def test_ddpm_errors(sched):
    with pytest.raises(ValueError):
        ddpm_step(np.zeros(3), np.zeros(3), 0, sched, np.zeros(3))
    with pytest.raises(ValueError):
        ddpm_step(np.zeros(3), np.zeros(3), 5, sched, np.zeros(2))


def test_ddpm_posterior_mean_chain_recovers_z0(sched):
    # zero injected noise: the chain follows the posterior mean and lands on z0
    rng = np.random.default_rng(2)
    z0 = rng.normal(size=(32,))
    z = rng.normal(size=(32,))
    eps = _ideal_eps(z0, sched)
    for t in range(1000, 0, -1):
        z = ddpm_step(z, eps(z, t), t, sched, np.zeros_like(z))
    assert np.max(np.abs(z - z0)) < 1e-8


# subsequence

def test_subsequence_identity():
    assert make_timestep_subsequence(1000, 1000).steps == tuple(range(1000, 0, -1))


def test_subsequence_30():
    sub = make_timestep_subsequence(1000, 30)
    assert sub.count == 30 and sub.steps[0] == 1000 and sub.steps[-1] > 0
    assert all(a > b for a, b in zip(sub.steps, sub.steps[1:]))
    assert sub.pairs()[-1][1] == 0


def test_subsequence_hand_example():
    assert make_timestep_subsequence(10, 5).steps == (10, 8, 6, 4, 2)


@given(st.integers(1, 3000), st.data())
def test_subsequence_properties(T, data):
    n = data.draw(st.integers(1, T))
    s = make_timestep_subsequence(T, n).steps
    assert len(s) == n and s[0] == T and s[-1] > 0
    assert all(a > b for a, b in zip(s, s[1:]))


def test_subsequence_errors():
    with pytest.raises(ValueError):
        make_timestep_subsequence(10, 11)
    with pytest.raises(ValueError):
        make_timestep_subsequence(10, 0)


def test_loop_time_linear_in_steps(sched):
    # constant-cost mock predictor: wall-clock scales with the subsequence length
    def run(n):
        z = np.zeros(64)
        t0 = time.perf_counter()
        for t, t_prev in make_timestep_subsequence(1000, n).pairs():
            time.sleep(0.002)
            z = ddim_step(z, np.zeros(64), t, t_prev, sched)
        return time.perf_counter() - t0

    t50, t200 = run(50), run(200)
    assert t200 / t50 == pytest.approx(4.0, rel=0.2)


def test_dump_text(sched):
    lines = build_cosine_schedule(10).to_text().splitlines()
    assert lines[0].split()[1:] == ["t", "alpha_bar", "beta"]
    assert len(lines) == 12
    assert float(lines[1].split()[1]) == 1.0
