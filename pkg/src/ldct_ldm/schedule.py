"""Cosine noise schedule, forward diffusion and the reverse-step update rules.

Schedule tables are float64. The step functions accept numpy arrays or torch
tensors; the schedule coefficients enter as python floats so the result keeps
the dtype of the latent it was given.

Conventions:
    alpha_bar is indexed t = 0..T with alpha_bar[0] == 1.
    beta is stored with a dummy entry at index 0 so that beta[t] is the
    increment of step t for t = 1..T.

At t = T the cosine schedule reaches alpha_bar == 0 exactly (the angle hits
pi/2). The clean-latent estimate (z_t - sqrt(1 - a) * eps) / sqrt(a) is then
0/0, so both reverse rules fall back to the prior mean of the latent space
(zero) for that single step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

DEFAULT_T = 1000
DEFAULT_EPS = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    eps_sched: float
    alpha_bar: np.ndarray  # (T + 1,)
    beta: np.ndarray  # (T + 1,), beta[0] unused (0.0)
    one_minus_alpha_bar: np.ndarray  # (T + 1,), computed without cancellation

    def check_step(self, t: int, name: str = "t", lo: int = 1) -> int:
        if isinstance(t, bool) or int(t) != t:
            raise ValueError(f"{name} must be an integer step index, got {t!r}")
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"{name}={t} outside [{lo}, {self.T}]")
        return t

    def to_text(self) -> str:
        """Plain-text column dump: ``t alpha_bar beta`` one row per step."""
        lines = ["# t alpha_bar beta"]
        for t in range(self.T + 1):
            b = self.beta[t] if t > 0 else float("nan")
            lines.append(f"{t} {self.alpha_bar[t]:.17e} {b:.17e}")
        return "\n".join(lines) + "\n"


def _half_pi_sin(s: Fraction) -> float:
    # sin(pi/2 * s) for s in [0, 2], reflected so the float argument stays small
    if s > 1:
        s = 2 - s
    return math.sin(math.pi / 2 * float(s))


def _half_pi_cos(a: Fraction) -> float:
    # cos(pi/2 * a) for a in [0, 1]; the sine form near 1 keeps relative accuracy
    if a <= Fraction(1, 2):
        return math.cos(math.pi / 2 * float(a))
    return math.sin(math.pi / 2 * float(1 - a))


def build_cosine_schedule(T: int = DEFAULT_T, eps_sched: float = DEFAULT_EPS) -> NoiseSchedule:
    """Build alpha_bar / beta tables for the offset cosine schedule.

    The fraction t/T and the offset stay exact rationals until the final
    trigonometric call. beta is evaluated through the product-to-sum identity
    cos^2 A - cos^2 B = sin(A + B) sin(B - A), which avoids the cancellation in
    ``1 - alpha_bar[t] / alpha_bar[t-1]`` when beta is small.
    """
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (eps_sched > 0 and math.isfinite(eps_sched)):
        raise ValueError(f"eps_sched must be positive and finite, got {eps_sched!r}")
    T = int(T)
    E = Fraction(eps_sched)

    def angle(t: int) -> Fraction:
        # angle / (pi/2)
        return (Fraction(t, T) + E) / (1 + E)

    f = np.array([_half_pi_cos(angle(t)) for t in range(T + 1)], dtype=np.float64)
    f0 = f[0]
    alpha_bar = (f / f0) ** 2
    alpha_bar[0] = 1.0

    one_minus = np.zeros(T + 1, dtype=np.float64)
    beta = np.zeros(T + 1, dtype=np.float64)
    step = Fraction(1, T) / (1 + E)
    sin_step = _half_pi_sin(step)
    for t in range(1, T + 1):
        one_minus[t] = _half_pi_sin(angle(t) + angle(0)) * _half_pi_sin(angle(t) - angle(0)) / f0**2
        if alpha_bar[t] == 0.0:
            beta[t] = 1.0
        else:
            beta[t] = _half_pi_sin(angle(t) + angle(t - 1)) * sin_step / f[t - 1] ** 2

    sched = NoiseSchedule(T, float(eps_sched), alpha_bar, beta, one_minus)
    _validate(sched)
    return sched


def _validate(sched: NoiseSchedule) -> None:
    ab, b = sched.alpha_bar, sched.beta[1:]
    if not np.all(np.isfinite(ab)) or not np.all(np.isfinite(b)):
        raise FloatingPointError("non-finite schedule entries")
    if not np.all(np.diff(ab) < 0):
        bad = int(np.argmax(np.diff(ab) >= 0)) + 1
        raise FloatingPointError(f"alpha_bar not strictly decreasing at t={bad}")
    if ab[-1] < 0:
        raise FloatingPointError("alpha_bar[T] negative")
    # beta reaches 1 only at a zero-SNR terminal step
    if not np.all((b > 0) & (b <= 1)) or np.any((b == 1) & (ab[1:] != 0)):
        raise FloatingPointError("beta outside (0, 1)")


def linear_beta_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Reference linear-beta schedule; used in tests as a contrast case only."""
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta[1:])])
    return NoiseSchedule(T, 0.0, alpha_bar, beta, 1.0 - alpha_bar)


def _shape(x):
    return tuple(x.shape)


def forward_diffuse(z0, t: int, noise, sched: NoiseSchedule):
    """sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * noise."""
    t = sched.check_step(t)
    if _shape(z0) != _shape(noise):
        raise ValueError(f"shape mismatch: z0 {_shape(z0)} vs noise {_shape(noise)}")
    a = math.sqrt(sched.alpha_bar[t])
    s = math.sqrt(sched.one_minus_alpha_bar[t])
    return a * z0 + s * noise


def predict_z0(z_t, eps_pred, t: int, sched: NoiseSchedule):
    """Clean-latent estimate implied by a noise prediction at step t."""
    ab = sched.alpha_bar[t]
    if ab == 0.0:
        return 0.0 * z_t
    return (z_t - math.sqrt(sched.one_minus_alpha_bar[t]) * eps_pred) / math.sqrt(ab)


def ddim_step(z_t, eps_pred, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic DDIM update from t to t_prev (no stochastic term)."""
    t = sched.check_step(t)
    t_prev = sched.check_step(t_prev, "t_prev", lo=0)
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    if _shape(z_t) != _shape(eps_pred):
        raise ValueError(f"shape mismatch: z_t {_shape(z_t)} vs eps_pred {_shape(eps_pred)}")
    z0_hat = predict_z0(z_t, eps_pred, t, sched)
    if t_prev == 0:
        return z0_hat
    return (math.sqrt(sched.alpha_bar[t_prev]) * z0_hat
            + math.sqrt(sched.one_minus_alpha_bar[t_prev]) * eps_pred)


def ddpm_step(z_t, eps_pred, t: int, sched: NoiseSchedule, noise):
    """Ancestral DDPM update with variance beta_t; no noise is added at t = 1."""
    t = sched.check_step(t)
    if _shape(z_t) != _shape(eps_pred) or _shape(z_t) != _shape(noise):
        raise ValueError("z_t, eps_pred and noise must share a shape")
    beta = sched.beta[t]
    if sched.alpha_bar[t] == 0.0:
        # posterior mean is sqrt(alpha_bar[t-1]) * z0_hat with z0_hat := 0
        mean = 0.0 * z_t
    else:
        coef = beta / math.sqrt(sched.one_minus_alpha_bar[t])
        mean = (z_t - coef * eps_pred) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    return mean + math.sqrt(beta) * noise


@dataclass(frozen=True)
class TimestepSubsequence:
    steps: tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.steps)

    def pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs for the reverse loop, ending at t_prev = 0."""
        nxt = list(self.steps[1:]) + [0]
        return list(zip(self.steps, nxt))


def make_timestep_subsequence(T: int, num_steps: int) -> TimestepSubsequence:
    """Evenly spaced decreasing indices T, T - round(T/n), ... (round half up)."""
    if isinstance(num_steps, bool) or int(num_steps) != num_steps or int(T) != T:
        raise ValueError("T and num_steps must be integers")
    T, num_steps = int(T), int(num_steps)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps={num_steps} outside [1, {T}]")
    steps = tuple(T - math.floor(Fraction(i * T, num_steps) + Fraction(1, 2))
                  for i in range(num_steps))
    return TimestepSubsequence(steps)
