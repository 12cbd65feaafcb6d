"""Conditional noise-prediction U-Net, its training objective and the samplers.

Two conditioning modes share every kernel:

``conditional``
    The context is the posterior-mean latent of the low-dose image, fed to
    cross-attention as a token sequence. Training uses paired LD/FD latents
    and sampling starts from a seeded standard-normal z_T.
``prior``
    Trained on full-dose latents only; cross-attention sees a single learned
    null token. Sampling encodes the low-dose image, diffuses it forward to
    ``t_start`` and runs the reverse chain from there.
"""

from __future__ import annotations

import copy
import functools
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .autoencoder import Autoencoder, BatchSampler, Downsample, ResBlock, TrainState, Upsample, _groups
from .errors import ConfigError, ContractError, NumericError
from .schedule import (NoiseSchedule, ddim_step, ddpm_step, forward_diffuse,
                       make_timestep_subsequence)

log = logging.getLogger(__name__)


def timestep_embedding(t, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding: sin(t w_i) for the first half, cos(t w_i) for the second.

    ``w_i = base ** (-2 i / dim)``. ``t`` may be a python number (returns
    shape (dim,)) or a 1-D tensor (returns (B, dim)).
    """
    if dim % 2 or dim < 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if (tt < 0).any():
        raise ValueError("timestep must be >= 0")
    i = torch.arange(dim // 2, dtype=torch.float64)
    freqs = base ** (-2.0 * i / dim)
    args = tt[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(torch.float32)
    return emb[0] if scalar else emb


def grid_position_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal code over normalized cell centers, shaped (h*w, dim).

    Coordinates are normalized to [0, 1] so grids of different resolution
    share one coordinate frame; this lets cross-attention align query cells
    with context tokens.
    """
    n = dim // 4
    out = torch.zeros(h * w, dim)
    if n == 0:
        return out
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    k = torch.arange(1, n + 1, dtype=torch.float64) * math.pi
    ay, ax = yy.reshape(-1, 1) * k, xx.reshape(-1, 1) * k
    enc = torch.cat([torch.sin(ay), torch.cos(ay), torch.sin(ax), torch.cos(ax)], dim=1)
    out[:, :4 * n] = enc.to(torch.float32)
    return out


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------

@dataclass
class ConditioningContext:
    tokens: torch.Tensor | None  # (B, h*w, C_lat) or None in prior mode
    grid: tuple[int, int] | None
    source: str  # "ldct-latent" | "none"
    batch: int

    @classmethod
    def none(cls, batch: int) -> "ConditioningContext":
        return cls(None, None, "none", batch)

    def index(self, idx) -> "ConditioningContext":
        if self.tokens is None:
            n = len(range(self.batch)[idx]) if isinstance(idx, slice) else len(idx)
            return ConditioningContext.none(n)
        tok = self.tokens[idx]
        return ConditioningContext(tok, self.grid, self.source, tok.shape[0])


def condition_from_latent(mu: torch.Tensor) -> ConditioningContext:
    b, c, h, w = mu.shape
    return ConditioningContext(mu.flatten(2).transpose(1, 2).contiguous(), (h, w), "ldct-latent", b)


@torch.no_grad()
def derive_condition(x_ld, frozen_encoder: Autoencoder, mode: str = "conditional") -> ConditioningContext:
    """Token context from the posterior mean of the low-dose latent.

    Raises :class:`ContractError` if the autoencoder still has trainable
    parameters (the second stage must run on fixed autoencoder weights).
    """
    if not frozen_encoder.frozen:
        raise ContractError("autoencoder must be frozen before deriving conditions")
    if not torch.is_tensor(x_ld):
        x_ld = torch.from_numpy(np.asarray(x_ld, dtype=np.float32))
    if x_ld.dim() == 2:
        x_ld = x_ld[None, None]
    elif x_ld.dim() == 3:
        x_ld = x_ld[:, None]
    if mode == "prior":
        return ConditioningContext.none(x_ld.shape[0])
    return condition_from_latent(frozen_encoder.encode(x_ld).mu)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    transformer_levels: tuple[int, ...] = (0,)
    heads: int = 4
    emb_dim: int = 64
    context_dim: int = 32
    mode: str = "conditional"  # conditional | prior

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.transformer_levels = tuple(self.transformer_levels)
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        if self.mode not in ("conditional", "prior"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for lvl in self.transformer_levels:
            if not 0 <= lvl < len(self.channel_mult):
                raise ValueError(f"transformer level {lvl} outside 0..{len(self.channel_mult) - 1}")
        for m in self.channel_mult:
            if (self.base_channels * m) % self.heads:
                raise ValueError("channel widths must be divisible by heads")


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(context_dim, dim, bias=False)
        self.v = nn.Linear(context_dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context, bias=None):
        b, n, d = x.shape
        h, dh = self.heads, d // self.heads
        m = context.shape[1]
        q = self.q(x).reshape(b, n, h, dh).transpose(1, 2)
        k = self.k(context).reshape(b, m, h, dh).transpose(1, 2)
        v = self.v(context).reshape(b, m, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if bias is not None:
            logits = logits + bias
        out = torch.softmax(logits, dim=-1) @ v
        return self.out(out.transpose(1, 2).reshape(b, n, d))


def _cell_centers(h: int, w: int) -> torch.Tensor:
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([yy.reshape(-1), xx.reshape(-1)], dim=1)


@functools.lru_cache(maxsize=64)
def cell_distance2(query_grid: tuple, context_grid: tuple) -> torch.Tensor:
    """(n, m) squared distances from query cells to context tokens, in context-grid cells."""
    pq, pk = _cell_centers(*query_grid), _cell_centers(*context_grid)
    diff = (pq[:, None, :] - pk[None, :, :]) * torch.tensor(context_grid, dtype=torch.float32)
    return (diff * diff).sum(-1)


class SpatialTransformer(nn.Module):
    """Self-attention, cross-attention to the context, feed-forward; residual around all.

    Cross-attention logits to a spatial context get ``-slope_h * d^2``, d being
    the distance between query cell and token in context-grid cells, with a
    learnable nonnegative slope per head. Heads start from a spread of
    slopes, from near-global to local.
    """

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.proj_in = nn.Conv2d(channels, channels, 1)
        self.ln1, self.ln2, self.ln3 = (nn.LayerNorm(channels) for _ in range(3))
        self.self_attn = Attention(channels, channels, heads)
        self.cross_attn = Attention(channels, context_dim, heads)
        slopes = torch.logspace(-2, 0.5, heads)
        self.slope_raw = nn.Parameter(torch.log(torch.expm1(slopes)))
        self.ff = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))
        self.proj_out = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def forward(self, x, context, context_grid=None):
        b, c, h, w = x.shape
        y = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        y = y + grid_position_encoding(h, w, c).to(y.dtype)
        n = self.ln1(y)
        y = y + self.self_attn(n, n)
        bias = None
        if context_grid is not None:
            d2 = cell_distance2((h, w), tuple(context_grid)).to(y.dtype)
            bias = -F.softplus(self.slope_raw)[:, None, None] * d2
        y = y + self.cross_attn(self.ln2(y), context, bias)
        y = y + self.ff(self.ln3(y))
        y = y.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj_out(y)


class Denoiser(nn.Module):
    """U-Net noise predictor eps(z_t, t, c)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        tdim = 2 * cfg.emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.emb_dim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.ctx_proj = nn.Linear(cfg.latent_channels, cfg.context_dim)
        self.null_token = nn.Parameter(torch.zeros(1, 1, cfg.context_dim))
        # multiplies autoencoder latents before diffusion (set from training data)
        self.register_buffer("latent_scale", torch.ones(()))
        chs = [cfg.base_channels * m for m in cfg.channel_mult]
        self.conv_in = nn.Conv2d(cfg.latent_channels, chs[0], 3, padding=1)

        def tf(c):
            return SpatialTransformer(c, cfg.context_dim, cfg.heads)

        self.down = nn.ModuleList()
        skips, c = [chs[0]], chs[0]
        for lvl, c_out in enumerate(chs):
            for _ in range(cfg.num_res_blocks):
                self.down.append(nn.ModuleList([ResBlock(c, c_out, tdim)]
                                                + ([tf(c_out)] if lvl in cfg.transformer_levels else [])))
                c = c_out
                skips.append(c)
            if lvl < len(chs) - 1:
                self.down.append(nn.ModuleList([Downsample(c)]))
                skips.append(c)
        self.mid = nn.ModuleList([ResBlock(c, c, tdim), tf(c), ResBlock(c, c, tdim)])
        self.up = nn.ModuleList()
        for lvl in reversed(range(len(chs))):
            for i in range(cfg.num_res_blocks + 1):
                blk = [ResBlock(c + skips.pop(), chs[lvl], tdim)]
                c = chs[lvl]
                if lvl in cfg.transformer_levels:
                    blk.append(tf(c))
                if lvl > 0 and i == cfg.num_res_blocks:
                    blk.append(Upsample(c))
                self.up.append(nn.ModuleList(blk))
        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.cfg.channel_mult) - 1)

    def context(self, c: ConditioningContext, batch: int):
        """Projected context tokens and their grid (``None`` for the null token)."""
        if self.cfg.mode == "prior" or c.tokens is None:
            return self.null_token.expand(batch, 1, -1), None
        if c.tokens.shape[-1] != self.cfg.latent_channels:
            raise ValueError(f"context channels {c.tokens.shape[-1]} != {self.cfg.latent_channels}")
        pos = grid_position_encoding(*c.grid, self.cfg.context_dim).to(c.tokens.dtype)
        return self.ctx_proj(c.tokens) + pos, c.grid

    def _apply(self, blocks, h, emb, ctx):
        for blk in blocks:
            if isinstance(blk, ResBlock):
                h = blk(h, emb)
            elif isinstance(blk, SpatialTransformer):
                h = blk(h, *ctx)
            else:
                h = blk(h)
        return h

    def forward(self, z_t: torch.Tensor, t, c: ConditioningContext) -> torch.Tensor:
        b = z_t.shape[0]
        if z_t.dim() != 4 or z_t.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected (B, {self.cfg.latent_channels}, h, w) latents, got {tuple(z_t.shape)}")
        f = self.downsample_factor
        if z_t.shape[2] % f or z_t.shape[3] % f:
            raise ValueError(f"latent grid {tuple(z_t.shape[2:])} not divisible by {f}")
        if self.cfg.mode == "conditional" and c.tokens is None:
            raise ValueError("conditional denoiser needs a token context")
        if c.batch != b:
            raise ValueError(f"context batch {c.batch} != latent batch {b}")
        tt = torch.as_tensor(t).reshape(-1)
        if tt.numel() == 1:
            tt = tt.expand(b)
        emb = self.time_mlp(timestep_embedding(tt, self.cfg.emb_dim))
        ctx = self.context(c, b)
        h = self.conv_in(z_t)
        hs = [h]
        for blocks in self.down:
            h = self._apply(blocks, h, emb, ctx)
            hs.append(h)
        h = self._apply(self.mid, h, emb, ctx)
        for blocks in self.up:
            h = torch.cat([h, hs.pop()], dim=1)
            h = self._apply(blocks, h, emb, ctx)
        return self.conv_out(F.silu(self.norm_out(h)))


class VectorDenoiser(nn.Module):
    """Unconditional MLP noise predictor for small latents, e.g. (B, 4, 1, 1).

    The convolutional denoiser normalizes over spatial positions, which on a
    1x1 grid removes the overall scale of z_t; analytic toy tasks use this
    instead.
    """

    def __init__(self, dim: int, hidden: int = 128, emb_dim: int = 64, depth: int = 3):
        super().__init__()
        if emb_dim % 2:
            raise ValueError("emb_dim must be even")
        self.dim, self.emb_dim = dim, emb_dim
        self.register_buffer("latent_scale", torch.ones(()))
        layers, width = [], dim + emb_dim
        for _ in range(depth - 1):
            layers += [nn.Linear(width, hidden), nn.SiLU()]
            width = hidden
        layers.append(nn.Linear(width, dim))
        self.net = nn.Sequential(*layers)

    def forward(self, z_t: torch.Tensor, t, c: ConditioningContext | None = None) -> torch.Tensor:
        b = z_t.shape[0]
        x = z_t.reshape(b, -1)
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} latent elements per item, got {x.shape[1]}")
        tt = torch.as_tensor(t).reshape(-1)
        if tt.numel() == 1:
            tt = tt.expand(b)
        emb = timestep_embedding(tt, self.emb_dim).to(x.dtype)
        return self.net(torch.cat([x, emb], dim=1)).reshape(z_t.shape)


def predict_noise(model: Callable, z_t: torch.Tensor, t, c: ConditioningContext) -> torch.Tensor:
    eps = model(z_t, t, c)
    if eps.shape != z_t.shape:
        raise ValueError(f"predictor returned {tuple(eps.shape)} for input {tuple(z_t.shape)}")
    return eps


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _coef(table: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    vals = torch.from_numpy(np.sqrt(table))[t.long()].to(like.dtype)
    return vals.reshape(-1, *([1] * (like.dim() - 1)))


def diffuse_batch(z0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor, sched: NoiseSchedule):
    """Per-item forward diffusion for a batch with step vector ``t``."""
    if z0.shape != noise.shape:
        raise ValueError("z0 and noise shapes differ")
    if (t < 1).any() or (t > sched.T).any():
        raise ValueError(f"t outside [1, {sched.T}]")
    return _coef(sched.alpha_bar, t, z0) * z0 + _coef(sched.one_minus_alpha_bar, t, z0) * noise


def ldm_training_loss(model: Callable, z0: torch.Tensor, t, noise: torch.Tensor,
                      c: ConditioningContext, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between ``noise`` and the prediction on the diffused latent."""
    if isinstance(t, int):
        z_t = forward_diffuse(z0, t, noise, sched)
    else:
        z_t = diffuse_batch(z0, t, noise, sched)
    eps = predict_noise(model, z_t, t, c)
    return F.mse_loss(eps, noise)


@dataclass
class LDMTrainConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    lr: float = 1e-4
    steps: int = 2000
    batch: int = 16
    ema_decay: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LDMTrainConfig":
        return cls(model=DenoiserConfig(**d.get("model", {})),
                   **{k: d[k] for k in ("lr", "steps", "batch", "ema_decay") if k in d})


def train_ldm(latents: torch.Tensor, conds: torch.Tensor | None, cfg: LDMTrainConfig,
              sched: NoiseSchedule, seed: int, autoencoder: Autoencoder | None = None,
              latent_scale: float | None = None, log_every: int = 0,
              model: nn.Module | None = None) -> TrainState:
    """Train the noise predictor on precomputed latents.

    ``latents`` are full-dose posterior means (N, C, h, w); ``conds`` the
    paired low-dose posterior means in conditional mode (``None`` in prior
    mode). If the autoencoder is passed it must be frozen. Latents are
    multiplied by ``latent_scale`` (default: 1 / std of ``latents``), which is
    stored in the model so sampling can undo it.

    ``model`` replaces the :class:`Denoiser` built from ``cfg.model`` (it
    must carry a ``latent_scale`` buffer); it is initialized by the caller.
    """
    if autoencoder is not None and not autoencoder.frozen:
        raise ContractError("latent diffusion training requires a frozen autoencoder")
    if cfg.model.mode == "conditional":
        if conds is None or conds.shape != latents.shape:
            raise ValueError("conditional mode needs condition latents shaped like the targets")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = Denoiser(cfg.model) if model is None else model
    if latent_scale is None:
        latent_scale = 1.0 / float(latents.std())
    model.latent_scale.fill_(latent_scale)
    latents = latents * model.latent_scale
    if conds is not None:
        conds = conds * model.latent_scale
    ema = copy.deepcopy(model) if cfg.ema_decay > 0 else None
    if ema is not None:
        ema.requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    state = TrainState(model, opt, 0, seed, cfg.to_dict(), gen, ema=ema)
    sampler = BatchSampler(len(latents), cfg.batch, gen)
    model.train()
    for _ in range(cfg.steps):
        idx = sampler.next()
        z0 = latents[idx]
        c = condition_from_latent(conds[idx]) if cfg.model.mode == "conditional" else ConditioningContext.none(len(idx))
        t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
        noise = torch.randn(z0.shape, generator=gen)
        opt.zero_grad(set_to_none=True)
        loss = ldm_training_loss(model, z0, t, noise, c, sched)
        val = float(loss.detach())
        if not math.isfinite(val):
            raise NumericError(f"non-finite diffusion loss at step {state.step}")
        loss.backward()
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for pe, pm in zip(ema.parameters(), model.parameters()):
                    pe.mul_(cfg.ema_decay).add_(pm.detach(), alpha=1 - cfg.ema_decay)
        state.step += 1
        state.history.append({"step": state.step, "loss": val})
        if log_every and state.step % log_every == 0:
            log.info("ldm step %d loss %.5f", state.step, val)
    model.eval()
    if ema is not None:
        ema.eval()
    return state


def sampling_model(state: TrainState) -> nn.Module:
    """EMA weights when tracked, otherwise the raw model."""
    return state.ema if state.ema is not None else state.model


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class SamplerSpec:
    kind: str = "ddim"  # ddim | ddpm
    num_steps: int = 30
    seed: int = 0
    t_start: float = 0.4  # fraction of T, prior mode only

    def validate(self, T: int):
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.kind == "ddim" and not 1 <= self.num_steps <= T:
            raise ValueError(f"num_steps={self.num_steps} outside [1, {T}]")
        if not 0 < self.t_start <= 1:
            raise ValueError("t_start must be in (0, 1]")


Trace = Callable[[int, torch.Tensor, float], None]


@torch.no_grad()
def sample_ddim(model: Callable, c: ConditioningContext, sched: NoiseSchedule, num_steps: int,
                z_init: torch.Tensor, t_start: int | None = None, trace: Trace | None = None) -> torch.Tensor:
    """Deterministic reverse chain from ``t_start`` (default T) down to t = 0."""
    t_start = sched.T if t_start is None else int(t_start)
    sub = make_timestep_subsequence(t_start, num_steps)
    z = z_init
    t0 = time.perf_counter()
    for t, t_prev in sub.pairs():
        eps = predict_noise(model, z, t, c)
        z = ddim_step(z, eps, t, t_prev, sched)
        if trace is not None:
            trace(t, z, time.perf_counter() - t0)
    return z


@torch.no_grad()
def sample_ddpm(model: Callable, c: ConditioningContext, sched: NoiseSchedule, shape,
                generator: torch.Generator, z_init: torch.Tensor | None = None,
                t_start: int | None = None, trace: Trace | None = None) -> torch.Tensor:
    """Ancestral sampling over every step from ``t_start`` (default T) to 1."""
    t_start = sched.T if t_start is None else int(t_start)
    z = torch.randn(shape, generator=generator) if z_init is None else z_init
    t0 = time.perf_counter()
    for t in range(t_start, 0, -1):
        eps = predict_noise(model, z, t, c)
        noise = torch.randn(z.shape, generator=generator)
        z = ddpm_step(z, eps, t, sched, noise)
        if trace is not None:
            trace(t, z, time.perf_counter() - t0)
    return z


def check_compatible(ae: Autoencoder, model: Denoiser, image_shape: tuple[int, int]):
    """Raise :class:`ConfigError` if the two checkpoints cannot be chained."""
    if ae.cfg.latent_channels != model.cfg.latent_channels:
        raise ConfigError(f"autoencoder latent channels {ae.cfg.latent_channels} != "
                          f"denoiser latent channels {model.cfg.latent_channels}")
    h, w = image_shape
    if h % ae.cfg.f or w % ae.cfg.f:
        raise ConfigError(f"image shape {image_shape} not divisible by autoencoder f={ae.cfg.f}")
    lh, lw = h // ae.cfg.f, w // ae.cfg.f
    if lh % model.downsample_factor or lw % model.downsample_factor:
        raise ConfigError(f"latent grid {(lh, lw)} not divisible by denoiser factor {model.downsample_factor}")


@torch.no_grad()
def sample_latents(x_ld: np.ndarray, ae: Autoencoder, model: Denoiser, sched: NoiseSchedule,
                   spec: SamplerSpec, trace: Trace | None = None) -> torch.Tensor:
    """Conditioning + z_init + reverse chain for a batch of (N, H, W) low-dose images."""
    x_ld = np.asarray(x_ld, dtype=np.float32)
    spec.validate(sched.T)
    check_compatible(ae, model, x_ld.shape[-2:])
    mode = model.cfg.mode
    scale = model.latent_scale
    c = derive_condition(x_ld, ae, mode)
    if c.tokens is not None:
        c.tokens = c.tokens * scale
    n = x_ld.shape[0]
    shape = (n, ae.cfg.latent_channels, x_ld.shape[-2] // ae.cfg.f, x_ld.shape[-1] // ae.cfg.f)
    gen = torch.Generator().manual_seed(spec.seed)
    if mode == "prior":
        t_start = max(1, int(round(spec.t_start * sched.T)))
        z_ld = ae.encode(torch.from_numpy(x_ld)[:, None]).mu * scale
        z_init = forward_diffuse(z_ld, t_start, torch.randn(shape, generator=gen), sched)
        steps = max(1, min(t_start, int(round(spec.num_steps * t_start / sched.T))))
    else:
        t_start = sched.T
        z_init = torch.randn(shape, generator=gen)
        steps = spec.num_steps
    if spec.kind == "ddim":
        z0 = sample_ddim(model, c, sched, steps, z_init, t_start, trace)
    else:
        z0 = sample_ddpm(model, c, sched, shape, gen, z_init, t_start, trace)
    return z0 / scale


@torch.no_grad()
def denoise_image(x_ld: np.ndarray, ae: Autoencoder, model: Denoiser, sched: NoiseSchedule,
                  spec: SamplerSpec, trace: Trace | None = None) -> np.ndarray:
    """Full pipeline for (N, H, W) or (H, W) low-dose input; output has the input's shape."""
    x = np.asarray(x_ld, dtype=np.float32)
    single = x.ndim == 2
    if single:
        x = x[None]
    z0 = sample_latents(x, ae, model, sched, spec, trace)
    out = ae.decode(z0)[:, 0].numpy()
    return out[0] if single else out
