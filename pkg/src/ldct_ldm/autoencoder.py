"""Perceptually regularized KL autoencoder and its composite training loss.

Images are torch tensors shaped (B, 1, H, W) in [-1, 1]; latents are
(B, C_lat, H/f, W/f).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError
from .features import FeatureExtractor

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    """GroupNorm-SiLU-conv residual block, optionally conditioned on a time embedding."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out) if emb_dim else None
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class AutoencoderConfig:
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 1
    attn_levels: tuple[int, ...] = (2,)
    latent_channels: int = 4

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attn_levels = tuple(self.attn_levels)
        if not self.channel_mult or self.base_channels < 1 or self.latent_channels < 1:
            raise ValueError("empty channel_mult or non-positive widths")
        deepest = len(self.channel_mult) - 1
        for lvl in self.attn_levels:
            if not 0 <= lvl <= deepest:
                raise ValueError(f"attention level {lvl} outside 0..{deepest}")
            if lvl < deepest - 1:
                raise ValueError("self-attention is only allowed at the deepest levels")

    @property
    def f(self) -> int:
        return 2 ** (len(self.channel_mult) - 1)


@dataclass
class LatentDistribution:
    mu: torch.Tensor
    log_var: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        chs = [cfg.base_channels * m for m in cfg.channel_mult]
        self.conv_in = nn.Conv2d(1, chs[0], 3, padding=1)
        self.down = nn.ModuleList()
        c = chs[0]
        for lvl, c_out in enumerate(chs):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(c, c_out))
                c = c_out
                if lvl in cfg.attn_levels:
                    blocks.append(SelfAttention(c))
            if lvl < len(chs) - 1:
                blocks.append(Downsample(c))
            self.down.append(blocks)
        self.mid = nn.ModuleList([ResBlock(c, c), SelfAttention(c)])
        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, 2 * cfg.latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.conv_in(x)
        for blocks in self.down:
            for blk in blocks:
                h = blk(h)
        for blk in self.mid:
            h = blk(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        chs = [cfg.base_channels * m for m in cfg.channel_mult]
        c = chs[-1]
        self.conv_in = nn.Conv2d(cfg.latent_channels, c, 3, padding=1)
        self.mid = nn.ModuleList([ResBlock(c, c), SelfAttention(c)])
        self.up = nn.ModuleList()
        for lvl in reversed(range(len(chs))):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(c, chs[lvl]))
                c = chs[lvl]
                if lvl in cfg.attn_levels:
                    blocks.append(SelfAttention(c))
            if lvl > 0:
                blocks.append(Upsample(c))
            self.up.append(blocks)
        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, z):
        h = self.conv_in(z)
        for blk in self.mid:
            h = blk(h)
        for blocks in self.up:
            for blk in blocks:
                h = blk(h)
        return torch.tanh(self.conv_out(F.silu(self.norm_out(h))))


class Autoencoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def encode(self, x: torch.Tensor) -> LatentDistribution:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected images shaped (B, 1, H, W), got {tuple(x.shape)}")
        f = self.cfg.f
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ValueError(f"image size {tuple(x.shape[-2:])} not divisible by f={f}")
        mu, log_var = self.encoder(x).chunk(2, dim=1)
        return LatentDistribution(mu, log_var.clamp(LOGVAR_MIN, LOGVAR_MAX))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected latents shaped (B, {self.cfg.latent_channels}, h, w), "
                             f"got {tuple(z.shape)}")
        return self.decoder(z)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Posterior-mean reconstruction (no sampling)."""
        return self.decode(self.encode(x).mu)

    def freeze(self) -> "Autoencoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


def reparameterize(dist: LatentDistribution, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != dist.mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != mu shape {tuple(dist.mu.shape)}")
    return dist.mu + torch.exp(0.5 * dist.log_var) * noise


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def kl_loss(dist: LatentDistribution) -> torch.Tensor:
    """0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1) per item, averaged over the batch dim."""
    mu, lv = dist.mu, dist.log_var
    if not (torch.isfinite(mu).all() and torch.isfinite(lv).all()):
        raise NumericError("non-finite latent distribution in kl_loss")
    per_elem = 0.5 * (mu.pow(2) + torch.exp(lv) - lv - 1.0)
    return per_elem.reshape(per_elem.shape[0], -1).sum(1).mean()


def perceptual_loss(x: torch.Tensor, x_tilde: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Sum over tapped layers of the L1 feature distance (per-item sum, batch mean)."""
    _check_same(x, x_tilde)
    total = x.new_zeros(())
    for fx, fy in zip(extractor(x), extractor(x_tilde)):
        total = total + (fx - fy).abs().reshape(fx.shape[0], -1).sum(1).mean()
    return total


def pixel_loss(x: torch.Tensor, x_tilde: torch.Tensor, lambda1: float = 1.0, lambda2: float = 0.5) -> torch.Tensor:
    _check_same(x, x_tilde)
    d = x_tilde - x
    return lambda1 * d.pow(2).mean() + lambda2 * d.abs().mean()


@dataclass
class LossWeightRamp:
    ramp_start: int = 0
    ramp_end: int = 0
    final_value: float = 0.0
    shape: str = "linear"  # linear | cosine

    def __post_init__(self):
        if not 0 <= self.ramp_start <= self.ramp_end:
            raise ValueError(f"need 0 <= ramp_start <= ramp_end, got {self.ramp_start}, {self.ramp_end}")
        if self.final_value < 0:
            raise ValueError("final_value must be nonnegative")
        if self.shape not in ("linear", "cosine"):
            raise ValueError(f"unknown ramp shape {self.shape!r}")


def weight_at(ramp: LossWeightRamp, step: int) -> float:
    if step < ramp.ramp_start:
        return 0.0
    if step >= ramp.ramp_end:
        return float(ramp.final_value)
    frac = (step - ramp.ramp_start) / (ramp.ramp_end - ramp.ramp_start)
    if ramp.shape == "cosine":
        frac = 0.5 - 0.5 * math.cos(math.pi * frac)
    return float(ramp.final_value) * frac


@dataclass
class AELossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.5
    kl: LossWeightRamp = field(default_factory=lambda: LossWeightRamp(0, 0, 1e-6))
    pl: LossWeightRamp = field(default_factory=lambda: LossWeightRamp(0, 0, 0.1))


def total_ae_loss(x, x_tilde, dist: LatentDistribution, step: int, cfg: AELossConfig,
                  extractor: FeatureExtractor | None = None):
    """Composite loss; returns ``(total, breakdown)``.

    ``breakdown`` holds the raw terms and the weights applied at ``step`` so
    that ``pixel + w_kl * kl + w_pl * pl`` reproduces ``total``. A term whose
    weight is zero is still evaluated for logging, without a graph.
    """
    pix = pixel_loss(x, x_tilde, cfg.lambda1, cfg.lambda2)
    w_kl, w_pl = weight_at(cfg.kl, step), weight_at(cfg.pl, step)
    with torch.set_grad_enabled(torch.is_grad_enabled() and w_kl > 0):
        kl = kl_loss(dist)
    if extractor is not None:
        with torch.set_grad_enabled(torch.is_grad_enabled() and w_pl > 0):
            pl = perceptual_loss(x, x_tilde, extractor)
    else:
        if w_pl > 0:
            raise ValueError("perceptual weight > 0 but no feature extractor given")
        pl = x.new_zeros(())
    total = pix + w_kl * kl + w_pl * pl
    breakdown = {"pixel": pix, "kl": kl, "perceptual": pl, "w_kl": w_kl, "w_pl": w_pl}
    return total, breakdown


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class AETrainConfig:
    model: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    loss: AELossConfig = field(default_factory=AELossConfig)
    lr: float = 1e-4
    steps: int = 2000
    micro_batch: int = 4
    accum_steps: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AETrainConfig":
        loss = d.get("loss", {})
        return cls(model=AutoencoderConfig(**d.get("model", {})),
                   loss=AELossConfig(lambda1=loss.get("lambda1", 1.0), lambda2=loss.get("lambda2", 0.5),
                                     kl=LossWeightRamp(**loss["kl"]) if "kl" in loss else LossWeightRamp(0, 0, 1e-6),
                                     pl=LossWeightRamp(**loss["pl"]) if "pl" in loss else LossWeightRamp(0, 0, 0.1)),
                   **{k: d[k] for k in ("lr", "steps", "micro_batch", "accum_steps") if k in d})


@dataclass
class TrainState:
    """Model + optimizer + counters; ``history`` holds one dict per optimizer step."""
    model: nn.Module
    optimizer: torch.optim.Optimizer
    step: int
    seed: int
    config: dict
    generator: torch.Generator
    history: list[dict] = field(default_factory=list)
    ema: nn.Module | None = None


class BatchSampler:
    """Seeded epoch-wise shuffling over ``n`` items."""

    def __init__(self, n: int, batch: int, generator: torch.Generator):
        if n < 1:
            raise ValueError("empty dataset")
        self.n, self.batch, self.gen = n, min(batch, n), generator
        self._perm: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < self.batch:
            if not self._perm:
                self._perm = torch.randperm(self.n, generator=self.gen).tolist()
            out.append(self._perm.pop())
        return out


def _check_finite(breakdown: dict, step: int):
    for name in ("pixel", "kl", "perceptual"):
        if not math.isfinite(float(breakdown[name].detach())):
            raise NumericError(f"non-finite {name} loss at step {step}")


def train_autoencoder(images: np.ndarray, cfg: AETrainConfig, seed: int,
                      extractor: FeatureExtractor | None = None,
                      log_every: int = 0) -> TrainState:
    """Train on ``images`` shaped (N, H, W); deterministic given ``seed``.

    Each optimizer step accumulates gradients over ``accum_steps`` micro-batches
    (effective batch ``micro_batch * accum_steps``).
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("images must be a non-empty (N, H, W) array")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = Autoencoder(cfg.model)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    state = TrainState(model, opt, 0, seed, cfg.to_dict(), gen)
    data = torch.from_numpy(images)[:, None]
    sampler = BatchSampler(len(images), cfg.micro_batch, gen)
    model.train()
    for _ in range(cfg.steps):
        ae_step(state, data, sampler, cfg, extractor)
        if log_every and state.step % log_every == 0:
            h = state.history[-1]
            log.info("ae step %d total %.5f pixel %.5f kl %.2f pl %.2f", state.step,
                     h["total"], h["pixel"], h["kl"], h["perceptual"])
    model.eval()
    return state


def ae_step(state: TrainState, data: torch.Tensor, sampler: BatchSampler,
            cfg: AETrainConfig, extractor: FeatureExtractor | None) -> dict:
    model, opt = state.model, state.optimizer
    opt.zero_grad(set_to_none=True)
    acc = {"total": 0.0, "pixel": 0.0, "kl": 0.0, "perceptual": 0.0}
    for _ in range(cfg.accum_steps):
        x = data[sampler.next()]
        dist = model.encode(x)
        noise = torch.randn(dist.mu.shape, generator=state.generator)
        x_tilde = model.decode(reparameterize(dist, noise))
        total, parts = total_ae_loss(x, x_tilde, dist, state.step, cfg.loss, extractor)
        _check_finite(parts, state.step)
        (total / cfg.accum_steps).backward()
        for k in ("pixel", "kl", "perceptual"):
            acc[k] += float(parts[k].detach()) / cfg.accum_steps
        acc["total"] += float(total.detach()) / cfg.accum_steps
        w_kl, w_pl = parts["w_kl"], parts["w_pl"]
    opt.step()
    state.step += 1
    rec = {"step": state.step, **acc, "w_kl": w_kl, "w_pl": w_pl}
    state.history.append(rec)
    return rec


@torch.no_grad()
def encode_mean(model: Autoencoder, images: np.ndarray, batch: int = 16) -> torch.Tensor:
    """Posterior means for (N, H, W) images, shaped (N, C_lat, h, w)."""
    out = []
    x = torch.from_numpy(np.asarray(images, dtype=np.float32))[:, None]
    for i in range(0, len(x), batch):
        out.append(model.encode(x[i:i + batch]).mu)
    return torch.cat(out)


@torch.no_grad()
def decode_images(model: Autoencoder, z: torch.Tensor, batch: int = 16) -> np.ndarray:
    out = [model.decode(z[i:i + batch]) for i in range(0, len(z), batch)]
    return torch.cat(out)[:, 0].numpy()


def reconstruct_images(model: Autoencoder, images: np.ndarray) -> np.ndarray:
    return decode_images(model, encode_mean(model, images))


def model_tensors(model: nn.Module, prefix: str = "model/") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in model.state_dict().items()}


def optimizer_tensors(opt: torch.optim.Optimizer, model: nn.Module) -> tuple[dict, dict]:
    """Adam moments as named tensors plus per-parameter step counters."""
    names = {id(p): n for n, p in model.named_parameters()}
    tensors, steps = {}, {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            tensors[f"optim/{n}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"]
            steps[n] = float(st["step"])
    return tensors, steps


def restore_optimizer(opt: torch.optim.Optimizer, model: nn.Module, tensors: dict, steps: dict):
    for n, p in model.named_parameters():
        if n in steps:
            opt.state[p] = {"step": torch.tensor(steps[n]),
                            "exp_avg": tensors[f"optim/{n}/exp_avg"].clone(),
                            "exp_avg_sq": tensors[f"optim/{n}/exp_avg_sq"].clone()}
