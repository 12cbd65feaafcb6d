"""Run configuration: nested defaults, YAML files, ``key=value`` overrides, validation."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS: dict = {
    "data": {
        "size": 64,
        "dose_sigma": 0.1,
        "dose_kind": "gaussian",
        "patients": 8,
        "slices_per_patient": 8,
        "seed": 0,
        "split_seed": 0,
        "split": [0.75, 0.125, 0.125],
    },
    "ae": {
        "f": 4,
        "latent_channels": 4,
        "width": 16,
        "lr": 1e-4,
        "steps": 2000,
        "micro_batch": 4,
        "lambda1": 1.0,
        "lambda2": 0.5,
        "kl_final": 1e-6,
        "pl_final": 0.1,
        "ramp_start": 0,
        "ramp_end": None,  # None: half of steps
        "p_ae": True,  # False: pixel losses + constant KL, no perceptual term
        "seed": 0,
    },
    "ldm": {
        "T": 1000,
        "eps_sched": 0.008,
        "mode": "conditional",
        "width": 32,
        "transformer_levels": [0],
        "lr": 1e-4,
        "steps": 2000,
        "batch": 16,
        "ema_decay": 0.0,
        "seed": 0,
    },
    "sampler": {"kind": "ddim", "num_steps": 30, "t_start": 0.4, "seed": 0},
    "eval": {"data_range": 2.0, "ssim_window": 11, "lpips_seed": 1, "timing_repeats": 3},
    "paths": {"dataset": "run/dataset", "checkpoints": "run/checkpoints", "reports": "run/reports"},
}

REPORT_ROOT_ENV = "LDCT_REPORT_ROOT"
SEED_KEYS = ("data.seed", "data.split_seed", "ae.seed", "ldm.seed", "sampler.seed")


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        key = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value`` with the value parsed as YAML (so numbers, lists, null work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from None
    return key.strip().split("."), value


def apply_override(cfg: dict, path: list[str], value) -> dict:
    nested: dict = value
    for part in reversed(path):
        nested = {part: nested}
    return _merge(cfg, nested)


def load_config(path=None, overrides=(), seed: int | None = None, env=None) -> dict:
    """Defaults <- YAML file <- ``overrides`` <- global ``seed``; validated.

    If ``env`` (e.g. ``os.environ``) sets ``LDCT_REPORT_ROOT`` it replaces
    ``paths.reports``.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p} must contain a mapping")
        cfg = _merge(cfg, doc)
    for text in overrides:
        cfg = apply_override(cfg, *parse_override(text))
    if seed is not None:
        for key in SEED_KEYS:
            cfg = apply_override(cfg, key.split("."), int(seed))
    if env is not None and env.get(REPORT_ROOT_ENV):
        cfg["paths"]["reports"] = env[REPORT_ROOT_ENV]
    validate(cfg)
    return cfg


def _need(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: dict) -> None:
    d, ae, ldm, s, ev = cfg["data"], cfg["ae"], cfg["ldm"], cfg["sampler"], cfg["eval"]
    for sect, keys in (("data", ("size", "patients", "slices_per_patient", "seed", "split_seed")),
                       ("ae", ("f", "latent_channels", "width", "steps", "micro_batch", "ramp_start", "seed")),
                       ("ldm", ("T", "width", "steps", "batch", "seed")),
                       ("sampler", ("num_steps", "seed")), ("eval", ("ssim_window", "lpips_seed", "timing_repeats"))):
        for k in keys:
            _need(_is_int(cfg[sect][k]), f"{sect}.{k} must be an integer, got {cfg[sect][k]!r}")
    for sect, keys in (("data", ("dose_sigma",)), ("ae", ("lr", "lambda1", "lambda2", "kl_final", "pl_final")),
                       ("ldm", ("eps_sched", "lr", "ema_decay")), ("sampler", ("t_start",)),
                       ("eval", ("data_range",))):
        for k in keys:
            _need(_is_num(cfg[sect][k]), f"{sect}.{k} must be a number, got {cfg[sect][k]!r}")
    _need(d["size"] >= 8, "data.size must be >= 8")
    _need(d["dose_sigma"] >= 0, "data.dose_sigma must be >= 0")
    _need(d["dose_kind"] in ("gaussian", "poisson-gaussian"), f"unknown data.dose_kind {d['dose_kind']!r}")
    _need(d["patients"] >= 1 and d["slices_per_patient"] >= 1, "data.patients and slices_per_patient must be >= 1")
    _need(isinstance(d["split"], list) and len(d["split"]) == 3 and all(_is_num(r) and r >= 0 for r in d["split"])
          and abs(sum(d["split"]) - 1) < 1e-9, "data.split must be three nonnegative ratios summing to 1")
    f = ae["f"]
    _need(f >= 1 and f & (f - 1) == 0, "ae.f must be a power of two")
    _need(d["size"] % f == 0, f"data.size {d['size']} not divisible by ae.f {f}")
    _need(ae["latent_channels"] >= 1 and ae["width"] >= 1, "ae widths must be >= 1")
    _need(ae["steps"] >= 1 and ae["micro_batch"] >= 1, "ae.steps and micro_batch must be >= 1")
    _need(ae["lr"] > 0 and ldm["lr"] > 0, "learning rates must be > 0")
    _need(min(ae["lambda1"], ae["lambda2"], ae["kl_final"], ae["pl_final"]) >= 0, "loss weights must be >= 0")
    _need(isinstance(ae["p_ae"], bool), "ae.p_ae must be a boolean")
    ramp_end = ae["ramp_end"]
    _need(ramp_end is None or (_is_int(ramp_end) and ramp_end >= ae["ramp_start"] >= 0),
          "ae.ramp_end must be null or an integer >= ramp_start >= 0")
    _need(ldm["T"] >= 2, "ldm.T must be >= 2")
    _need(0 < ldm["eps_sched"] < 1, "ldm.eps_sched must be in (0, 1)")
    _need(ldm["mode"] in ("conditional", "prior"), f"unknown ldm.mode {ldm['mode']!r}")
    _need(ldm["width"] >= 1 and ldm["steps"] >= 1 and ldm["batch"] >= 1, "ldm width/steps/batch must be >= 1")
    _need(0 <= ldm["ema_decay"] < 1, "ldm.ema_decay must be in [0, 1)")
    _need(isinstance(ldm["transformer_levels"], list) and all(_is_int(v) and v in (0, 1) for v in ldm["transformer_levels"]),
          "ldm.transformer_levels must be a list drawn from [0, 1]")
    _need((d["size"] // f) % 2 == 0, f"latent grid {d['size'] // f} must be even for the denoiser")
    _need(s["kind"] in ("ddim", "ddpm"), f"unknown sampler.kind {s['kind']!r}")
    _need(1 <= s["num_steps"] <= ldm["T"], f"sampler.num_steps must be in [1, {ldm['T']}]")
    _need(0 < s["t_start"] <= 1, "sampler.t_start must be in (0, 1]")
    _need(ev["data_range"] > 0, "eval.data_range must be > 0")
    _need(ev["timing_repeats"] >= 1, "eval.timing_repeats must be >= 1")
    _need(ev["ssim_window"] % 2 == 1 and 1 <= ev["ssim_window"] <= d["size"],
          "eval.ssim_window must be odd and fit the image")
    for k in ("dataset", "checkpoints", "reports"):
        _need(isinstance(cfg["paths"][k], str) and cfg["paths"][k], f"paths.{k} must be a non-empty string")


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def fingerprint(cfg: dict, *sections: str) -> str:
    """Stable JSON of the named sections, used as a cache key."""
    return json.dumps({s: cfg[s] for s in sections}, sort_keys=True)
