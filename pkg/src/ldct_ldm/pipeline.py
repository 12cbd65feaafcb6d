"""Subcommand implementations: data, two-stage training, denoising, evaluation, ablation.

Every command takes a resolved config dict (see :mod:`ldct_ldm.config`). All
artifacts live under ``paths.*``; reports embed the config and the content
hash of every checkpoint they depend on.
"""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from . import config as config_mod
from .autoencoder import (AELossConfig, AETrainConfig, Autoencoder, AutoencoderConfig, LossWeightRamp,
                          encode_mean, model_tensors, optimizer_tensors, train_autoencoder)
from .checkpoint import content_hash, file_hash, load_checkpoint, save_checkpoint
from .data import generate_dataset, load_dataset, load_images, persist_dataset, save_images
from .errors import ConfigError, MissingPrerequisite
from .features import random_conv_extractor
from .latent_diffusion import (Denoiser, DenoiserConfig, LDMTrainConfig, SamplerSpec, check_compatible,
                               denoise_image, train_ldm)
from .metrics import MetricReport, evaluate_set, format_table
from .schedule import NoiseSchedule, build_cosine_schedule

log = logging.getLogger(__name__)

PL_EXTRACTOR_SEED = 0


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------

def ae_train_config(cfg: dict, p_ae: bool | None = None) -> AETrainConfig:
    a = cfg["ae"]
    p_ae = a["p_ae"] if p_ae is None else p_ae
    levels = int(math.log2(a["f"]))
    model = AutoencoderConfig(base_channels=a["width"], channel_mult=(1,) + (2,) * levels,
                              attn_levels=(levels,), latent_channels=a["latent_channels"])
    if p_ae:
        end = a["steps"] // 2 if a["ramp_end"] is None else a["ramp_end"]
        kl = LossWeightRamp(a["ramp_start"], end, a["kl_final"])
        pl = LossWeightRamp(a["ramp_start"], end, a["pl_final"])
    else:
        # baseline: pixel losses plus a constant KL weight, no perceptual term
        kl = LossWeightRamp(0, 0, a["kl_final"])
        pl = LossWeightRamp(0, 0, 0.0)
    loss = AELossConfig(lambda1=a["lambda1"], lambda2=a["lambda2"], kl=kl, pl=pl)
    return AETrainConfig(model=model, loss=loss, lr=a["lr"], steps=a["steps"], micro_batch=a["micro_batch"])


def ldm_train_config(cfg: dict) -> LDMTrainConfig:
    m = cfg["ldm"]
    model = DenoiserConfig(latent_channels=cfg["ae"]["latent_channels"], base_channels=m["width"],
                           transformer_levels=tuple(m["transformer_levels"]), mode=m["mode"])
    return LDMTrainConfig(model=model, lr=m["lr"], steps=m["steps"], batch=m["batch"], ema_decay=m["ema_decay"])


def make_schedule(cfg: dict) -> NoiseSchedule:
    return build_cosine_schedule(cfg["ldm"]["T"], cfg["ldm"]["eps_sched"])


def sampler_spec(cfg: dict, kind: str | None = None) -> SamplerSpec:
    s = cfg["sampler"]
    return SamplerSpec(kind=kind or s["kind"], num_steps=s["num_steps"], seed=s["seed"], t_start=s["t_start"])


def dataset_dir(cfg: dict) -> Path:
    return Path(cfg["paths"]["dataset"])


def ckpt_dir(cfg: dict) -> Path:
    return Path(cfg["paths"]["checkpoints"])


def report_dir(cfg: dict) -> Path:
    return Path(cfg["paths"]["reports"])


def ae_path(cfg: dict) -> Path:
    return ckpt_dir(cfg) / "ae.ckpt"


def ldm_path(cfg: dict) -> Path:
    return ckpt_dir(cfg) / "ldm.ckpt"


def _refuse_existing(path: Path, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _strip(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def build_dataset(cfg: dict):
    d = cfg["data"]
    return generate_dataset(d["patients"], d["slices_per_patient"], d["size"], d["dose_sigma"],
                            d["seed"], d["split_seed"], tuple(d["split"]), d["dose_kind"])


def cmd_gen_data(cfg: dict, force: bool = False) -> Path:
    ds = build_dataset(cfg)
    path = persist_dataset(ds, dataset_dir(cfg), force=force)
    log.info("wrote %d LD/FD pairs to %s", len(ds), path)
    return path


def _load_dataset(cfg: dict):
    return load_dataset(dataset_dir(cfg))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_ae(path: Path, state, cfg: dict, p_ae: bool) -> str:
    optim, steps = optimizer_tensors(state.optimizer, state.model)
    meta = {"kind": "autoencoder", "train_config": state.config, "step": state.step, "seed": state.seed,
            "optim_steps": steps, "p_ae": p_ae, "run_config": {"data": cfg["data"], "ae": cfg["ae"]}}
    return save_checkpoint(path, {**model_tensors(state.model), **optim}, meta)


def load_ae(path) -> tuple[Autoencoder, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"autoencoder checkpoint not found: {path}")
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "autoencoder":
        raise ConfigError(f"{path} is not an autoencoder checkpoint")
    model = Autoencoder(AETrainConfig.from_dict(meta["train_config"]).model)
    model.load_state_dict(_strip(tensors, "model/"))
    return model.freeze(), meta


def save_ldm(path: Path, state, cfg: dict, ae_hash: str) -> str:
    optim, steps = optimizer_tensors(state.optimizer, state.model)
    tensors = {**model_tensors(state.model), **optim}
    if state.ema is not None:
        tensors.update(model_tensors(state.ema, "ema/"))
    meta = {"kind": "denoiser", "train_config": state.config, "step": state.step, "seed": state.seed,
            "optim_steps": steps, "ae_hash": ae_hash,
            "run_config": {"ldm": cfg["ldm"]}}
    return save_checkpoint(path, tensors, meta)


def load_ldm(path) -> tuple[Denoiser, dict]:
    """Sampling weights (EMA when stored) in eval mode."""
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"denoiser checkpoint not found: {path}")
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise ConfigError(f"{path} is not a denoiser checkpoint")
    model = Denoiser(LDMTrainConfig.from_dict(meta["train_config"]).model)
    prefix = "ema/" if any(k.startswith("ema/") for k in tensors) else "model/"
    model.load_state_dict(_strip(tensors, prefix))
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_ae_stage(cfg: dict, train_images: np.ndarray, p_ae: bool, out: Path) -> str:
    tcfg = ae_train_config(cfg, p_ae)
    extractor = random_conv_extractor(PL_EXTRACTOR_SEED) if tcfg.loss.pl.final_value > 0 else None
    state = train_autoencoder(train_images, tcfg, cfg["ae"]["seed"], extractor, log_every=100)
    digest = save_ae(out, state, cfg, p_ae)
    _write_json(out.with_suffix(".history.json"), state.history)
    log.info("saved autoencoder %s (%s)", out, digest[:12])
    return digest


def cmd_train_ae(cfg: dict, force: bool = False) -> Path:
    out = ae_path(cfg)
    _refuse_existing(out, force)
    _, fd, _ = _load_dataset(cfg).subset("train")
    train_ae_stage(cfg, fd, cfg["ae"]["p_ae"], out)
    return out


def train_ldm_stage(cfg: dict, ds, ae_ckpt: Path, out: Path) -> str:
    ae, _ = load_ae(ae_ckpt)
    _, fd, ld = ds.subset("train")
    z = encode_mean(ae, fd)
    c = encode_mean(ae, ld) if cfg["ldm"]["mode"] == "conditional" else None
    tcfg = ldm_train_config(cfg)
    state = train_ldm(z, c, tcfg, make_schedule(cfg), cfg["ldm"]["seed"], autoencoder=ae, log_every=100)
    digest = save_ldm(out, state, cfg, file_hash(ae_ckpt))
    _write_json(out.with_suffix(".history.json"), state.history)
    log.info("saved denoiser %s (%s)", out, digest[:12])
    return digest


def cmd_train_ldm(cfg: dict, force: bool = False) -> Path:
    if not ae_path(cfg).exists():
        raise MissingPrerequisite(f"autoencoder checkpoint not found: {ae_path(cfg)} (run train-ae first)")
    out = ldm_path(cfg)
    _refuse_existing(out, force)
    train_ldm_stage(cfg, _load_dataset(cfg), ae_path(cfg), out)
    return out


# ---------------------------------------------------------------------------
# denoising + timing
# ---------------------------------------------------------------------------

@dataclass
class Timing:
    kind: str
    num_steps: int
    n_images: int
    runs: list[float]

    @property
    def seconds(self) -> float:
        return statistics.median(self.runs)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_steps": self.num_steps, "n_images": self.n_images, "runs": self.runs,
                "total_seconds": self.seconds, "per_image_seconds": self.seconds / max(self.n_images, 1)}


def timed_denoise(x_ld: np.ndarray, ae: Autoencoder, model: Denoiser, sched: NoiseSchedule,
                  spec: SamplerSpec, repeats: int = 3, trace=None) -> tuple[np.ndarray, Timing]:
    """Denoise ``repeats`` times; wall-clock covers sampling and decoding only."""
    check_compatible(ae, model, x_ld.shape[-2:])
    out, runs = None, []
    for r in range(max(1, repeats)):
        t0 = time.perf_counter()
        res = denoise_image(x_ld, ae, model, sched, spec, trace if r == 0 else None)
        runs.append(time.perf_counter() - t0)
        if out is None:
            out = res
    steps = sched.T if spec.kind == "ddpm" else spec.num_steps
    return out, Timing(spec.kind, steps, len(x_ld), runs)


def _trace_writer(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = path.open("w")

    def trace(t, z, elapsed):
        fh.write(f"t={t} mean_abs={float(z.abs().mean()):.6f} elapsed={elapsed:.4f}\n")
        fh.flush()
    return trace, fh


def denoised_dir(cfg: dict, kind: str | None = None) -> Path:
    return report_dir(cfg) / f"denoised-{kind or cfg['sampler']['kind']}"


def cmd_denoise(cfg: dict, input_path=None, output_path=None, verbose: bool = False,
                repeats: int | None = None) -> Path:
    """Denoise an image set (default: the dataset's test-split LD images)."""
    ae, _ = load_ae(ae_path(cfg))
    model, _ = load_ldm(ldm_path(cfg))
    if input_path is None:
        ids, _, x_ld = _load_dataset(cfg).subset("test")
    else:
        ids, x_ld = load_images(input_path)
    spec = sampler_spec(cfg)
    out_dir = Path(output_path) if output_path is not None else denoised_dir(cfg, spec.kind)
    trace, fh = _trace_writer(report_dir(cfg) / f"trace-{spec.kind}.log") if verbose else (None, None)
    try:
        out, timing = timed_denoise(x_ld, ae, model, make_schedule(cfg), spec,
                                    repeats or cfg["eval"]["timing_repeats"], trace)
    finally:
        if fh is not None:
            fh.close()
    save_images(out_dir, ids, out)
    _write_json(report_dir(cfg) / f"timing-{spec.kind}.json", timing.to_dict())
    log.info("denoised %d images with %s in %.2fs (median of %d)", len(ids), spec.kind, timing.seconds,
             len(timing.runs))
    return out_dir


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def lpips_extractor(cfg: dict):
    return random_conv_extractor(cfg["eval"]["lpips_seed"])


def checkpoint_hashes(cfg: dict) -> dict:
    return {name: file_hash(p) for name, p in (("ae", ae_path(cfg)), ("ldm", ldm_path(cfg))) if p.exists()}


def write_report(report: MetricReport, out_dir: Path, name: str = "report", title: str = "Method",
                 label: str = "denoised") -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {ext: out_dir / f"{name}.{ext}" for ext in ("csv", "txt", "json")}
    paths["csv"].write_text(report.to_csv())
    paths["txt"].write_text(format_table([(label, report)], title))
    paths["json"].write_text(report.to_json())
    return paths


def cmd_eval(cfg: dict, pred_path=None, ref_path=None, name: str = "report") -> MetricReport:
    """Compare predictions to references by id (default references: test-split FD images)."""
    pred_path = Path(pred_path) if pred_path is not None else denoised_dir(cfg)
    pred_ids, preds = load_images(pred_path)
    if ref_path is None:
        ref_ids, refs, _ = _load_dataset(cfg).subset("test")
        ref_label = "dataset:test/fd"
    else:
        ref_ids, refs = load_images(ref_path)
        ref_label = "image-set"
    ev = cfg["eval"]
    report = evaluate_set(pred_ids, preds, ref_ids, refs, lpips_extractor(cfg), ev["data_range"],
                          ev["ssim_window"])
    manifest = Path(pred_path) / "manifest.json"
    report.meta = {"config": cfg, "checkpoints": checkpoint_hashes(cfg), "reference": ref_label,
                   "predictions_manifest": content_hash(manifest.read_bytes())}
    write_report(report, report_dir(cfg), name)
    log.info("%s", format_table([("denoised", report)]).rstrip())
    return report


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_ORDER = ((False, False), (True, False), (False, True), (True, True))


@dataclass
class AblationCell:
    p_ae: bool
    q_sp: bool
    report: MetricReport

    @property
    def label(self) -> tuple[str, str]:
        return ("✓" if self.p_ae else "✗", "✓" if self.q_sp else "✗")


def _cell_name(p_ae: bool, q_sp: bool) -> str:
    return f"pae{int(p_ae)}-qsp{int(q_sp)}"


def ablation_table(cells: list[AblationCell]) -> str:
    return format_table([(c.label, c.report) for c in cells], ("P-AE", "Q-SP"))


def cmd_ablate(cfg: dict, force: bool = False, repeats: int | None = None) -> list[AblationCell]:
    """Train and evaluate the 2x2 grid {P-AE off/on} x {Q-SP off/on}.

    Q-SP off is full-length ancestral sampling, Q-SP on the configured DDIM
    sampler. Both cells of a row share one autoencoder and one denoiser.
    Finished cells are cached under the report directory together with the
    config they were produced from; a rerun with the same config reuses them.
    """
    ds = _load_dataset(cfg)
    root = report_dir(cfg) / "ablation"
    ck_root = ckpt_dir(cfg) / "ablation"
    root.mkdir(parents=True, exist_ok=True)
    key = config_mod.fingerprint(cfg, "data", "ae", "ldm", "sampler", "eval")
    repeats = repeats or cfg["eval"]["timing_repeats"]
    sched = make_schedule(cfg)
    ids, refs, x_ld = ds.subset("test")
    cells = []
    with FileLock(str(root / ".lock")):
        for p_ae, q_sp in ABLATION_ORDER:
            name = _cell_name(p_ae, q_sp)
            cache = root / f"{name}.json"
            if cache.exists() and not force:
                cached = json.loads(cache.read_text())
                if cached.get("key") == key:
                    log.info("skip cell %s (cached)", name)
                    cells.append(AblationCell(p_ae, q_sp, MetricReport.from_json(cached["report"])))
                    continue
            try:
                report = _run_cell(cfg, ds, sched, ck_root / ("pae" if p_ae else "base"), p_ae, q_sp,
                                   ids, x_ld, refs, repeats, force)
            except Exception:
                log.error("ablation cell %s (P-AE=%s, Q-SP=%s) failed", name, p_ae, q_sp)
                raise
            _write_json(cache, {"key": key, "report": report.to_json()})
            cells.append(AblationCell(p_ae, q_sp, report))
        table = ablation_table(cells)
        (root / "table.txt").write_text(table)
        (root / "table.csv").write_text(_ablation_csv(cells))
    log.info("ablation:\n%s", table.rstrip())
    return cells


def _run_cell(cfg, ds, sched, ck, p_ae, q_sp, ids, x_ld, refs, repeats, force) -> MetricReport:
    key = config_mod.fingerprint(cfg, "data", "ae", "ldm")
    stamp = ck / "key.json"
    if force or not stamp.exists() or json.loads(stamp.read_text()).get("key") != key:
        _, fd, _ = ds.subset("train")
        train_ae_stage(cfg, fd, p_ae, ck / "ae.ckpt")
        train_ldm_stage(cfg, ds, ck / "ae.ckpt", ck / "ldm.ckpt")
        _write_json(stamp, {"key": key})
    else:
        log.info("reusing trained models in %s", ck)
    ae, _ = load_ae(ck / "ae.ckpt")
    model, _ = load_ldm(ck / "ldm.ckpt")
    spec = sampler_spec(cfg, "ddim" if q_sp else "ddpm")
    out, timing = timed_denoise(x_ld, ae, model, sched, spec, repeats)
    ev = cfg["eval"]
    report = evaluate_set(ids, out, ids, refs, lpips_extractor(cfg), ev["data_range"], ev["ssim_window"],
                          seconds=timing.seconds)
    report.meta = {"p_ae": p_ae, "q_sp": q_sp, "timing": timing.to_dict(),
                   "checkpoints": {"ae": file_hash(ck / "ae.ckpt"), "ldm": file_hash(ck / "ldm.ckpt")},
                   "config": cfg}
    return report


def _ablation_csv(cells: list[AblationCell]) -> str:
    lines = ["p_ae,q_sp,psnr,ssim,lpips,seconds"]
    for c in cells:
        r = c.report
        lines.append(f"{int(c.p_ae)},{int(c.q_sp)},{r.mean('psnr')!r},{r.mean('ssim')!r},"
                     f"{r.mean('lpips')!r},{r.seconds!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# misc
# ---------------------------------------------------------------------------

def cmd_dump_schedule(cfg: dict, out=None) -> str:
    text = make_schedule(cfg).to_text()
    if out is not None:
        Path(out).write_text(text)
    return text
