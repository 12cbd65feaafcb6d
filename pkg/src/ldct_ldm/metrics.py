"""PSNR, SSIM and LPIPS, plus the per-set report and its table renderings.

LPIPS here is computed through a :class:`FeatureExtractor`. With the desk-scale
fixed-seed extractor and unit layer weights the values are comparable between
runs of this package, not with published LPIPS numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .features import FeatureExtractor

NORM_EPS = 1e-10


def psnr(x: np.ndarray, y: np.ndarray, data_range: float = 2.0) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be > 0")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x: np.ndarray, y: np.ndarray, window: int = 11, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 2.0, sigma: float = 1.5) -> float:
    """Mean SSIM over all positions where the Gaussian window fits entirely."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"need two equal-shape 2-D images, got {x.shape}, {y.shape}")
    if window % 2 == 0 or window < 1 or window > min(x.shape):
        raise ValueError(f"window {window} must be odd and <= {min(x.shape)}")
    w = gaussian_window(window, sigma)

    def filt(a):
        return convolve2d(a, w, mode="valid")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _unit_normalize(f: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt((f * f).sum(dim=1, keepdim=True))
    return f / (norm + NORM_EPS)


def lpips_distance(x: torch.Tensor, y: torch.Tensor, extractor: FeatureExtractor,
                   layer_weights: Sequence | None = None) -> torch.Tensor:
    """Per-item LPIPS for batches shaped (B, 1, H, W); returns shape (B,).

    ``layer_weights`` holds one entry per tapped layer, either a scalar or a
    per-channel vector; ``None`` means all ones.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    fx, fy = extractor(x), extractor(y)
    if layer_weights is None:
        layer_weights = [1.0] * len(fx)
    if len(layer_weights) != len(fx):
        raise ValueError(f"{len(layer_weights)} layer weights for {len(fx)} layers")
    total = x.new_zeros(x.shape[0])
    for a, b, w in zip(fx, fy, layer_weights):
        w = torch.as_tensor(w, dtype=a.dtype).reshape(-1)
        if w.numel() not in (1, a.shape[1]):
            raise ValueError(f"layer weight of size {w.numel()} for {a.shape[1]} channels")
        d = w.reshape(1, -1, 1, 1) * (_unit_normalize(a) - _unit_normalize(b)) / 2.0
        total = total + (d * d).sum(dim=1).mean(dim=(1, 2))
    return total


def lpips(x: np.ndarray, y: np.ndarray, extractor: FeatureExtractor,
          layer_weights: Sequence | None = None) -> float:
    tx = torch.as_tensor(np.asarray(x, dtype=np.float32))[None, None]
    ty = torch.as_tensor(np.asarray(y, dtype=np.float32))[None, None]
    with torch.no_grad():
        return float(lpips_distance(tx, ty, extractor, layer_weights)[0])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRICS = ("psnr", "ssim", "lpips")


def _aggregate(records: list[dict]) -> dict:
    agg = {}
    for m in METRICS:
        vals = np.array([r[m] for r in records], dtype=np.float64)
        if np.all(np.isfinite(vals)):
            agg[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        else:
            agg[m] = {"mean": float(np.mean(vals)), "std": math.nan}
    return agg


@dataclass
class MetricReport:
    records: list[dict]
    seconds: float | None = None
    data_range: float = 2.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.records:
            if not -1.0 <= r["ssim"] <= 1.0 or r["lpips"] < 0:
                raise ValueError(f"metric out of range in record {r['id']}")

    @property
    def aggregates(self) -> dict:
        return _aggregate(self.records)

    def mean(self, metric: str) -> float:
        return self.aggregates[metric]["mean"]

    def to_json(self) -> str:
        d = {"data_range": self.data_range, "seconds": self.seconds, "records": self.records,
             "aggregates": self.aggregates, "meta": self.meta}
        return json.dumps(d, indent=1, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(d["records"], d["seconds"], d["data_range"], d.get("meta", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# data_range={self.data_range!r} seconds={self.seconds!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", *METRICS])
        for r in self.records:
            w.writerow([r["id"], *(repr(float(r[m])) for m in METRICS)])
        for stat in ("mean", "std"):
            agg = self.aggregates
            w.writerow([f"__{stat}__", *(repr(agg[m][stat]) for m in METRICS)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        lines = text.splitlines()
        head = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split())
        rows = list(csv.DictReader(lines[1:]))
        records = [{"id": r["id"], **{m: float(r[m]) for m in METRICS}}
                   for r in rows if not r["id"].startswith("__")]
        seconds = None if head["seconds"] == "None" else float(head["seconds"])
        return cls(records, seconds, float(head["data_range"]))


def evaluate_set(pred_ids: Sequence[str], preds: np.ndarray, ref_ids: Sequence[str], refs: np.ndarray,
                 extractor: FeatureExtractor, data_range: float = 2.0, ssim_window: int = 11,
                 layer_weights=None, seconds: float | None = None) -> MetricReport:
    """Per-image PSNR/SSIM/LPIPS for predictions matched to references by id."""
    pred_map = dict(zip(pred_ids, range(len(pred_ids))))
    missing = [i for i in ref_ids if i not in pred_map]
    extra = [i for i in pred_ids if i not in set(ref_ids)]
    if missing or extra:
        raise ValueError(f"id mismatch: missing predictions {missing}, unexpected {extra}")
    records = []
    for j, rid in enumerate(ref_ids):
        p, r = preds[pred_map[rid]], refs[j]
        records.append({"id": rid, "psnr": psnr(p, r, data_range),
                        "ssim": ssim(p, r, ssim_window, data_range=data_range),
                        "lpips": lpips(p, r, extractor, layer_weights)})
    return MetricReport(records, seconds, data_range)


def _fmt_time(seconds: float | None) -> str:
    if seconds is None:
        return "-"
    if seconds >= 60:
        return f"{seconds / 60:.2f}m"
    return f"{seconds:.2f}s"


def format_table(rows: Sequence[tuple], first_header: str | Sequence[str] = "Method") -> str:
    """Aligned text table: name column(s), PSNR (up), SSIM (up), LPIPS (down), Time (down).

    Each row is ``(name, report)``; ``name`` may be a tuple filling several
    leading columns, with ``first_header`` then a matching tuple.
    """
    lead = [first_header] if isinstance(first_header, str) else list(first_header)
    header = [*lead, "PSNR↑", "SSIM↑", "LPIPS↓", "Time↓"]
    body = []
    for name, rep in rows:
        names = [name] if isinstance(name, str) else list(name)
        if len(names) != len(lead):
            raise ValueError(f"row has {len(names)} name columns, header {len(lead)}")
        body.append([*names, f"{rep.mean('psnr'):.2f}", f"{rep.mean('ssim'):.3f}",
                     f"{rep.mean('lpips'):.4f}", _fmt_time(rep.seconds)])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    line = lambda r: " | ".join(c.ljust(w) if i < len(lead) else c.rjust(w)
                                for i, (c, w) in enumerate(zip(r, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *(line(r) for r in body)]) + "\n"
