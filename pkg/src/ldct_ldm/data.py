"""Synthetic CT phantoms, simulated low-dose noise, splits and the dataset container.

All generation is a pure function of the spec and its seed. Images are
float32 arrays shaped (H, W) with values in [-1, 1].
"""

from __future__ import annotations

import json
import shutil
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ChecksumError, FormatError, MissingPrerequisite

DATASET_VERSION = 1

# (low, high) intensity per tissue class, normalized units
DEFAULT_TISSUES = {
    "body": (-0.10, 0.10),
    "fat": (-0.45, -0.25),
    "lung": (-0.75, -0.55),
    "organ": (0.15, 0.40),
    "bone": (0.60, 0.85),
}


@dataclass
class PhantomSpec:
    seed: int
    size: int = 64
    ellipse_range: tuple[int, int] = (4, 9)
    tissues: dict = field(default_factory=lambda: dict(DEFAULT_TISSUES))
    background: float = -0.8
    anatomy: str = "abdomen"
    supersample: int = 4

    def __post_init__(self):
        self.ellipse_range = tuple(self.ellipse_range)
        self.tissues = {k: tuple(v) for k, v in self.tissues.items()}


@dataclass
class DoseModel:
    kind: str = "gaussian"  # gaussian | poisson-gaussian
    sigma: float = 0.1
    photon_scale: float = 1e4
    seed: int = 0

    def validate(self):
        if self.kind not in ("gaussian", "poisson-gaussian"):
            raise ValueError(f"unknown dose model kind {self.kind!r}")
        if not self.sigma > 0:
            raise ValueError(f"dose sigma must be > 0, got {self.sigma}")
        if self.kind == "poisson-gaussian" and not self.photon_scale > 0:
            raise ValueError("photon_scale must be > 0")


@dataclass
class PatientRecord:
    patient_id: str
    slice_ids: list[str]
    anatomy: str = "abdomen"

    def __post_init__(self):
        if len(set(self.slice_ids)) != len(self.slice_ids):
            raise ValueError(f"duplicate slice ids for patient {self.patient_id}")
        if self.anatomy not in ("abdomen", "chest"):
            raise ValueError(f"unknown anatomy {self.anatomy!r}")


# ---------------------------------------------------------------------------
# phantoms and noise
# ---------------------------------------------------------------------------

def _coverage(xx, yy, cx, cy, a, b, theta, ss):
    c, s = np.cos(theta), np.sin(theta)
    xr = c * (xx - cx) + s * (yy - cy)
    yr = -s * (xx - cx) + c * (yy - cy)
    inside = ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0).astype(np.float64)
    n = inside.shape[0] // ss
    return inside.reshape(n, ss, n, ss).mean(axis=(1, 3))


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Anti-aliased overlapping-ellipse phantom.

    The first ellipse is the body outline; later ones are organs (or lungs
    for chest anatomy) painted over it. Body tissue carries a faint linear
    shading so regions are piecewise smooth rather than flat.
    """
    if spec.size < 4 or spec.supersample < 1:
        raise ValueError(f"degenerate phantom size {spec.size}")
    lo, hi = spec.ellipse_range
    if not 0 <= lo <= hi:
        raise ValueError(f"bad ellipse_range {spec.ellipse_range}")
    rng = np.random.default_rng(spec.seed)
    n = spec.size * spec.supersample
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, coords)
    img = np.full((spec.size, spec.size), spec.background, dtype=np.float64)
    count = int(rng.integers(lo, hi + 1))
    if count == 0:
        return img.astype(np.float32)

    ss = spec.supersample
    ba, bb = rng.uniform(0.72, 0.9), rng.uniform(0.55, 0.78)
    btheta = rng.uniform(-0.2, 0.2)
    alpha = _coverage(xx, yy, 0.0, 0.0, ba, bb, btheta, ss)
    grad = rng.uniform(-0.04, 0.04, size=2)
    px = (np.arange(spec.size) + 0.5) / spec.size * 2.0 - 1.0
    gx, gy = np.meshgrid(px, px)
    body = rng.uniform(*spec.tissues["body"]) + grad[0] * gx + grad[1] * gy
    img = img * (1 - alpha) + body * alpha

    classes = ["fat", "organ", "bone"]
    for k in range(1, count):
        if spec.anatomy == "chest" and k <= 2:
            cls = "lung"
            cx = (-1) ** k * rng.uniform(0.25, 0.4) * ba
            cy, a, b = rng.uniform(-0.15, 0.15), rng.uniform(0.18, 0.3), rng.uniform(0.3, 0.45)
            theta = rng.uniform(-0.3, 0.3)
        else:
            cls = classes[int(rng.integers(len(classes)))]
            r, phi = np.sqrt(rng.uniform(0, 1)) * 0.6, rng.uniform(0, 2 * np.pi)
            cx, cy = r * ba * np.cos(phi), r * bb * np.sin(phi)
            scale = 0.5 if cls == "bone" else 1.0
            a, b = rng.uniform(0.06, 0.25) * scale, rng.uniform(0.06, 0.25) * scale
            theta = rng.uniform(0, np.pi)
        value = rng.uniform(*spec.tissues[cls])
        alpha = _coverage(xx, yy, cx, cy, a, b, theta, ss)
        img = img * (1 - alpha) + value * alpha
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def simulate_ldct(fdct: np.ndarray, dose: DoseModel) -> np.ndarray:
    """Add simulated low-dose noise to a normalized full-dose image, then clamp to [-1, 1].

    ``poisson-gaussian`` maps intensity to an attenuation line integral,
    draws Poisson photon counts around ``photon_scale``, maps back, and adds
    the Gaussian electronic term.
    """
    dose.validate()
    fdct = np.asarray(fdct, dtype=np.float64)
    if fdct.ndim != 2 or not np.all(np.isfinite(fdct)):
        raise ValueError("fdct must be a finite 2-D image")
    rng = np.random.default_rng(dose.seed)
    if dose.kind == "gaussian":
        out = fdct + dose.sigma * rng.standard_normal(fdct.shape)
    else:
        mu_max = 4.0
        line = (fdct + 1.0) / 2.0 * mu_max
        counts = rng.poisson(dose.photon_scale * np.exp(-line))
        line_hat = -np.log(np.maximum(counts, 1) / dose.photon_scale)
        out = line_hat / mu_max * 2.0 - 1.0 + dose.sigma * rng.standard_normal(fdct.shape)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# HU windowing
# ---------------------------------------------------------------------------

def normalize_hu(raw: np.ndarray, center: float, width: float) -> np.ndarray:
    """Map [center - width/2, center + width/2] linearly onto [-1, 1], clamping outside."""
    if not width > 0:
        raise ValueError(f"window width must be > 0, got {width}")
    lo = center - width / 2.0
    out = (np.asarray(raw, dtype=np.float64) - lo) / width * 2.0 - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def denormalize_hu(img: np.ndarray, center: float, width: float) -> np.ndarray:
    if not width > 0:
        raise ValueError(f"window width must be > 0, got {width}")
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0 * width + (center - width / 2.0)


# ---------------------------------------------------------------------------
# patient-wise split
# ---------------------------------------------------------------------------

def patient_split(records: Sequence[PatientRecord], ratios: Sequence[float], seed: int):
    """Shuffle patients with ``seed`` and cut them into train/val/test lists.

    Val and test get ``floor(ratio * n)`` patients (at least one if their
    ratio is nonzero); the remainder goes to train.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    n = len(records)
    if n < sum(r > 0 for r in ratios):
        raise ValueError(f"{n} patients cannot fill {sum(r > 0 for r in ratios)} nonempty splits")
    order = np.random.default_rng(seed).permutation(n)
    sizes = [0, 0]
    for i, r in enumerate(ratios[1:]):
        sizes[i] = max(1, int(np.floor(r * n + 1e-9))) if r > 0 else 0
    n_train = n - sum(sizes)
    if ratios[0] > 0 and n_train < 1:
        raise ValueError("no patients left for the train split")
    shuffled = [records[i] for i in order]
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + sizes[0]]
    test = shuffled[n_train + sizes[0]:]
    return train, val, test


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    ids: list[str]
    fd: np.ndarray  # (N, H, W) float32
    ld: np.ndarray  # (N, H, W) float32
    patients: list[PatientRecord]
    specs: list[PhantomSpec | None]
    doses: list[DoseModel | None]
    splits: dict[str, list[str]] = field(default_factory=dict)  # split -> patient ids
    provenance: str = "synthetic"

    def __len__(self):
        return len(self.ids)

    def indices(self, split: str) -> list[int]:
        pats = set(self.splits[split])
        wanted = {s for p in self.patients if p.patient_id in pats for s in p.slice_ids}
        return [i for i, sid in enumerate(self.ids) if sid in wanted]

    def subset(self, split: str) -> tuple[list[str], np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return [self.ids[i] for i in idx], self.fd[idx], self.ld[idx]


def slice_seed(base_seed: int, patient: int, slice_: int, stream: int) -> int:
    return int(np.random.SeedSequence([base_seed, patient, slice_, stream]).generate_state(1)[0])


def generate_dataset(n_patients: int, slices_per_patient: int, size: int = 64,
                     dose_sigma: float = 0.1, seed: int = 0, split_seed: int = 0,
                     ratios: Sequence[float] = (0.8, 0.1, 0.1),
                     dose_kind: str = "gaussian") -> Dataset:
    """Paired FD/LD phantom dataset with a patient-wise split."""
    if n_patients < 1 or slices_per_patient < 1:
        raise ValueError("need at least one patient and one slice")
    ids, fds, lds, patients, specs, doses = [], [], [], [], [], []
    for p in range(n_patients):
        anatomy = "chest" if p % 2 else "abdomen"
        pid = f"P{p:03d}"
        sids = []
        for s in range(slices_per_patient):
            sid = f"{pid}_S{s:03d}"
            spec = PhantomSpec(seed=slice_seed(seed, p, s, 0), size=size, anatomy=anatomy)
            dose = DoseModel(kind=dose_kind, sigma=dose_sigma, seed=slice_seed(seed, p, s, 1))
            fd = generate_phantom(spec)
            ids.append(sid)
            fds.append(fd)
            lds.append(simulate_ldct(fd, dose))
            specs.append(spec)
            doses.append(dose)
            sids.append(sid)
        patients.append(PatientRecord(pid, sids, anatomy))
    train, val, test = patient_split(patients, ratios, split_seed)
    splits = {"train": [r.patient_id for r in train], "val": [r.patient_id for r in val],
              "test": [r.patient_id for r in test]}
    return Dataset(ids, np.stack(fds), np.stack(lds), patients, specs, doses, splits)


def _payload(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C")


def persist_dataset(ds: Dataset, path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists():
        if not force:
            raise FileExistsError(f"{path} exists (use --force to overwrite)")
        shutil.rmtree(path)
    (path / "images").mkdir(parents=True)
    items = []
    for i, sid in enumerate(ds.ids):
        rec = {"id": sid, "shape": list(ds.fd[i].shape), "dtype": "float32-le"}
        for kind, arr in (("fd", ds.fd[i]), ("ld", ds.ld[i])):
            raw = _payload(arr)
            fname = f"images/{i:05d}_{kind}.f32"
            (path / fname).write_bytes(raw)
            rec[kind] = {"file": fname, "crc32": zlib.crc32(raw)}
        spec, dose = ds.specs[i], ds.doses[i]
        rec["phantom"] = asdict(spec) if spec is not None else None
        rec["dose"] = asdict(dose) if dose is not None else None
        items.append(rec)
    manifest = {
        "version": DATASET_VERSION,
        "provenance": ds.provenance,
        "items": items,
        "patients": [asdict(p) for p in ds.patients],
        "splits": ds.splits,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingPrerequisite(f"dataset manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"dataset version {manifest.get('version')} != {DATASET_VERSION}")
    ids, fds, lds, specs, doses = [], [], [], [], []
    for rec in manifest["items"]:
        arrs = {}
        for kind in ("fd", "ld"):
            entry = rec[kind]
            raw = (path / entry["file"]).read_bytes()
            if zlib.crc32(raw) != entry["crc32"]:
                raise ChecksumError(f"checksum mismatch in {rec['id']}.{kind} ({entry['file']})")
            arrs[kind] = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).astype(np.float32)
        ids.append(rec["id"])
        fds.append(arrs["fd"])
        lds.append(arrs["ld"])
        specs.append(PhantomSpec(**rec["phantom"]) if rec.get("phantom") else None)
        doses.append(DoseModel(**rec["dose"]) if rec.get("dose") else None)
    patients = [PatientRecord(**p) for p in manifest["patients"]]
    return Dataset(ids, np.stack(fds), np.stack(lds), patients, specs, doses,
                   manifest.get("splits", {}), manifest.get("provenance", "synthetic"))


def regenerate(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild FD/LD tensors from the stored phantom specs and dose models."""
    fd = np.stack([generate_phantom(s) for s in ds.specs])
    ld = np.stack([simulate_ldct(f, d) for f, d in zip(fd, ds.doses)])
    return fd, ld


def save_images(path, ids: Sequence[str], images: np.ndarray, force: bool = True) -> Path:
    """Image-set container (denoised outputs, ingested slices): same payload format, one kind."""
    path = Path(path)
    if path.exists():
        if not force:
            raise FileExistsError(f"{path} exists")
        shutil.rmtree(path)
    (path / "images").mkdir(parents=True)
    items = []
    for i, sid in enumerate(ids):
        raw = _payload(images[i])
        fname = f"images/{i:05d}.f32"
        (path / fname).write_bytes(raw)
        items.append({"id": sid, "shape": list(images[i].shape), "file": fname, "crc32": zlib.crc32(raw)})
    (path / "manifest.json").write_text(
        json.dumps({"version": DATASET_VERSION, "kind": "image-set", "items": items}, indent=1, sort_keys=True) + "\n")
    return path


def load_images(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingPrerequisite(f"image set not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"image set version {manifest.get('version')} != {DATASET_VERSION}")
    ids, arrs = [], []
    for rec in manifest["items"]:
        raw = (path / rec["file"]).read_bytes()
        if zlib.crc32(raw) != rec["crc32"]:
            raise ChecksumError(f"checksum mismatch in {rec['id']} ({rec['file']})")
        ids.append(rec["id"])
        arrs.append(np.frombuffer(raw, dtype="<f4").reshape(rec["shape"]).astype(np.float32))
    return ids, np.stack(arrs)
