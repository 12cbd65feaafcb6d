import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldct_ldm.data import (DoseModel, PatientRecord, PhantomSpec, denormalize_hu, generate_dataset,
                           generate_phantom, load_dataset, load_images, normalize_hu, patient_split,
                           persist_dataset, regenerate, save_images, simulate_ldct)
from ldct_ldm.errors import ChecksumError, FormatError, MissingPrerequisite


def test_phantom_deterministic():
    a, b = generate_phantom(PhantomSpec(seed=5)), generate_phantom(PhantomSpec(seed=5))
    assert a.dtype == np.float32 and a.shape == (64, 64)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_phantom(PhantomSpec(seed=6)))


def test_phantom_zero_ellipses_uniform():
    img = generate_phantom(PhantomSpec(seed=0, ellipse_range=(0, 0)))
    assert np.all(img == img[0, 0])


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["abdomen", "chest"]), st.sampled_from([8, 16]))
def test_phantom_range(seed, anatomy, size):
    img = generate_phantom(PhantomSpec(seed=seed, size=size, anatomy=anatomy, supersample=2))
    assert img.min() >= -1.0 and img.max() <= 1.0 and np.all(np.isfinite(img))


def test_phantom_degenerate():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(seed=0, size=2))
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(seed=0, ellipse_range=(5, 2)))


def test_ldct_noise_std():
    fd = np.zeros((256, 256), dtype=np.float32)
    ld = simulate_ldct(fd, DoseModel(sigma=0.1, seed=0))
    n = fd.size
    # clamp at +-1 is ten sigma away and does not matter here
    assert abs(ld.std() - 0.1) < 3 * 0.1 / np.sqrt(2 * n)


def test_ldct_small_sigma_limit_and_seed():
    fd = generate_phantom(PhantomSpec(seed=1))
    assert np.max(np.abs(simulate_ldct(fd, DoseModel(sigma=1e-9, seed=0)) - fd)) < 1e-7
    a = simulate_ldct(fd, DoseModel(sigma=0.1, seed=3))
    assert np.array_equal(a, simulate_ldct(fd, DoseModel(sigma=0.1, seed=3)))
    pg = simulate_ldct(fd, DoseModel(kind="poisson-gaussian", sigma=0.01, seed=3))
    assert pg.shape == fd.shape and pg.min() >= -1 and pg.max() <= 1


def test_ldct_invalid_dose():
    fd = np.zeros((8, 8))
    for dose in (DoseModel(sigma=0.0), DoseModel(kind="speckle"), DoseModel(kind="poisson-gaussian", photon_scale=0)):
        with pytest.raises(ValueError):
            simulate_ldct(fd, dose)


def _records(n):
    return [PatientRecord(f"P{i}", [f"P{i}_S0"]) for i in range(n)]


def test_split_exact_division():
    tr, va, te = patient_split(_records(10), (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    ids = [r.patient_id for r in tr + va + te]
    assert sorted(ids) == sorted(r.patient_id for r in _records(10))


def test_split_seed_changes_assignment():
    differ = 0
    for s in range(20):
        a = patient_split(_records(10), (0.8, 0.1, 0.1), seed=2 * s)
        b = patient_split(_records(10), (0.8, 0.1, 0.1), seed=2 * s + 1)
        differ += [r.patient_id for r in a[2]] != [r.patient_id for r in b[2]] or \
            [r.patient_id for r in a[1]] != [r.patient_id for r in b[1]]
    assert differ >= 15


def test_split_errors():
    with pytest.raises(ValueError):
        patient_split(_records(2), (0.8, 0.1, 0.1), seed=0)
    with pytest.raises(ValueError):
        patient_split(_records(5), (0.5, 0.5), seed=0)
    with pytest.raises(ValueError):
        PatientRecord("P0", ["a", "a"])


def test_normalize_hu():
    assert normalize_hu(np.array([40]), 40, 400)[0] == 0.0
    assert normalize_hu(np.array([240]), 40, 400)[0] == 1.0
    assert normalize_hu(np.array([-1000]), 40, 400)[0] == -1.0
    assert normalize_hu(np.array([5000]), 40, 400)[0] == 1.0
    raw = np.array([-100, 0, 100])
    assert np.allclose(denormalize_hu(normalize_hu(raw, 40, 400), 40, 400), raw, atol=1e-4)
    with pytest.raises(ValueError):
        normalize_hu(raw, 40, 0)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(4, 2, size=32, seed=3, ratios=(0.5, 0.25, 0.25))


def test_dataset_patientwise(small_ds):
    assert len(small_ds) == 8
    splits = {k: set(v) for k, v in small_ds.splits.items()}
    assert not (splits["train"] & splits["test"]) and not (splits["val"] & splits["test"])
    _, fd, ld = small_ds.subset("test")
    assert fd.shape == (2, 32, 32) and ld.shape == fd.shape


def test_dataset_deterministic(small_ds):
    again = generate_dataset(4, 2, size=32, seed=3, ratios=(0.5, 0.25, 0.25))
    assert np.array_equal(again.fd, small_ds.fd) and np.array_equal(again.ld, small_ds.ld)


def test_persist_round_trip(tmp_path, small_ds):
    p = persist_dataset(small_ds, tmp_path / "ds")
    back = load_dataset(p)
    assert back.ids == small_ds.ids and back.splits == small_ds.splits
    assert np.array_equal(back.fd, small_ds.fd) and np.array_equal(back.ld, small_ds.ld)
    fd, ld = regenerate(back)
    assert np.array_equal(fd, small_ds.fd) and np.array_equal(ld, small_ds.ld)
    with pytest.raises(FileExistsError):
        persist_dataset(small_ds, p)
    persist_dataset(small_ds, p, force=True)


def test_corrupt_payload(tmp_path, small_ds):
    p = persist_dataset(small_ds, tmp_path / "ds")
    f = p / "images" / "00003_ld.f32"
    raw = bytearray(f.read_bytes())
    raw[17] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError, match="P001_S001.ld"):
        load_dataset(p)


def test_version_mismatch(tmp_path, small_ds):
    p = persist_dataset(small_ds, tmp_path / "ds")
    m = p / "manifest.json"
    m.write_text(m.read_text().replace('"version": 1', '"version": 99'))
    with pytest.raises(FormatError, match="version"):
        load_dataset(p)
    with pytest.raises(MissingPrerequisite):
        load_dataset(tmp_path / "nope")


def test_image_set_round_trip(tmp_path):
    imgs = np.random.default_rng(0).uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    save_images(tmp_path / "set", ["x", "y", "z"], imgs)
    ids, back = load_images(tmp_path / "set")
    assert ids == ["x", "y", "z"] and np.array_equal(back, imgs)
