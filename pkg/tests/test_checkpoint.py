import hashlib
import subprocess

import numpy as np
import pytest
import torch

from ldct_ldm.checkpoint import content_hash, file_hash, load_checkpoint, save_checkpoint
from ldct_ldm.errors import FormatError, MissingPrerequisite


def test_round_trip(tmp_path):
    tensors = {"b": torch.randn(3, 4), "a": np.arange(5, dtype=np.float32)}
    meta = {"step": 7, "config": {"lr": 1e-3}}
    save_checkpoint(tmp_path / "c.ckpt", tensors, meta)
    back, m = load_checkpoint(tmp_path / "c.ckpt")
    assert m == meta
    assert torch.equal(back["b"], tensors["b"]) and back["a"].tolist() == list(range(5))


def test_identical_state_identical_bytes(tmp_path):
    t = {"x": torch.ones(2), "y": torch.zeros(3)}
    h1 = save_checkpoint(tmp_path / "1.ckpt", t, {"k": 1, "j": 2})
    h2 = save_checkpoint(tmp_path / "2.ckpt", dict(reversed(list(t.items()))), {"j": 2, "k": 1})
    assert h1 == h2 == file_hash(tmp_path / "1.ckpt")


def test_rejects_other_dtypes(tmp_path):
    with pytest.raises(TypeError):
        save_checkpoint(tmp_path / "c.ckpt", {"x": torch.ones(2, dtype=torch.float64)}, {})


def test_bad_files(tmp_path):
    with pytest.raises(MissingPrerequisite):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "junk")
    save_checkpoint(tmp_path / "t.ckpt", {"x": torch.ones(100)}, {})
    raw = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_content_hash_is_git_blob_hash(tmp_path):
    data = b"some bytes\n"
    assert content_hash(data) == hashlib.sha1(b"blob 11\0" + data).hexdigest()
    f = tmp_path / "f"
    f.write_bytes(data)
    try:
        out = subprocess.run(["git", "hash-object", str(f)], capture_output=True, text=True, check=True)
    except (FileNotFoundError, subprocess.CalledProcessError):
        pytest.skip("git not available")
    assert out.stdout.strip() == file_hash(f)
