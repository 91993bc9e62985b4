import struct

import numpy as np
import pytest
import torch

from omnimask.backbone import ModelConfig, forward, init
from omnimask.checkpoint import (
    MAGIC,
    BadMagicError,
    Checkpoint,
    CheckpointError,
    LayoutMismatchError,
    TruncatedFileError,
    VersionMismatchError,
    decode,
    encode,
    load_checkpoint,
    save_checkpoint,
)
from omnimask.merging import MergeConfig, merge
from omnimask.pipeline import vocab_extension_init
from omnimask.vocab import build_layout


def random_ckpt(seed, speech=8):
    layout = build_layout(32, 16, speech)
    cfg = ModelConfig(dim=8, layers=1, heads=2, max_len=12, vocab=layout, seed=seed)
    return Checkpoint(init(cfg), {"stage": 2, "step": 10, "seed": seed})


def test_round_trip(tmp_path):
    ck = random_ckpt(3)
    save_checkpoint(ck, tmp_path / "a.omdf")
    back = load_checkpoint(tmp_path / "a.omdf")
    assert back.params.equal(ck.params)
    assert back.meta == ck.meta and back.layout == ck.layout and back.config == ck.config
    assert encode(back) == encode(ck)


def test_header_layout():
    data = encode(random_ckpt(0))
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8])[0] == 1
    n = struct.unpack("<I", data[8:12])[0]
    header = data[12:12 + n].decode()
    assert header.startswith('{"meta":') and " " not in header


def test_bad_magic():
    data = bytearray(encode(random_ckpt(0)))
    data[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        decode(bytes(data))


def test_version_mismatch():
    data = bytearray(encode(random_ckpt(0)))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        decode(bytes(data))


def test_truncated():
    data = encode(random_ckpt(0))
    for cut in (6, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(TruncatedFileError):
            decode(data[:cut])


def test_layout_mismatch():
    a = random_ckpt(0, speech=8)
    b = random_ckpt(0, speech=0)
    da, db = encode(a), encode(b)
    na = struct.unpack("<I", da[8:12])[0]
    nb = struct.unpack("<I", db[8:12])[0]
    # Splice b's header onto a's tensors: embed rows no longer fit the vocabulary.
    spliced = db[:12 + nb] + da[12 + na:]
    with pytest.raises(LayoutMismatchError):
        decode(spliced)


def test_error_kinds_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedFileError, LayoutMismatchError}
    assert all(issubclass(k, CheckpointError) for k in kinds)
    assert len(kinds) == 4 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_trailing_bytes_rejected():
    with pytest.raises(CheckpointError):
        decode(encode(random_ckpt(0)) + b"\0")


def test_extension_after_reload(tmp_path):
    layout = build_layout(32, 16, 0)
    cfg = ModelConfig(dim=8, layers=2, heads=2, max_len=12, vocab=layout, seed=1)
    save_checkpoint(Checkpoint(init(cfg), {}), tmp_path / "b.omdf")
    base = load_checkpoint(tmp_path / "b.omdf")
    ext = vocab_extension_init(base, 8, seed=5)
    assert ext.layout.total_size == 56
    assert torch.equal(ext.params["embed"][:48], base.params["embed"])
    assert torch.equal(ext.params["head"][:, :48], base.params["head"])
    assert ext.params["embed"].shape[0] - base.params["embed"].shape[0] == 8
    assert ext.params["head"][:, 48:].abs().sum() > 0
    for name in base.params:
        if name not in ("embed", "head"):
            assert torch.equal(ext.params[name], base.params[name])
    toks = np.array([1, 2, 40, layout.mask_id, 5])
    assert torch.equal(forward(ext.params, toks)[:, :48], forward(base.params, toks))
    with pytest.raises(ValueError):
        vocab_extension_init(ext, 8, seed=5)


def test_merged_checkpoint_round_trip(tmp_path):
    base = Checkpoint(init(ModelConfig(8, 1, 2, 12, build_layout(32, 16, 0), 2)))
    ext = vocab_extension_init(base, 8, seed=3)
    merged = Checkpoint(merge(base.params, ext.params, MergeConfig()), {"merged": True})
    save_checkpoint(merged, tmp_path / "m.omdf")
    assert load_checkpoint(tmp_path / "m.omdf").params.equal(merged.params)
