import struct

import numpy as np
import pytest

from conftest import tiny_config
from srmoe import checkpoint
from srmoe.moe import SrMoeModel, model_forward


def test_roundtrip_bitwise(rng, tiny_model):
    for p in tiny_model.params():
        p.value[...] = rng.normal(size=p.shape)
    raw = checkpoint.to_bytes(tiny_model)
    back = checkpoint.from_bytes(raw)
    assert back.cfg == tiny_model.cfg
    assert checkpoint.param_digest(back.params()) == checkpoint.param_digest(tiny_model.params())
    x = rng.normal(size=(3, 1, 6, 6))
    assert model_forward(back, x)[0].value.tobytes() == model_forward(tiny_model, x)[0].value.tobytes()
    assert checkpoint.to_bytes(back) == raw


def test_file_roundtrip(tmp_path, tiny_model):
    path = tmp_path / "m.srmc"
    checkpoint.save(tiny_model, path)
    assert path.read_bytes()[:4] == b"SRMC"
    assert checkpoint.to_bytes(checkpoint.load(path)) == path.read_bytes()


def test_same_seed_same_bytes():
    a = checkpoint.to_bytes(SrMoeModel.init(tiny_config("spectral", seed=3)))
    b = checkpoint.to_bytes(SrMoeModel.init(tiny_config("spectral", seed=3)))
    c = checkpoint.to_bytes(SrMoeModel.init(tiny_config("spectral", seed=4)))
    assert a == b != c


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b[:10], "truncated"),
    (lambda b: b"NOPE" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 2) + b[6:], "version"),
    (lambda b: b[:-8], "truncated"),
    (lambda b: b + b"\0" * 8, "trailing"),
])
def test_corrupt_checkpoint(tiny_model, mutate, msg):
    with pytest.raises(checkpoint.CheckpointError, match=msg):
        checkpoint.from_bytes(mutate(checkpoint.to_bytes(tiny_model)))


def test_bad_header_json(tiny_model):
    raw = bytearray(checkpoint.to_bytes(tiny_model))
    raw[16] = ord("!")
    with pytest.raises(checkpoint.CheckpointError, match="header"):
        checkpoint.from_bytes(bytes(raw))


def test_snapshot_restore(rng, tiny_model):
    snap = checkpoint.snapshot(tiny_model)
    digest = checkpoint.param_digest(tiny_model.params())
    for p in tiny_model.params():
        p.value += 1.0
    checkpoint.restore(tiny_model, snap)
    assert checkpoint.param_digest(tiny_model.params()) == digest
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.restore(tiny_model, snap[:-1])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.restore(tiny_model, [np.zeros(1)] * len(snap))
