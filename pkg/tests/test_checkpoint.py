import json
import struct

import numpy as np
import pytest
import torch

from carsr.checkpoint import (
    MAGIC,
    CheckpointData,
    checkpoint_path,
    find_latest_checkpoint,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from carsr.errors import ConfigError
from carsr.model import ModelConfig, build_model, count_params
from carsr.training import TrainConfig, make_optimizer, train_step


def _small_model(seed=0, **kw):
    return build_model(ModelConfig(n_f=8, num_rrdb=1, **kw), seed=seed)


def _stepped(seed=0, steps=3):
    model = _small_model(seed)
    cfg = TrainConfig(batch_size=2, total_iters=10, restart_period=10)
    opt = make_optimizer(model, cfg)
    g = torch.Generator().manual_seed(seed)
    batch = {
        "lr": torch.rand(2, 3, 8, 8, generator=g),
        "hr": torch.rand(2, 3, 32, 32, generator=g),
        "indices": np.arange(2),
    }
    for it in range(steps):
        train_step(model, opt, cfg, batch, it)
    return model, opt, cfg, batch


def test_checkpoint_path_format(tmp_path):
    assert checkpoint_path(tmp_path, 42).name == "ckpt_00000042.ckpt"


def test_round_trip_weights_and_meta(tmp_path):
    model = _small_model(3)
    path = checkpoint_path(tmp_path, 7)
    save_checkpoint(path, model, 7)
    ckpt = load_checkpoint(path)
    assert ckpt.iteration == 7
    assert ckpt.model_config == model.cfg
    assert ckpt.adam is None
    for name, p in model.named_parameters():
        assert np.array_equal(ckpt.tensors[f"model.{name}"], p.detach().numpy()), name


def test_restored_model_forward_identical(tmp_path):
    model = _small_model(4)
    path = checkpoint_path(tmp_path, 0)
    save_checkpoint(path, model, 0)
    twin = restore_model(load_checkpoint(path))
    x = torch.rand(1, 3, 12, 12, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(model(x), twin(x))


def test_save_is_byte_deterministic(tmp_path):
    model = _small_model(5)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, 11)
    save_checkpoint(p2, model, 11)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_save_load_is_stable(tmp_path):
    model, opt, _, _ = _stepped(6)
    p1 = tmp_path / "a.ckpt"
    save_checkpoint(p1, model, 3, optimizer=opt)
    ckpt = load_checkpoint(p1)
    twin = restore_model(ckpt)
    cfg = TrainConfig(batch_size=2, total_iters=10, restart_period=10)
    opt2 = make_optimizer(twin, cfg)
    restore_optimizer(ckpt, twin, opt2)
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p2, twin, 3, optimizer=opt2)
    assert p1.read_bytes() == p2.read_bytes()


def test_optimizer_state_round_trip(tmp_path):
    model, opt, cfg, batch = _stepped(7, steps=4)
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, model, 4, optimizer=opt)
    ckpt = load_checkpoint(path)
    assert ckpt.adam is not None
    assert ckpt.adam["beta1"] == pytest.approx(0.9)
    assert ckpt.adam["beta2"] == pytest.approx(0.999)

    twin = restore_model(ckpt)
    opt2 = make_optimizer(twin, cfg)
    restore_optimizer(ckpt, twin, opt2)

    # one more identical step on both copies must agree bit for bit
    train_step(model, opt, cfg, batch, 4)
    train_step(twin, opt2, cfg, batch, 4)
    for (n1, a), (_, b) in zip(model.named_parameters(), twin.named_parameters()):
        assert torch.equal(a, b), n1


def test_restore_rejects_missing_tensor(tmp_path):
    model = _small_model(8)
    path = tmp_path / "d.ckpt"
    save_checkpoint(path, model, 0)
    ckpt = load_checkpoint(path)
    del ckpt.tensors["model.conv_first.weight"]
    with pytest.raises(ConfigError, match="incompatible"):
        restore_model(ckpt)


def test_restore_rejects_shape_mismatch(tmp_path):
    model = _small_model(9)
    path = tmp_path / "e.ckpt"
    save_checkpoint(path, model, 0)
    ckpt = load_checkpoint(path)
    ckpt.tensors["model.conv_first.weight"] = np.zeros((1, 3, 3, 3), dtype=np.float32)
    with pytest.raises(ConfigError, match="incompatible"):
        restore_model(ckpt)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "f.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(ConfigError, match="magic"):
        load_checkpoint(path)


def test_load_rejects_future_version(tmp_path):
    model = _small_model(10)
    path = tmp_path / "g.ckpt"
    save_checkpoint(path, model, 0)
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(raw[start : start + hlen])
    header["version"] = 2
    new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    bumped = MAGIC + struct.pack("<I", len(new_header)) + new_header + raw[start + hlen :]
    path.write_bytes(bumped)
    with pytest.raises(ConfigError, match="version|format"):
        load_checkpoint(path)


def test_manual_byte_level_decode(tmp_path):
    """Walk the documented container layout without the loader's help."""
    model = _small_model(11)
    path = tmp_path / "h.ckpt"
    save_checkpoint(path, model, 12)
    raw = path.read_bytes()

    assert raw[:8] == b"CARSRCK1"
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    assert header["format"] == "carsr-checkpoint"
    assert header["version"] == 1
    assert header["iteration"] == 12

    directory = {e["name"]: e for e in header["tensors"]}
    blob_start = 12 + hlen
    total_bytes = sum(e["nbytes"] for e in header["tensors"])
    assert len(raw) == blob_start + total_bytes

    ent = directory["model.conv_first.weight"]
    flat = np.frombuffer(
        raw, dtype="<f4", count=ent["nbytes"] // 4, offset=blob_start + ent["offset"]
    )
    want = model.conv_first.weight.detach().numpy().ravel()
    assert np.array_equal(flat, want)

    # directory is dense and ordered: offsets tile the blob region exactly
    offset = 0
    for e in header["tensors"]:
        assert e["offset"] == offset
        offset += e["nbytes"]


def test_find_latest_prefers_highest(tmp_path):
    model = _small_model(12)
    for it in (0, 5, 20):
        save_checkpoint(checkpoint_path(tmp_path, it), model, it)
    (tmp_path / "notes.txt").write_text("ignore me")
    found = find_latest_checkpoint(tmp_path)
    assert found is not None and found.name == "ckpt_00000020.ckpt"


def test_checkpoint_counts_every_parameter(tmp_path):
    model = _small_model(13, with_car_head=True)
    path = tmp_path / "i.ckpt"
    save_checkpoint(path, model, 0)
    ckpt = load_checkpoint(path)
    model_keys = [k for k in ckpt.tensors if k.startswith("model.")]
    assert len(model_keys) == sum(1 for _ in model.named_parameters())
    assert sum(ckpt.tensors[k].size for k in model_keys) == count_params(model)
