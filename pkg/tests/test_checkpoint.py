import numpy as np
import pytest

from sublab import checkpoint as ckpt
from sublab import model as M

CFG = M.ModelConfig(enc_layers=1, dec_layers=1, d_model=8, d_ff=16, n_heads=2,
                    src_vocab=10, tgt_vocab=10, max_len=12)


def test_round_trip_is_bit_exact(tmp_path):
    params = M.init_model(CFG, seed=11)
    rng = np.random.default_rng(1)
    for t in params.values.values():
        t.data = t.data + rng.normal(size=t.data.shape)
    params.step = 42
    params.meta["note"] = {"seeds": [1, 66, 99]}

    path = tmp_path / "model.cscp"
    ckpt.save_checkpoint(path, params)
    loaded = ckpt.load_checkpoint(path)

    assert loaded.config == CFG
    assert loaded.step == 42
    assert loaded.meta == params.meta
    assert set(loaded.values) == set(params.values)
    for name in params.values:
        assert loaded.values[name].data.tobytes() == params.values[name].data.tobytes()
        assert loaded.init_values[name].tobytes() == params.init_values[name].tobytes()
        assert loaded.values[name].requires_grad


def test_serialization_is_canonical(tmp_path):
    params = M.init_model(CFG, seed=3)
    a = tmp_path / "a.cscp"
    b = tmp_path / "b.cscp"
    ckpt.save_checkpoint(a, params)
    ckpt.save_checkpoint(b, M.init_model(CFG, seed=3))
    assert a.read_bytes() == b.read_bytes()


def test_magic_and_version_are_checked(tmp_path):
    params = M.init_model(CFG, seed=3)
    path = tmp_path / "model.cscp"
    ckpt.save_checkpoint(path, params)
    blob = bytearray(path.read_bytes())

    bad_magic = tmp_path / "bad_magic.cscp"
    bad_magic.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(bad_magic)

    bad_version = tmp_path / "bad_version.cscp"
    bad_version.write_bytes(bytes(blob[:4]) + b"\x63\x00\x00\x00" + bytes(blob[8:]))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(bad_version)

    truncated = tmp_path / "trunc.cscp"
    truncated.write_bytes(bytes(blob[: len(blob) // 2]))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(truncated)


def test_init_namespace_survives_weight_updates(tmp_path):
    params = M.init_model(CFG, seed=5)
    frozen = {k: v.copy() for k, v in params.init_values.items()}
    for t in params.values.values():
        t.data = t.data * 2.0 + 1.0
    path = tmp_path / "model.cscp"
    ckpt.save_checkpoint(path, params)
    loaded = ckpt.load_checkpoint(path)
    for name, arr in frozen.items():
        assert loaded.init_values[name].tobytes() == arr.tobytes()
        assert loaded.values[name].data.tobytes() != arr.tobytes()


def test_pruned_config_round_trips(tmp_path):
    cid = M.ComponentId(M.Side.DECODER, 0, M.Kind.ENCODER_ATTENTION)
    cfg = M.remove_components(CFG, [cid])
    params = M.init_model(cfg, seed=2)
    path = tmp_path / "pruned.cscp"
    ckpt.save_checkpoint(path, params)
    assert ckpt.load_checkpoint(path).config == cfg
