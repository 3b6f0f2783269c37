import numpy as np
import pytest

from stemforge.checkpoint import (CheckpointError, CheckpointMeta, load_checkpoint,
                                  read_tensors, save_checkpoint, write_tensors)


def test_round_trip(tmp_path):
    tensors = {
        "a.w": np.arange(24, dtype=np.float32).reshape(2, 3, 4),
        "b": np.array([1.5], dtype=np.float32),
        "scalar_rank0": np.float32(3.25).reshape(()),
    }
    path = tmp_path / "t.stmf"
    write_tensors(path, tensors)
    back = read_tensors(path)
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].dtype == np.float32
        assert np.array_equal(back[k], np.asarray(tensors[k], dtype=np.float32))


def test_round_trip_is_byte_stable(tmp_path):
    tensors = {"x": np.random.default_rng(0).standard_normal((5, 7)).astype(np.float32)}
    p1, p2 = tmp_path / "a.stmf", tmp_path / "b.stmf"
    write_tensors(p1, tensors)
    write_tensors(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_corruption_detected(tmp_path):
    path = tmp_path / "t.stmf"
    write_tensors(path, {"x": np.ones(8, dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC"):
        read_tensors(path)


def test_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "bad.stmf"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        read_tensors(path)
    good = tmp_path / "good.stmf"
    write_tensors(good, {"x": np.ones(4, dtype=np.float32)})
    blob = good.read_bytes()
    # drop payload bytes but keep a plausible CRC trailer
    trunc = tmp_path / "trunc.stmf"
    trunc.write_bytes(blob[:14] + blob[-4:])
    with pytest.raises(CheckpointError):
        read_tensors(trunc)


def test_duplicate_names_rejected(tmp_path):
    class Weird(dict):
        def items(self):
            yield "x", np.ones(2)
            yield "x", np.zeros(2)

    with pytest.raises(CheckpointError, match="duplicate"):
        write_tensors(tmp_path / "d.stmf", Weird())


def test_empty_container(tmp_path):
    path = tmp_path / "empty.stmf"
    write_tensors(path, {})
    assert read_tensors(path) == {}


def test_checkpoint_meta_round_trip(tmp_path):
    meta = CheckpointMeta(
        model={"tracks": 4, "latent_dim": 32, "frames": 64, "hidden": 32,
               "depth": 2, "time_embed_dim": 16, "vocab_size": 64,
               "prompt_embed_dim": 16, "cond_width": 64},
        num_steps=100, codec_kind="ortho", frame_size=32, codec_seed=3,
        sample_rate=4000, num_f0=4, num_tempo=3, num_motifs=3)
    params = {"stem.w": np.random.default_rng(1).standard_normal((4, 4, 3))}
    path = tmp_path / "ck.stmf"
    save_checkpoint(path, params, meta)
    back_params, back_meta = load_checkpoint(path)
    assert back_meta.model == meta.model
    assert back_meta.codec_kind == "ortho"
    assert back_meta.num_steps == 100
    assert back_params["stem.w"].dtype == np.float64
    assert np.array_equal(back_params["stem.w"],
                          params["stem.w"].astype(np.float32).astype(np.float64))
    assert not any(k.startswith("meta/") for k in back_params)
