import numpy as np
import pytest

from stemforge.dataset_io import (DatasetFormatError, dataset_config_from_mapping,
                                  load_dataset_config, parse_config_text,
                                  read_dataset, write_dataset)
from stemforge.stems import DatasetConfig, generate_dataset


@pytest.fixture(scope="module")
def small_set():
    cfg = DatasetConfig(num_samples=4, length=256, frame_size=16, seed=9)
    return cfg, generate_dataset(cfg)


def test_write_read_round_trip(tmp_path, small_set):
    cfg, samples = small_set
    path = tmp_path / "d.stem"
    write_dataset(samples, path, cfg)
    back, header = read_dataset(path)
    assert header == {"num_tracks": 4, "sample_rate": cfg.sample_rate,
                      "length": cfg.length, "vocab_size": cfg.vocab.size}
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        # storage is float32; a round-tripped file is bitwise stable
        assert np.array_equal(b.waveforms, a.waveforms.astype(np.float32))
        assert b.prompt.content_tokens == a.prompt.content_tokens
        assert b.meta == a.meta


def test_reread_is_bitwise_identical(tmp_path, small_set):
    cfg, samples = small_set
    p1 = tmp_path / "a.stem"
    p2 = tmp_path / "b.stem"
    write_dataset(samples, p1, cfg)
    back, _ = read_dataset(p1)
    write_dataset(back, p2, cfg)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_dataset_valid(tmp_path):
    cfg = DatasetConfig(num_samples=0, length=256, frame_size=16)
    path = tmp_path / "e.stem"
    write_dataset([], path, cfg)
    back, header = read_dataset(path)
    assert back == [] and header["length"] == 256


def test_corrupt_payload_byte_raises_crc(tmp_path, small_set):
    cfg, samples = small_set
    path = tmp_path / "c.stem"
    write_dataset(samples, path, cfg)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(DatasetFormatError, match="CRC"):
        read_dataset(path)


def test_bad_magic_and_truncation(tmp_path, small_set):
    cfg, samples = small_set
    path = tmp_path / "m.stem"
    write_dataset(samples, path, cfg)
    blob = path.read_bytes()
    bad = tmp_path / "bad.stem"
    bad.write_bytes(b"WAVE" + blob[4:])
    with pytest.raises(DatasetFormatError, match="magic"):
        read_dataset(bad)
    short = tmp_path / "short.stem"
    short.write_bytes(blob[:40])
    with pytest.raises(DatasetFormatError):
        read_dataset(short)


class TestConfigFormat:
    def test_parse_key_values(self):
        text = """
        # dataset
        sample_rate = 4000
        f0_buckets = 200, 250,300
        codec_kind = ortho   # trailing comment
        """
        raw = parse_config_text(text)
        assert raw["sample_rate"] == "4000"
        assert raw["codec_kind"] == "ortho"

    def test_full_config(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text(
            "sample_rate = 4000\nnum_samples = 16\nseed = 3\n"
            "f0_buckets = 200,250\ntempo_buckets = 320,400\nmotif_count = 2\n"
            "frame_size = 32\ncodec_kind = identity\ntarget_rms = 0.1\n",
            encoding="utf-8")
        cfg = load_dataset_config(path)
        assert cfg.num_samples == 16
        assert cfg.f0_buckets == (200.0, 250.0)
        assert cfg.tempo_buckets == (320, 400)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            dataset_config_from_mapping({"bitrate": "320"})

    def test_malformed_line_rejected(self):
        with pytest.raises(ValueError, match="key = value"):
            parse_config_text("sample_rate 4000")
