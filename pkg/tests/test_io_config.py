from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oabev.camera import format_rig
from oabev.config import PipelineConfig, default_rig, format_config, load_config, parse_config
from oabev.errors import ConfigurationError, ContainerError
from oabev.io import (
    MAGIC,
    METRICS_HEADER,
    METRICS_SCHEMA,
    decode_pgm,
    decode_tensors,
    encode_pgm,
    encode_tensors,
    load_tensors,
    read_metrics,
    save_tensors,
    write_metrics,
)


class TestContainer:
    def test_round_trip(self, rng):
        tensors = {"a": rng.normal(size=(3, 4)), "scalar": np.float64(2.5), "empty": np.zeros((0, 3)), "ü.name": np.ones(5)}
        back = decode_tensors(encode_tensors(tensors))
        assert list(back) == list(tensors)
        for k, v in tensors.items():
            assert back[k].dtype == np.float32
            np.testing.assert_array_equal(back[k], np.asarray(v, dtype=np.float32))

    def test_layout(self):
        data = encode_tensors({"x": np.array([1.0, 2.0])})
        assert data[:4] == MAGIC
        assert struct.unpack("<II", data[4:12]) == (1, 1)
        assert struct.unpack("<H", data[12:14]) == (1,)
        assert data[14:15] == b"x" and data[15] == 1
        assert struct.unpack("<Q", data[16:24]) == (2,)
        assert np.frombuffer(data[24:], dtype="<f4").tolist() == [1.0, 2.0]

    def test_empty_container(self):
        assert decode_tensors(encode_tensors({})) == {}

    def test_deterministic_bytes(self, rng):
        t = {"w": rng.normal(size=(2, 2))}
        assert encode_tensors(t) == encode_tensors(dict(t))

    def test_truncated(self):
        data = encode_tensors({"x": np.ones((4, 4))})
        for cut in (2, 10, 15, len(data) - 1):
            with pytest.raises(ContainerError, match="truncated"):
                decode_tensors(data[:cut])

    def test_bad_magic(self):
        with pytest.raises(ContainerError, match="not an OABT"):
            decode_tensors(b"NOPE" + encode_tensors({})[4:])

    def test_bad_version(self):
        data = bytearray(encode_tensors({}))
        data[4:8] = struct.pack("<I", 9)
        with pytest.raises(ContainerError, match="version"):
            decode_tensors(bytes(data))

    def test_duplicate_names(self):
        one = encode_tensors({"x": np.ones(1)})
        body = one[12:]
        data = MAGIC + struct.pack("<II", 1, 2) + body + body
        with pytest.raises(ContainerError, match="duplicate"):
            decode_tensors(data)

    def test_trailing_bytes(self):
        with pytest.raises(ContainerError, match="trailing"):
            decode_tensors(encode_tensors({"x": np.ones(2)}) + b"\0")

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "t.oabt"
        save_tensors(path, {"k": np.arange(6.0).reshape(2, 3)})
        np.testing.assert_array_equal(load_tensors(path)["k"], np.arange(6.0).reshape(2, 3))
        with pytest.raises(ContainerError, match="not found"):
            load_tensors(tmp_path / "missing.oabt")


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                  elements=st.floats(-1e6, 1e6, width=32)),
                       max_size=5))
def test_container_round_trip_property(tensors):
    back = decode_tensors(encode_tensors(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


class TestPgm:
    def test_round_trip(self, rng):
        img = rng.integers(0, 256, (7, 11)).astype(np.uint8)
        data = encode_pgm(img)
        assert data.startswith(b"P5\n11 7\n255\n")
        np.testing.assert_array_equal(decode_pgm(data), img)

    def test_clips(self):
        np.testing.assert_array_equal(decode_pgm(encode_pgm(np.array([[-5, 300]]))), [[0, 255]])

    def test_rejects(self):
        with pytest.raises(ValueError):
            encode_pgm(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            decode_pgm(b"P6\n1 1\n255\n\0")


class TestMetricsCsv:
    def test_header_crlf_and_blank_object_id(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics(path, [("n_points", None, 12), ("centroid_error", 3, 0.25), ("flag", None, True)])
        raw = path.read_bytes()
        assert raw.startswith(",".join(METRICS_HEADER).encode() + b"\r\n")
        assert raw.count(b"\r\n") == 4
        rows = read_metrics(path)
        assert rows[0] == {"schema": METRICS_SCHEMA, "metric": "n_points", "object_id": "", "value": "12"}
        assert rows[1]["object_id"] == "3" and float(rows[1]["value"]) == 0.25
        assert rows[2]["value"] == "1"

    def test_append_keeps_single_header(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics(path, [("a", None, 1)])
        write_metrics(path, [("b", None, 2)], append=True)
        assert [r["metric"] for r in read_metrics(path)] == ["a", "b"]

    def test_quoting(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics(path, [('odd,"name"', None, 1.5)])
        assert read_metrics(path)[0]["metric"] == 'odd,"name"'

    def test_floats_round_trip_exactly(self, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics(path, [("x", None, 0.1 + 0.2)])
        assert float(read_metrics(path)[0]["value"]) == 0.1 + 0.2


class TestConfig:
    def test_default_round_trip(self):
        cfg = PipelineConfig()
        assert parse_config(format_config(cfg)) == cfg

    def test_round_trip_with_overrides(self, tmp_path):
        text = "[pipeline]\nmode = decoded-depth\nseed = 99\nfusion = no\n[binning]\nK = 12\n[fusion]\nchannels = 8\n" \
               "[losses]\nalpha = 2.0\nl2d = 0.5\n[scene]\nbox_count = 3\nlength_range = 3.0 4.0\n"
        cfg = parse_config(text)
        assert cfg.mode == "decoded-depth" and cfg.seed == 99 and cfg.fusion is False
        assert cfg.binning.K == 12 and cfg.fusion_cfg.channels == 8
        assert cfg.weights.alpha == 2.0 and cfg.surrogates.l2d == 0.5
        assert cfg.scene.box_count == 3 and cfg.scene.length_range == (3.0, 4.0)
        assert parse_config(format_config(cfg)) == cfg

    def test_empty_text_is_default(self):
        assert parse_config("") == PipelineConfig()

    @pytest.mark.parametrize(
        "text, match",
        [
            ("[pipeline]\nbogus = 1\n", "unknown key"),
            ("[binning]\nk = 5\n", "unknown key"),
            ("[extras]\n", "unknown config sections"),
            ("[pipeline]\nseed = seven\n", "bad value"),
            ("[pipeline]\nfusion = maybe\n", "bad value"),
            ("[scene]\nlength_range = 3.0\n", "bad value"),
            ("[pipeline]\nmode = lidar\n", "mode"),
            ("[pipeline]\nthreads = 0\n", "threads"),
            ("[binning]\nK = 0\n", "bin count"),
            ("no header\n", "malformed"),
            ("[pipeline]\nrig = /nonexistent/rig.ini\n", "rig file not found"),
        ],
    )
    def test_errors(self, text, match):
        with pytest.raises(ConfigurationError, match=match):
            parse_config(text)

    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        sub = tmp_path / "cfg"
        sub.mkdir()
        (sub / "rig.ini").write_text(format_rig(default_rig()))
        (sub / "run.ini").write_text("[pipeline]\nrig = rig.ini\n")
        cfg = load_config(sub / "run.ini")
        assert cfg.rig == str(sub / "rig.ini")
        assert len(cfg.load_rig()) == 6

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_config(tmp_path / "nope.ini")

    def test_pipeline_grid_is_scaled(self):
        assert PipelineConfig().pipeline_grid.shape == (128, 128, 20)
