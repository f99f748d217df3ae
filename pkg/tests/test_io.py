import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nv3d import io


class TestVolume:
    @settings(max_examples=30)
    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                      elements=st.floats(-1e3, 1e3, width=32)))
    def test_roundtrip_f32(self, arr):
        out = io.decode_volume(io.encode_volume(arr))
        assert out.dtype == np.float32 and np.array_equal(out, arr)

    def test_roundtrip_f64(self, rng):
        arr = rng.random((1, 3, 4, 5))
        out = io.decode_volume(io.encode_volume(arr, np.float64))
        assert out.dtype == np.float64 and np.array_equal(out, arr)

    def test_header_layout(self):
        buf = io.encode_volume(np.zeros((2, 3), dtype=np.float32))
        assert buf[:4] == b"NVOL"
        version, rank = struct.unpack_from("<IB", buf, 4)
        assert (version, rank) == (1, 2)
        assert struct.unpack_from("<2QB", buf, 9) == (2, 3, 1)
        assert len(buf) == 9 + 16 + 1 + 6 * 4

    def test_file_roundtrip(self, tmp_path, rng):
        arr = rng.random((1, 4, 4, 4)).astype(np.float32)
        io.write_volume(tmp_path / "v.nvol", arr)
        assert np.array_equal(io.read_volume(tmp_path / "v.nvol"), arr)

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:-1], "payload"),
        (lambda b: b + b"\0", "payload"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
        (lambda b: b[:10], "truncated"),
    ])
    def test_corrupt(self, mutate, match):
        buf = io.encode_volume(np.ones((2, 2), dtype=np.float32))
        with pytest.raises(io.FormatError, match=match):
            io.decode_volume(mutate(buf))

    def test_bad_dtype_tag(self):
        buf = bytearray(io.encode_volume(np.ones(3, dtype=np.float32)))
        buf[4 + 4 + 1 + 8] = 7
        with pytest.raises(io.FormatError, match="tag"):
            io.decode_volume(bytes(buf))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        tensors = {"a.w": rng.random((2, 3, 3, 3, 3)).astype(np.float32), "a.b": np.zeros(2, np.float32)}
        io.write_checkpoint(tmp_path / "c.nv3d", "k = v\n", tensors)
        text, out = io.read_checkpoint(tmp_path / "c.nv3d")
        assert text == "k = v\n" and list(out) == ["a.w", "a.b"]
        for k in tensors:
            assert np.array_equal(out[k], tensors[k])
        assert not (tmp_path / "c.nv3d.tmp").exists()

    def test_truncated(self):
        buf = io.encode_checkpoint("x = 1\n", {"t": np.ones((4, 4), np.float32)})
        for cut in (3, 10, 20, len(buf) - 1):
            with pytest.raises(io.FormatError):
                io.decode_checkpoint(buf[:cut])

    def test_trailing(self):
        buf = io.encode_checkpoint("", {"t": np.ones(2, np.float32)})
        with pytest.raises(io.FormatError, match="trailing"):
            io.decode_checkpoint(buf + b"!")


class TestConfig:
    def test_parse(self):
        text = "# comment\nsteps = 10\n\nlr=0.5  # inline\nname = a = b\n"
        assert io.parse_config(text) == {"steps": "10", "lr": "0.5", "name": "a = b"}

    @pytest.mark.parametrize("text,line", [("a = 1\nbroken\n", 2), ("a = 1\n = 3\n", 2), ("a = 1\nb = 2\na = 3\n", 3)])
    def test_errors_carry_line(self, text, line):
        with pytest.raises(io.ConfigError, match=f"cfg.txt:{line}:"):
            io.parse_config(text, "cfg.txt")

    def test_format_roundtrip(self):
        d = {"a": "1", "b.c": "x y"}
        assert io.parse_config(io.format_config(d)) == d
