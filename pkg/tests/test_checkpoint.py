import struct

import numpy as np
import pytest

from owfs.checkpoint import (FORMAT_VERSION, MAGIC, CheckpointError,
                             inspect_checkpoint, load_checkpoint,
                             save_checkpoint)


def sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "model/blocks.00.conv.weight": rng.normal(size=(4, 1, 3, 3)),
        "model/blocks.00.bn.gamma": np.ones(4),
        "opt/adam.t": np.asarray(17.0),
        "model/norm.mean": np.array([0.5]),
    }


class TestRoundTrip:
    def test_arrays_and_config_survive(self, tmp_path):
        path = tmp_path / "m.owfs"
        arrays = sample_arrays()
        save_checkpoint(path, arrays, "head = one_way_proto\n")
        loaded, cfg = load_checkpoint(path)
        assert cfg == "head = one_way_proto\n"
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])
            assert loaded[k].shape == arrays[k].shape

    def test_zero_d_array(self, tmp_path):
        path = tmp_path / "m.owfs"
        save_checkpoint(path, {"t": np.asarray(3.5)})
        loaded, _ = load_checkpoint(path)
        assert loaded["t"].shape == ()
        assert loaded["t"] == 3.5

    def test_bytes_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        save_checkpoint(a, sample_arrays(), "cfg")
        save_checkpoint(b, sample_arrays(), "cfg")
        assert a.read_bytes() == b.read_bytes()

    def test_header_layout(self, tmp_path):
        # Magic, then little-endian u32 version: pinned wire format.
        path = tmp_path / "m.owfs"
        save_checkpoint(path, {}, "")
        blob = path.read_bytes()
        assert blob[:4] == MAGIC == b"OWFS"
        assert struct.unpack("<I", blob[4:8])[0] == FORMAT_VERSION


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.owfs"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.owfs"
        path.write_bytes(MAGIC + struct.pack("<I", 99) + struct.pack("<I", 0))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.owfs"
        save_checkpoint(path, sample_arrays(), "cfg")
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)


class TestInspect:
    def test_entries_sorted_with_shapes(self, tmp_path):
        path = tmp_path / "m.owfs"
        save_checkpoint(path, sample_arrays(), "head = x\n")
        entries, cfg = inspect_checkpoint(path)
        names = [n for n, _ in entries]
        assert names == sorted(names)
        shapes = dict(entries)
        assert shapes["model/blocks.00.conv.weight"] == (4, 1, 3, 3)
        assert cfg == "head = x\n"
