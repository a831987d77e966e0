import numpy as np
import pytest

from latentpoints.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from latentpoints.io_ply import PlyError, read_ply, write_ply


class TestPly:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(50, 3))
        nrm = rng.normal(size=(50, 3))
        path = tmp_path / "c.ply"
        write_ply(path, pts, nrm)
        back_pts, back_nrm = read_ply(path)
        assert np.abs(back_pts - pts).max() < 1e-6
        assert np.abs(back_nrm - nrm).max() < 1e-6

    def test_round_trip_without_normals(self, tmp_path):
        pts = np.array([[0.125, -3.5, 2.0]])
        path = tmp_path / "c.ply"
        write_ply(path, pts)
        back, nrm = read_ply(path)
        np.testing.assert_array_equal(back, pts)  # exactly representable values
        assert nrm is None

    def test_empty_cloud_accepted(self, tmp_path):
        path = tmp_path / "e.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 0\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        pts, nrm = read_ply(path)
        assert pts.shape == (0, 3)

    def test_binary_rejected(self, tmp_path):
        path = tmp_path / "b.ply"
        path.write_text(
            "ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        with pytest.raises(PlyError, match="ascii required"):
            read_ply(path)

    def test_count_mismatch_has_line_number(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 2\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
            "0 0 0\n"
        )
        with pytest.raises(PlyError, match="expected 2 vertex rows"):
            read_ply(path)

    def test_malformed_row_line_number(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text(
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
            "0 zero 0\n"
        )
        with pytest.raises(PlyError, match=":8:"):
            read_ply(path)

    def test_writer_output_parses_by_grammar(self, tmp_path):
        path = tmp_path / "g.ply"
        write_ply(path, np.zeros((2, 3)))
        lines = path.read_text().splitlines()
        assert lines[0] == "ply"
        assert lines[1] == "format ascii 1.0"
        assert lines[2] == "element vertex 2"
        assert "end_header" in lines


class TestCheckpoint:
    def test_byte_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"b.weight": rng.normal(size=(4, 3)), "a.bias": rng.normal(size=5)}
        meta = {"seed": 7, "epoch": 3, "config": {"lr": 1e-3}}
        p1, p2 = tmp_path / "x1.ckpt", tmp_path / "x2.ckpt"
        save_checkpoint(p1, arrays, meta)
        loaded, meta2 = load_checkpoint(p1)
        save_checkpoint(p2, loaded, meta2)
        assert p1.read_bytes() == p2.read_bytes()
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])
        assert meta2 == meta

    def test_tampered_payload_names_byte_counts(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint(path, {"w": np.ones((2, 2))}, {})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="expected 32 bytes, found 24"):
            load_checkpoint(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "w.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(path)

    def test_version_check(self, tmp_path):
        import json
        import struct

        header = json.dumps({"version": 99, "manifest": [], "payload_bytes": 0, "meta": {}}).encode()
        path = tmp_path / "v.ckpt"
        path.write_bytes(b"LPCHKPT\n" + struct.pack("<I", len(header)) + header)
        with pytest.raises(CheckpointError, match="version mismatch"):
            load_checkpoint(path)

    def test_load_into_wrong_graph_names_tensor(self, tmp_path):
        from latentpoints.nn import Linear

        rng = np.random.default_rng(2)
        lin = Linear(3, 4, rng)
        path = tmp_path / "g.ckpt"
        save_checkpoint(path, {"weight": lin.weight.values}, {})
        arrays, _ = load_checkpoint(path)
        with pytest.raises(KeyError, match="bias"):
            lin.load_state_arrays(arrays)

    def test_shape_mismatch_names_tensor(self):
        from latentpoints.nn import Linear

        rng = np.random.default_rng(3)
        lin = Linear(3, 4, rng)
        bad = {"weight": np.zeros((2, 2)), "bias": np.zeros(4)}
        with pytest.raises(ValueError, match="weight"):
            lin.load_state_arrays(bad)
