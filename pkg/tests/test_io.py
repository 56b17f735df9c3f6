import json
import struct

import numpy as np
import pytest

from fibertrack.dwi import DwiVolume, PhantomSpec, default_table, generate_phantom
from fibertrack.errors import DataError
from fibertrack.io import (ScalarMap, TrkHeader, VolumeHeader, read_ground_truth, read_trk,
                           read_volume, write_ground_truth, write_trk, write_volume)
from fibertrack.tracking import Streamline

SIX = default_table("six")


def golden_header(dim, voxel_size, n_count):
    """TrackVis header assembled field by field from the published layout."""
    parts = [
        (0, b"TRACK\x00"),
        (6, struct.pack("<hhh", *dim)),
        (12, struct.pack("<fff", *voxel_size)),
        (24, struct.pack("<fff", 0.0, 0.0, 0.0)),
        (36, struct.pack("<h", 0)),
        (238, struct.pack("<h", 0)),
        (948, b"LAS"),
        (988, struct.pack("<i", n_count)),
        (992, struct.pack("<i", 2)),
        (996, struct.pack("<i", 1000)),
    ]
    buf = bytearray(1000)
    for off, b in parts:
        buf[off:off + len(b)] = b
    return bytes(buf)


class TestVolume:
    def test_zero_payload(self, tmp_path):
        base = write_volume(tmp_path / "z", ScalarMap(np.zeros((2, 2, 2, 1))))
        assert (tmp_path / "z.raw").stat().st_size == 32
        assert read_volume(base).data.shape == (2, 2, 2, 1)

    def test_dwi_round_trip(self, tmp_path):
        data = np.random.default_rng(0).uniform(1, 200, size=(5, 4, 3, 7)).astype(np.float32)
        vol = DwiVolume(data, (1.5, 2.0, 2.5), SIX)
        base = write_volume(tmp_path / "dwi.json", vol)
        back = read_volume(base)
        assert isinstance(back, DwiVolume)
        assert back.data.tobytes() == data.tobytes()
        assert back.voxel_size == (1.5, 2.0, 2.5)
        np.testing.assert_array_equal(back.table.bvals, SIX.bvals)
        np.testing.assert_array_equal(back.table.bvecs, SIX.bvecs)

    def test_x_fastest(self, tmp_path):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        write_volume(tmp_path / "o", ScalarMap(data))
        raw = np.frombuffer((tmp_path / "o.raw").read_bytes(), "<f4")
        assert raw[:3].tolist() == [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]]

    def test_header_document(self, tmp_path):
        write_volume(tmp_path / "h", ScalarMap(np.ones((3, 4, 5)), (1, 1, 2)))
        doc = json.loads((tmp_path / "h.json").read_text())
        assert doc == {"dims": [3, 4, 5], "voxel_size": [1.0, 1.0, 2.0], "dtype": "f32le",
                       "axis_order": "x-fastest"}

    def test_truncated(self, tmp_path):
        base = write_volume(tmp_path / "t", ScalarMap(np.ones((4, 4, 4))))
        raw = tmp_path / "t.raw"
        raw.write_bytes(raw.read_bytes()[:-10])
        with pytest.raises(DataError, match="expected 256 bytes.*found 246"):
            read_volume(base)

    @pytest.mark.parametrize("doc", [
        {"dims": [2, 2, 2], "voxel_size": [1, 1, 1], "dtype": "f64le"},
        {"dims": [2, 2, 0], "voxel_size": [1, 1, 1], "dtype": "f32le"},
        {"dims": [2, 2, 2], "dtype": "f32le"},
    ])
    def test_bad_header(self, doc):
        with pytest.raises(DataError):
            VolumeHeader.from_json(json.dumps(doc))
        with pytest.raises(DataError):
            VolumeHeader.from_json("{not json")

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            read_volume(tmp_path / "nothing")

    def test_ground_truth(self, tmp_path):
        _, truth = generate_phantom(PhantomSpec("quarter-arc", 0.0), (16, 16, 16), SIX)
        write_ground_truth(str(tmp_path / "gt"), truth, (1, 1, 1))
        dirs, mask = read_ground_truth(str(tmp_path / "gt"))
        np.testing.assert_array_equal(mask, truth.mask)
        np.testing.assert_array_equal(dirs, truth.directions.astype(np.float32))


class TestTrk:
    def test_empty(self, tmp_path):
        write_trk(tmp_path / "e.trk", [], (32, 32, 32), (1.5, 1.5, 1.5))
        buf = (tmp_path / "e.trk").read_bytes()
        assert len(buf) == 1000
        assert buf == golden_header((32, 32, 32), (1.5, 1.5, 1.5), 0)

    def test_one_streamline(self, tmp_path):
        write_trk(tmp_path / "o.trk", [np.array([[0.5, 1, 2], [3, 4, 5.25]])], (8, 9, 10), (1, 2, 3))
        buf = (tmp_path / "o.trk").read_bytes()
        assert len(buf) == 1028
        assert buf[:1000] == golden_header((8, 9, 10), (1.0, 2.0, 3.0), 1)
        assert buf[1000:].hex() == (
            "02000000" "0000003f" "0000803f" "00000040"
            "00004040" "00008040" "0000a840")

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        sls = [Streamline(rng.integers(0, 20, size=(rng.integers(1, 40), 3)), (1.5, 1.5, 1.5))
               for _ in range(25)]
        write_trk(tmp_path / "r.trk", sls + [None], (20, 20, 20), (1.5, 1.5, 1.5))
        hdr, pts = read_trk(tmp_path / "r.trk")
        assert hdr.n_count == 25 and hdr.dim == (20, 20, 20)
        for s, p in zip(sls, pts):
            assert p.tobytes() == s.points.astype("<f4").tobytes()
        assert hdr.pack() == (tmp_path / "r.trk").read_bytes()[:1000]

    def test_header_unpack(self):
        hdr = TrkHeader((3, 4, 5), (1.0, 1.5, 2.0), 7)
        assert TrkHeader.unpack(hdr.pack()) == hdr

    def test_count_mismatch(self, tmp_path):
        write_trk(tmp_path / "c.trk", [np.zeros((2, 3))], (4, 4, 4), (1, 1, 1))
        buf = bytearray((tmp_path / "c.trk").read_bytes())
        buf[988] = 5
        (tmp_path / "c.trk").write_bytes(bytes(buf))
        with pytest.raises(DataError, match="n_count"):
            read_trk(tmp_path / "c.trk")

    def test_truncated(self, tmp_path):
        write_trk(tmp_path / "t.trk", [np.zeros((2, 3))], (4, 4, 4), (1, 1, 1))
        (tmp_path / "t.trk").write_bytes((tmp_path / "t.trk").read_bytes()[:-4])
        with pytest.raises(DataError):
            read_trk(tmp_path / "t.trk")

    def test_not_trk(self, tmp_path):
        (tmp_path / "x.trk").write_bytes(b"\0" * 1000)
        with pytest.raises(DataError):
            read_trk(tmp_path / "x.trk")
