"""Round-trip and validation tests for trajectory serialization."""

import os
import struct

import numpy as np
import pytest

from mslds.dataio import (
    Dataset,
    atomic_write_bytes,
    load_dataset,
    read_trajectory,
    read_trajectory_bin,
    read_trajectory_csv,
    write_states_csv,
    write_trajectory,
    write_trajectory_bin,
    write_trajectory_csv,
)
from mslds.errors import DataError
from mslds.model import Trajectory


@pytest.fixture
def frames(rng):
    # Adversarial values: %.17g must reproduce every float64 bit pattern.
    base = rng.normal(size=(17, 3))
    base[0, 0] = 1.0 / 3.0
    base[1, 1] = 1e-308
    base[2, 2] = -1.2345678901234567e17
    return base


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------


class TestCsv:
    def test_round_trip_bit_exact(self, tmp_path, frames):
        path = tmp_path / "a.csv"
        write_trajectory_csv(path, frames)
        back = read_trajectory_csv(path)
        np.testing.assert_array_equal(back.data, frames)

    def test_layout(self, tmp_path):
        path = tmp_path / "a.csv"
        write_trajectory_csv(path, np.array([[1.5, 2.0], [3.0, -4.25]]))
        lines = path.read_text().splitlines()
        assert lines[0] == "t,x0,x1"
        assert lines[1] == "0,1.5,2"
        assert lines[2] == "1,3,-4.25"

    def test_accepts_trajectory_objects(self, tmp_path, frames):
        path = tmp_path / "a.csv"
        write_trajectory_csv(path, Trajectory(data=frames))
        np.testing.assert_array_equal(read_trajectory_csv(path).data, frames)

    def test_rejects_bad_header(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("time,x0\n0,1.0\n1,2.0\n")
        with pytest.raises(DataError, match="header"):
            read_trajectory_csv(path)
        path.write_text("t,x1,x0\n0,1.0,2.0\n1,2.0,3.0\n")
        with pytest.raises(DataError, match="header"):
            read_trajectory_csv(path)

    def test_rejects_non_increasing_time(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,x0\n0,1.0\n0,2.0\n")
        with pytest.raises(DataError, match="increasing"):
            read_trajectory_csv(path)
        path.write_text("t,x0\n1,1.0\n0,2.0\n")
        with pytest.raises(DataError, match="increasing"):
            read_trajectory_csv(path)

    def test_accepts_non_contiguous_increasing_time(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,x0\n0,1.0\n2,2.0\n10,3.0\n")
        np.testing.assert_array_equal(
            read_trajectory_csv(path).data, [[1.0], [2.0], [3.0]]
        )

    def test_rejects_ragged_rows(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,x0,x1\n0,1.0,2.0\n1,3.0\n")
        with pytest.raises(DataError, match="columns"):
            read_trajectory_csv(path)

    def test_rejects_non_numeric_and_empty(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,x0\n0,abc\n1,2.0\n")
        with pytest.raises(DataError):
            read_trajectory_csv(path)
        path.write_text("")
        with pytest.raises(DataError, match="empty"):
            read_trajectory_csv(path)

    def test_rejects_single_frame(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("t,x0\n0,1.0\n")
        with pytest.raises(DataError):
            read_trajectory_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_trajectory_csv(tmp_path / "absent.csv")


# ---------------------------------------------------------------------------
# Binary format
# ---------------------------------------------------------------------------


class TestBinary:
    def test_round_trip_bit_exact(self, tmp_path, frames):
        path = tmp_path / "a.msld"
        write_trajectory_bin(path, frames)
        back = read_trajectory_bin(path)
        np.testing.assert_array_equal(back.data, frames)

    def test_on_disk_layout(self, tmp_path):
        path = tmp_path / "a.msld"
        data = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        write_trajectory_bin(path, data)
        raw = path.read_bytes()
        magic, version, t, d = struct.unpack_from("<4sHII", raw)
        assert (magic, version, t, d) == (b"MSLD", 1, 3, 2)
        assert raw[struct.calcsize("<4sHII"):] == data.astype("<f8").tobytes()

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "a.msld"
        path.write_bytes(struct.pack("<4sHII", b"NOPE", 1, 2, 1) + b"\0" * 16)
        with pytest.raises(DataError, match="magic"):
            read_trajectory_bin(path)

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "a.msld"
        path.write_bytes(struct.pack("<4sHII", b"MSLD", 9, 2, 1) + b"\0" * 16)
        with pytest.raises(DataError, match="version"):
            read_trajectory_bin(path)

    def test_rejects_size_mismatch(self, tmp_path):
        path = tmp_path / "a.msld"
        path.write_bytes(struct.pack("<4sHII", b"MSLD", 1, 3, 2) + b"\0" * 16)
        with pytest.raises(DataError, match="size"):
            read_trajectory_bin(path)

    def test_rejects_truncated_header(self, tmp_path):
        path = tmp_path / "a.msld"
        path.write_bytes(b"MS")
        with pytest.raises(DataError, match="truncated"):
            read_trajectory_bin(path)

    def test_rejects_non_finite_payload(self, tmp_path):
        path = tmp_path / "a.msld"
        payload = np.array([[1.0], [np.nan]])
        header = struct.pack("<4sHII", b"MSLD", 1, 2, 1)
        path.write_bytes(header + payload.astype("<f8").tobytes())
        with pytest.raises(DataError):
            read_trajectory_bin(path)


class TestSuffixDispatch:
    def test_msld_is_binary_csv_is_text(self, tmp_path, frames):
        bin_path = tmp_path / "a.msld"
        csv_path = tmp_path / "a.csv"
        write_trajectory(bin_path, frames)
        write_trajectory(csv_path, frames)
        assert bin_path.read_bytes()[:4] == b"MSLD"
        assert csv_path.read_text().startswith("t,x0")
        np.testing.assert_array_equal(read_trajectory(bin_path).data, frames)
        np.testing.assert_array_equal(read_trajectory(csv_path).data, frames)


# ---------------------------------------------------------------------------
# Companion state files and atomic writes
# ---------------------------------------------------------------------------


def test_states_csv_layout(tmp_path):
    path = tmp_path / "s.csv"
    write_states_csv(path, np.array([0, 1, 1, 0]))
    assert path.read_text() == "t,state\n0,0\n1,1\n2,1\n3,0\n"


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    path = tmp_path / "out.bin"
    path.write_bytes(b"old")
    atomic_write_bytes(path, b"new-payload")
    assert path.read_bytes() == b"new-payload"
    assert os.listdir(tmp_path) == ["out.bin"]


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------


class TestLoadDataset:
    def test_single_file(self, tmp_path, frames):
        path = tmp_path / "a.csv"
        write_trajectory_csv(path, frames)
        ds = load_dataset(path)
        assert len(ds.trajectories) == 1
        np.testing.assert_array_equal(ds.trajectories[0].data, frames)
        np.testing.assert_array_equal(ds.weights, [1.0])

    def test_directory_sorted_by_name(self, tmp_path, rng):
        chunks = {name: rng.normal(size=(5, 2)) for name in ("b.csv", "a.msld", "c.csv")}
        for name, data in chunks.items():
            write_trajectory(tmp_path / name, data)
        (tmp_path / "ignored.txt").write_text("not a trajectory")
        ds = load_dataset(tmp_path)
        assert len(ds.trajectories) == 3
        for got, name in zip(ds.trajectories, ("a.msld", "b.csv", "c.csv")):
            np.testing.assert_array_equal(got.data, chunks[name])

    def test_manifest_controls_order_and_weights(self, tmp_path, rng):
        chunks = {name: rng.normal(size=(6, 2)) for name in ("a.csv", "b.csv", "c.csv")}
        for name, data in chunks.items():
            write_trajectory(tmp_path / name, data)
        (tmp_path / "manifest.json").write_text(
            '{"files": [{"path": "c.csv", "weight": 2.0}, "a.csv"]}'
        )
        ds = load_dataset(tmp_path)
        assert len(ds.trajectories) == 2
        np.testing.assert_array_equal(ds.trajectories[0].data, chunks["c.csv"])
        np.testing.assert_array_equal(ds.trajectories[1].data, chunks["a.csv"])
        np.testing.assert_array_equal(ds.weights, [2.0, 1.0])

    def test_manifest_errors(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(DataError):
            load_dataset(tmp_path)
        (tmp_path / "manifest.json").write_text('{"files": []}')
        with pytest.raises(DataError, match="files"):
            load_dataset(tmp_path)
        (tmp_path / "manifest.json").write_text('{"files": [{"weight": 1.0}]}')
        with pytest.raises(DataError, match="path"):
            load_dataset(tmp_path)

    def test_inconsistent_dimensions(self, tmp_path, rng):
        write_trajectory(tmp_path / "a.csv", rng.normal(size=(5, 2)))
        write_trajectory(tmp_path / "b.csv", rng.normal(size=(5, 3)))
        with pytest.raises(DataError, match="dimensions"):
            load_dataset(tmp_path)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError, match="no trajectory"):
            load_dataset(tmp_path)

    def test_missing_path(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nowhere")


class TestDatasetValidation:
    def test_weight_count_mismatch(self, rng):
        traj = Trajectory(data=rng.normal(size=(4, 1)))
        with pytest.raises(DataError, match="one weight"):
            Dataset(trajectories=(traj,), weights=np.array([1.0, 2.0]))

    def test_negative_weight(self, rng):
        traj = Trajectory(data=rng.normal(size=(4, 1)))
        with pytest.raises(DataError, match="non-negative"):
            Dataset(trajectories=(traj,), weights=np.array([-1.0]))

    def test_default_weights(self, rng):
        traj = Trajectory(data=rng.normal(size=(4, 1)))
        ds = Dataset(trajectories=(traj, traj))
        np.testing.assert_array_equal(ds.weights, [1.0, 1.0])
