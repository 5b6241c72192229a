import struct

import numpy as np
import pytest

from bevcontrast.errors import DataError, FormatError, ParameterError, ParseError
from bevcontrast.geometry import RigidTransform, rotation_z
from bevcontrast.io_kitti import (PoseTrack, load_poses, load_scan, load_sequence, save_scan, save_sequence,
                                  select_pairs, PointCloud)


def write_records(path, records):
    # independent writer: struct, not numpy
    with open(path, "wb") as fh:
        for rec in records:
            fh.write(struct.pack("<4f", *rec))


def pose_line(T):
    return " ".join(f"{v:.17g}" for v in np.asarray(T)[:3, :].ravel())


def test_load_single_point(tmp_path):
    write_records(tmp_path / "a.bin", [(1.0, 2.0, 3.0, 0.5)])
    cloud = load_scan(tmp_path / "a.bin")
    assert cloud.points.tolist() == [[1.0, 2.0, 3.0, 0.5]]
    assert cloud.points.dtype == np.float64


def test_load_empty(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    assert len(load_scan(tmp_path / "e.bin")) == 0


def test_load_two_points_in_order(tmp_path):
    recs = [(-4.25, 0.125, 1.5, 0.75), (10.5, -3.0, -1.75, 0.0625)]
    write_records(tmp_path / "b.bin", recs)
    assert load_scan(tmp_path / "b.bin").points.tolist() == [list(r) for r in recs]


def test_truncated_file_reports_offset(tmp_path):
    write_records(tmp_path / "t.bin", [(1, 2, 3, 0.5), (4, 5, 6, 0.5)])
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-5])
    with pytest.raises(FormatError) as exc:
        load_scan(tmp_path / "t.bin")
    assert exc.value.offset == 16


def test_non_finite_reports_point_index(tmp_path):
    write_records(tmp_path / "n.bin", [(1, 2, 3, 0.5), (0, float("nan"), 0, 0), (1, 1, 1, 1)])
    with pytest.raises(DataError, match="point index 1"):
        load_scan(tmp_path / "n.bin")


def test_scan_bytes_round_trip(tmp_path, rng):
    raw = rng.normal(0, 20, (257, 4)).astype("<f4").tobytes()
    (tmp_path / "r.bin").write_bytes(raw)
    save_scan(load_scan(tmp_path / "r.bin"), tmp_path / "r2.bin")
    assert (tmp_path / "r2.bin").read_bytes() == raw


def test_identity_pose_no_calib(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    track = load_poses(tmp_path / "p.txt", rate=10.0)
    assert np.array_equal(track.poses[0].matrix(), np.eye(4))
    assert track.timestamps.tolist() == [0.0]


def test_identity_conjugation(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    (tmp_path / "calib.txt").write_text("P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    track = load_poses(tmp_path / "p.txt", tmp_path / "calib.txt", rate=10.0)
    assert np.allclose(track.poses[0].matrix(), np.eye(4), atol=0)


def test_calib_conjugation_translation(tmp_path):
    T = np.eye(4)
    T[0, 3] = 1.0
    Tr = np.eye(4)
    Tr[:3, :3] = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    (tmp_path / "p.txt").write_text(pose_line(T) + "\n")
    (tmp_path / "calib.txt").write_text("Tr: " + pose_line(Tr) + "\n")
    pose = load_poses(tmp_path / "p.txt", tmp_path / "calib.txt", rate=10.0).poses[0]
    # oracle: explicit 4x4 product with the transpose as inverse of a rotation
    Tr_inv = np.eye(4)
    Tr_inv[:3, :3] = Tr[:3, :3].T
    expected = Tr_inv @ T @ Tr
    assert np.allclose(pose.matrix(), expected, atol=1e-15)
    assert np.allclose(pose.t, [0.0, -1.0, 0.0], atol=1e-15)


def test_malformed_pose_line(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0\n")
    with pytest.raises(ParseError) as exc:
        load_poses(tmp_path / "p.txt", rate=10.0)
    assert exc.value.line == 2


def test_non_orthonormal_pose(tmp_path):
    (tmp_path / "p.txt").write_text("1.01 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(DataError):
        load_poses(tmp_path / "p.txt", rate=10.0)


def test_times_file_and_missing_rate(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n" * 3)
    (tmp_path / "times.txt").write_text("0.0\n0.5\n1.25\n")
    track = load_poses(tmp_path / "p.txt", times_path=tmp_path / "times.txt")
    assert track.timestamps.tolist() == [0.0, 0.5, 1.25]
    with pytest.raises(ParameterError):
        load_poses(tmp_path / "p.txt")


def straight_track(n, step=1.0, rate=10.0):
    poses = [RigidTransform.translation(k * step, 0.0, 0.0) for k in range(n)]
    return PoseTrack(poses, np.arange(n) / rate)


def test_pairs_by_time_10hz():
    track = PoseTrack([RigidTransform.identity()] * 11, np.arange(11) / 10.0)
    pairs = select_pairs(track, by_time=0.7)
    assert [(p.index_a, p.index_b) for p in pairs] == [(0, 7), (1, 8), (2, 9), (3, 10)]


def test_pairs_single_scan():
    assert select_pairs(straight_track(1), by_time=0.7) == []


def test_pairs_by_distance_matches_brute_force():
    track = straight_track(20)
    pairs = select_pairs(track, by_dist=5.0)
    # brute force over all partners
    expected = []
    for a in range(20):
        cands = [b for b in range(a + 1, 20) if abs(b - a) * 1.0 >= 5.0]
        if cands:
            expected.append((a, min(cands)))
    assert [(p.index_a, p.index_b) for p in pairs] == expected
    assert all(p.index_b == p.index_a + 5 for p in pairs)


def test_pairs_reject_bad_gap():
    with pytest.raises(ParameterError):
        select_pairs(straight_track(3), by_time=0.0)
    with pytest.raises(ParameterError):
        select_pairs(straight_track(3), by_dist=-1.0)


def test_pair_predicates_and_rel(rng):
    n = 40
    ts = np.cumsum(rng.uniform(0.05, 0.2, n))
    poses = [RigidTransform(rotation_z(rng.uniform(-3, 3)), rng.normal(0, 5, 3)) for _ in range(n)]
    track = PoseTrack(poses, ts)
    for mode in ({"by_time": 0.6}, {"by_dist": 4.0}):
        pairs = select_pairs(track, **mode)
        assert [p.index_a for p in pairs] == sorted(p.index_a for p in pairs)
        for p in pairs:
            if "by_time" in mode:
                gap = lambda b: ts[b] - ts[p.index_a]  # noqa: E731
            else:
                gap = lambda b: np.linalg.norm(poses[b].t - poses[p.index_a].t)  # noqa: E731
            thresh = next(iter(mode.values()))
            assert gap(p.index_b) >= thresh
            assert all(gap(b) < thresh for b in range(p.index_a + 1, p.index_b))
            expected = poses[p.index_a].inverse().compose(poses[p.index_b])
            assert np.allclose(p.rel.matrix(), expected.matrix(), atol=1e-12)
            assert p.index_a < p.index_b


def test_sequence_round_trip(tmp_path, rng):
    clouds = [PointCloud(rng.normal(0, 5, (50, 4)).astype(np.float32)) for _ in range(3)]
    track = PoseTrack([RigidTransform(rotation_z(0.1 * k), (k, 0, 0)) for k in range(3)], [0.0, 0.1, 0.2])
    labels = [rng.integers(0, 4, 50) for _ in range(3)]
    save_sequence(tmp_path / "00", clouds, track, labels)
    seq = load_sequence(tmp_path / "00")
    for a, b in zip(clouds, seq.scans):
        assert np.array_equal(a.points, b.points)
    for a, b in zip(labels, seq.labels):
        assert np.array_equal(a, b)
    for a, b in zip(track.poses, seq.track.poses):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)
