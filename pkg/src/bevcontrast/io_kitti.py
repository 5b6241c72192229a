"""KITTI-style scan / pose / calibration I/O and pair selection.

Scan files are packed little-endian float32 records ``(x, y, z, intensity)``.
Pose files hold one row-major 3x4 world-from-sensor matrix per line; an
optional ``calib.txt`` ``Tr:`` line (camera-from-lidar) converts camera-frame
poses to the Lidar frame.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError, ParseError
from .geometry import RigidTransform, relative_transform

log = logging.getLogger(__name__)

RECORD_BYTES = 16
_SCAN_DTYPE = np.dtype("<f4")
# slack on gap predicates; decimal timestamps (0.1 * k) do not subtract exactly
GAP_SLACK = 1e-9


@dataclass
class PointCloud:
    """One scan: ``points`` is an ``(n, 4)`` float64 array of x, y, z, intensity."""

    points: np.ndarray
    scan_id: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise DataError(f"points must have shape (n, 4), got {pts.shape}")
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise DataError(f"non-finite value at point index {int(np.argmax(bad))}")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def xy(self):
        return self.points[:, :2]

    @property
    def intensity(self):
        return self.points[:, 3]


@dataclass
class PoseTrack:
    poses: list
    timestamps: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(self.poses) != len(self.timestamps):
            raise DataError(f"{len(self.poses)} poses but {len(self.timestamps)} timestamps")
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")
        for k, pose in enumerate(self.poses):
            try:
                pose.check()
            except DataError as exc:
                raise DataError(f"pose {k}: {exc}") from None

    def __len__(self):
        return len(self.poses)

    def translations(self):
        return np.array([p.t for p in self.poses]).reshape(-1, 3)


@dataclass
class ScanPair:
    """Scan ``index_b`` registered onto the earlier scan ``index_a`` by ``rel``."""

    index_a: int
    index_b: int
    rel: RigidTransform = field(repr=False)
    gap: float = 0.0


def load_scan(path, scan_id=0, timestamp=0.0) -> PointCloud:
    raw = Path(path).read_bytes()
    tail = len(raw) % RECORD_BYTES
    if tail:
        raise FormatError(f"{path}: truncated record, {tail} stray bytes", offset=len(raw) - tail)
    vals = np.frombuffer(raw, dtype=_SCAN_DTYPE).reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(vals).all(axis=1)
    if bad.any():
        raise DataError(f"{path}: non-finite value at point index {int(np.argmax(bad))}")
    return PointCloud(vals, scan_id=scan_id, timestamp=timestamp)


def save_scan(cloud: PointCloud, path):
    """Write ``cloud`` as packed float32 records (lossy for float64 input)."""
    Path(path).write_bytes(np.ascontiguousarray(cloud.points, dtype=_SCAN_DTYPE).tobytes())


def _parse_floats(text, n, where, lineno):
    parts = text.split()
    if len(parts) != n:
        raise ParseError(f"{where}: expected {n} numbers, found {len(parts)}", line=lineno)
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}", line=lineno) from None


def _homogeneous(row12):
    T = np.eye(4)
    T[:3, :] = row12.reshape(3, 4)
    return T


def load_calib(path) -> np.ndarray:
    """Return the 4x4 camera-from-lidar matrix from the ``Tr:`` line."""
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        key, _, rest = line.partition(":")
        if key.strip() == "Tr":
            return _homogeneous(_parse_floats(rest, 12, path, lineno))
    raise ParseError(f"{path}: no 'Tr:' line")


def load_times(path) -> np.ndarray:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            out.append(_parse_floats(line, 1, path, lineno)[0])
    return np.array(out)


def load_poses(pose_path, calib_path=None, times_path=None, rate=None) -> PoseTrack:
    """Read a pose file; convert camera-frame poses to the Lidar frame when a calib is given.

    Timestamps come from ``times_path`` or are synthesised as ``i / rate``.
    """
    mats = []
    for lineno, line in enumerate(Path(pose_path).read_text().splitlines(), start=1):
        if line.strip():
            mats.append(_homogeneous(_parse_floats(line, 12, pose_path, lineno)))
    if calib_path is not None and os.path.exists(calib_path):
        Tr = load_calib(calib_path)
        Tr_inv = np.linalg.inv(Tr)
        mats = [Tr_inv @ T @ Tr for T in mats]
    else:
        log.info("no calibration file for %s; poses taken as sensor-frame", pose_path)
    if times_path is not None and os.path.exists(times_path):
        times = load_times(times_path)
    else:
        if rate is None or rate <= 0:
            raise ParameterError("no times file: a positive scan rate is required")
        times = np.arange(len(mats)) / float(rate)
    poses = []
    for k, T in enumerate(mats):
        pose = RigidTransform.from_matrix(T)
        try:
            pose.check()
        except DataError as exc:
            raise DataError(f"{pose_path}: pose on line {k + 1}: {exc}") from None
        poses.append(pose)
    return PoseTrack(poses, times)


def format_pose(pose: RigidTransform) -> str:
    return " ".join(f"{v:.12e}" for v in pose.matrix()[:3, :].reshape(-1))


def save_poses(track: PoseTrack, pose_path, times_path=None):
    Path(pose_path).write_text("".join(format_pose(p) + "\n" for p in track.poses))
    if times_path is not None:
        Path(times_path).write_text("".join(f"{t:.6f}\n" for t in track.timestamps))


def select_pairs(track: PoseTrack, *, by_time=None, by_dist=None) -> list[ScanPair]:
    """Pair every scan with the first later scan at least ``by_time`` s or ``by_dist`` m away.

    Scans without a qualifying partner produce no pair.
    """
    if (by_time is None) == (by_dist is None):
        raise ParameterError("give exactly one of by_time / by_dist")
    thresh = by_time if by_time is not None else by_dist
    if not thresh > 0:
        raise ParameterError(f"gap threshold must be positive, got {thresh}")
    n = len(track)
    if by_time is not None:
        ts = track.timestamps

        def gap(a, b):
            return float(ts[b] - ts[a])
    else:
        tr = track.translations()

        def gap(a, b):
            return float(np.linalg.norm(tr[b] - tr[a]))

    pairs = []
    for a in range(n):
        for b in range(a + 1, n):
            g = gap(a, b)
            if g >= thresh - GAP_SLACK:
                pairs.append(ScanPair(a, b, relative_transform(track.poses[a], track.poses[b]), g))
                break
    return pairs


@dataclass
class Sequence:
    """A loaded sequence directory: scans, poses and (optional) per-point labels."""

    name: str
    scans: list
    track: PoseTrack
    labels: list | None = None


def scan_paths(seq_dir):
    return sorted(Path(seq_dir, "velodyne").glob("*.bin"))


def load_sequence(seq_dir, rate=None) -> Sequence:
    """Load ``velodyne/*.bin``, ``poses.txt`` and optional ``times.txt``/``calib.txt``/``labels``."""
    seq_dir = Path(seq_dir)
    pose_path = seq_dir / "poses.txt"
    if not pose_path.exists():
        # KITTI odometry keeps poses in dataset/poses/<seq>.txt
        pose_path = seq_dir.parent.parent / "poses" / f"{seq_dir.name}.txt"
    track = load_poses(pose_path, seq_dir / "calib.txt", seq_dir / "times.txt", rate=rate)
    paths = scan_paths(seq_dir)
    if len(paths) != len(track):
        raise DataError(f"{seq_dir}: {len(paths)} scans but {len(track)} poses")
    scans = [load_scan(p, scan_id=k, timestamp=track.timestamps[k]) for k, p in enumerate(paths)]
    labels = None
    label_dir = seq_dir / "labels"
    if label_dir.is_dir():
        labels = []
        for k, p in enumerate(paths):
            lab = np.fromfile(label_dir / (p.stem + ".label"), dtype="<u4") & 0xFFFF
            if lab.shape[0] != len(scans[k]):
                raise DataError(f"{p.stem}: {lab.shape[0]} labels for {len(scans[k])} points")
            labels.append(lab.astype(np.int64))
    return Sequence(seq_dir.name, scans, track, labels)


def list_sequences(root):
    """Sequence directories under ``root`` (``root/sequences/*`` or ``root`` itself)."""
    root = Path(root)
    base = root / "sequences" if (root / "sequences").is_dir() else root
    if (base / "velodyne").is_dir():
        return [base]
    return sorted(d for d in base.iterdir() if (d / "velodyne").is_dir())


def save_sequence(seq_dir, scans, track: PoseTrack, labels=None):
    seq_dir = Path(seq_dir)
    (seq_dir / "velodyne").mkdir(parents=True, exist_ok=True)
    for k, cloud in enumerate(scans):
        save_scan(cloud, seq_dir / "velodyne" / f"{k:06d}.bin")
    save_poses(track, seq_dir / "poses.txt", seq_dir / "times.txt")
    if labels is not None:
        (seq_dir / "labels").mkdir(exist_ok=True)
        for k, lab in enumerate(labels):
            np.asarray(lab, dtype="<u4").tofile(seq_dir / "labels" / f"{k:06d}.label")
