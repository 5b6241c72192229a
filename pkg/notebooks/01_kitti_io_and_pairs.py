"""
Reading a KITTI-layout sequence and picking scan pairs
======================================================

A synthetic sequence is written to disk in the odometry layout, read back,
and paired by time gap and by travelled distance.
"""
import tempfile
from pathlib import Path

import numpy as np

from bevcontrast import synthbench as sb
from bevcontrast.io_kitti import load_sequence, select_pairs

root = Path(tempfile.mkdtemp())
seq_dir, = sb.export_dataset(root, seed=0, traj_len=15, n_points=2000)
print(sorted(p.name for p in seq_dir.iterdir()))

seq = load_sequence(seq_dir, rate=10.0)
print(len(seq.scans), "scans,", len(seq.scans[0]), "points each")
print("first timestamps:", seq.track.timestamps[:4])

# 0.7 s at 10 Hz is seven scans apart
for p in select_pairs(seq.track, by_time=0.7)[:3]:
    print(p.index_a, p.index_b, round(p.gap, 3))

# the ego moves about 1 m per scan on a curving path, so 5 m of straight-line
# displacement takes five or six scans
pairs = select_pairs(seq.track, by_dist=5.0)
print([(p.index_a, p.index_b) for p in pairs[:4]])

# the relative pose maps points of scan b into the frame of scan a
rel = pairs[0].rel
print(np.round(rel.matrix(), 3))
