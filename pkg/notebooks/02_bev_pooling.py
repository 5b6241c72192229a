"""
Pooling per-point features onto a bird's-eye grid
=================================================
"""
import numpy as np

from bevcontrast import synthbench as sb
from bevcontrast.bev import bev_pool, cell_of
from bevcontrast.encoder import features, init_params

# a 512 x 512 grid of 20 cm cells spans +-51.2 m around the sensor
print(cell_of(51.19, 0.0, 0.2, 512), cell_of(51.2, 0.0, 0.2, 512))

scene = sb.generate_scene(1)
scan = sb.render_scan(scene, 0, n_points=4096)
params = init_params(0)
f = features(scan.cloud, params)
print("per-point features:", f.shape)

grid = bev_pool(f, scan.cloud, b=0.5, M=64)
print("occupied cells:", int((grid.counts > 0).sum()), "of", 64 * 64)
print("points per occupied cell:", round(grid.counts[grid.counts > 0].mean(), 2))
print("dropped outside the grid:", grid.dropped)

# empty cells hold null features
print(np.abs(grid.array()[grid.counts == 0]).max())

# the pooled map does not depend on point order
perm = np.random.default_rng(0).permutation(len(f))
again = bev_pool(f[perm], type(scan.cloud)(scan.cloud.points[perm]), b=0.5, M=64)
print(again.features.data.tobytes() == grid.features.data.tobytes())
