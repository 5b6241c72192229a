"""Per-point MLP encoder ``(x, y, z, intensity) -> R^D`` and its checkpoint format.

The encoder has no neighbourhood context; every output row depends on its own
input point only (unless ``center_input`` subtracts the scan centroid).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import EmptyInputError, FormatError, ShapeError

IN_DIM = 4
MAGIC = b"BEVCENC\0"
VERSION = 1
_HEADER = struct.Struct("<8sIII")  # magic, version, H, D


@dataclass
class EncoderParams:
    """Weights ``W[k]`` of shape ``(fan_in, fan_out)`` and biases ``b[k]`` for layers [4, H, H, D]."""

    weights: list
    biases: list
    center_input: bool = False

    def __post_init__(self):
        sizes = [IN_DIM] + [w.shape[1] for w in self.weights]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise ShapeError(f"layer {k}: weight {w.shape}, bias {b.shape} inconsistent")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {k}: non-finite parameters")

    @property
    def hidden(self):
        return self.weights[0].shape[1]

    @property
    def dim(self):
        return self.weights[-1].shape[1]

    def arrays(self):
        """Parameters in layer order ``[W1, b1, W2, b2, W3, b3]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays, center_input=False):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        return cls(arrays[0::2], arrays[1::2], center_input)

    def copy(self):
        return EncoderParams.from_arrays(self.arrays(), self.center_input)

    def n_params(self):
        return sum(a.size for a in self.arrays())


def layer_sizes(hidden, dim):
    return [IN_DIM, hidden, hidden, dim]


def init_params(seed, hidden=32, dim=16, center_input=False) -> EncoderParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    if hidden < 1 or dim < 1:
        raise ShapeError(f"hidden and dim must be >= 1, got {hidden}, {dim}")
    rng = np.random.default_rng(seed)
    sizes = layer_sizes(hidden, dim)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights, biases, center_input)


def encode(cloud, params: EncoderParams, tape) -> ad.Tensor:
    """Features ``(n_points, D)`` recorded on ``tape``; parameters are bound as tape leaves."""
    if len(cloud) == 0:
        raise EmptyInputError("cannot encode an empty point cloud")
    x = cloud.points
    if params.center_input:
        x = x.copy()
        x[:, :3] -= x[:, :3].mean(axis=0)
    leaves = tape.bind(params, params.arrays())
    h = ad.constant(x)
    n_layers = len(params.weights)
    for k in range(n_layers):
        h = ad.add(ad.matmul(h, leaves[2 * k]), leaves[2 * k + 1])
        if k < n_layers - 1:
            h = ad.relu(h)
    return h


def param_grads(tape, params, grads):
    """Gradients w.r.t. ``params.arrays()`` (same order), zeros where unused."""
    return [ad.grad_of(grads, t) for t in tape.bind(params, params.arrays())]


def features(cloud, params) -> np.ndarray:
    """Forward pass only, no gradient bookkeeping kept."""
    return encode(cloud, params, ad.Tape()).data


def _write_params(fh, params):
    fh.write(_HEADER.pack(MAGIC, VERSION, params.hidden, params.dim))
    for a in params.arrays():
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_params(buf, offset=0):
    if len(buf) - offset < _HEADER.size:
        raise FormatError("checkpoint header truncated", offset=offset)
    magic, version, hidden, dim = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError("bad checkpoint magic", offset=offset)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=offset + 8)
    offset += _HEADER.size
    sizes = layer_sizes(hidden, dim)
    shapes = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    arrays = []
    for shape in shapes:
        nbytes = 8 * int(np.prod(shape))
        if len(buf) - offset < nbytes:
            raise FormatError("checkpoint weights truncated", offset=offset)
        arrays.append(np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy())
        offset += nbytes
    return EncoderParams.from_arrays(arrays), offset


def save_params(params, path):
    with open(path, "wb") as fh:
        _write_params(fh, params)


def load_params(path) -> EncoderParams:
    """Read the encoder section of a checkpoint (any optimizer section is ignored)."""
    params, _ = _read_params(Path(path).read_bytes())
    return params
