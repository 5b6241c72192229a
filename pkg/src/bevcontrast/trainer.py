"""Self-supervised pretraining loop: AdamW with cosine annealing over scan pairs.

Per step, each pair of the batch is encoded, pooled, aligned, sampled and
scored; gradients are averaged over the batch before the update. Everything
is seeded, so a (dataset, config) couple fixes the metrics log bit-for-bit.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bev import bev_pool
from .contrast import AlignMode, LossConfig, align, contrastive_loss, qualifying_cells, sample_cells
from .encoder import EncoderParams, _read_params, _write_params, encode, init_params, param_grads
from .errors import ContractError, EmptyOverlapError, FormatError, ParameterError
from .geometry import RigidTransform, register_3d, rotation_z
from .io_kitti import list_sequences, load_sequence, select_pairs

log = logging.getLogger(__name__)

OPT_MAGIC = b"ADAMW\0\0\0"
METRIC_COLUMNS = ("step", "epoch", "lr", "loss", "n_cells")


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    weight_decay: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 1
    pair_mode: str = "time"
    delta_time: float = 0.7
    delta_dist: float = 5.0
    cell_size: float = 0.2
    grid_size: int = 512
    tau: float = 0.07
    n_samples: int = 4096
    align_mode: str = "2d_bilinear"
    seed: int = 0
    hidden: int = 32
    dim: int = 16
    center_input: bool = False
    scan_rate: float = 10.0
    occupancy_eps: float = 1e-6
    augment_yaw: float = 0.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        positives = ("weight_decay", "eps", "delta_time", "delta_dist", "cell_size", "tau", "scan_rate",
                     "occupancy_eps")
        for name in positives:
            if not getattr(self, name) > 0 and not (name == "weight_decay" and self.weight_decay == 0):
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr_max < 0:
            raise ParameterError(f"lr_max must be >= 0, got {self.lr_max}")
        if not all(0 <= b < 1 for b in self.betas):
            raise ParameterError(f"betas must lie in [0, 1), got {self.betas}")
        for name in ("epochs", "batch_size", "grid_size", "hidden", "dim"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.n_samples < 2:
            raise ParameterError("n_samples must be >= 2")
        if not 0 <= self.augment_yaw <= math.pi:
            raise ParameterError(f"augment_yaw must lie in [0, pi], got {self.augment_yaw}")
        if self.pair_mode not in ("time", "dist"):
            raise ParameterError(f"pair_mode must be 'time' or 'dist', got {self.pair_mode!r}")
        self.align_mode = AlignMode.parse(self.align_mode).value

    def to_json(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def loss_config(self, seed=None):
        return LossConfig(self.tau, self.n_samples, self.seed if seed is None else seed, self.occupancy_eps)


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


@dataclass
class TrainingPair:
    cloud_a: object
    cloud_b: object
    rel: object
    name: str = ""


def cosine_lr(step, total_steps, lr_max):
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(params, grads, state: OptimizerState, lr, weight_decay=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One AdamW update with decoupled weight decay; returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("params, grads and optimizer moments differ in length")
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ContractError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p))
        new_m.append(m)
        new_v.append(v)
    return new_p, OptimizerState(new_m, new_v, t)


def augment_pair(pair: TrainingPair, max_yaw, seed) -> TrainingPair:
    """Spin each scan about its sensor z-axis by an independent random yaw.

    The relative pose is updated to ``G_a ∘ rel ∘ G_b^-1`` so the two grids stay
    registered; planar rotations keep the 2D affine alignment exact.
    """
    if max_yaw == 0:
        return pair
    yaw_a, yaw_b = np.random.default_rng(seed).uniform(-max_yaw, max_yaw, 2)
    ga, gb = RigidTransform(rotation_z(yaw_a)), RigidTransform(rotation_z(yaw_b))
    rel = ga.compose(pair.rel).compose(gb.inverse())
    return TrainingPair(register_3d(pair.cloud_a, ga), register_3d(pair.cloud_b, gb), rel, pair.name)


def pair_loss(params: EncoderParams, pair: TrainingPair, cfg: TrainConfig, sample_seed, with_grads=True):
    """Loss of one pair, the number of contrasted cells and (optionally) parameter gradients."""
    pair = augment_pair(pair, cfg.augment_yaw, sample_seed)
    tape = ad.Tape()
    b, M = cfg.cell_size, cfg.grid_size
    fa = encode(pair.cloud_a, params, tape)
    fb = encode(pair.cloud_b, params, tape)
    ref = bev_pool(fa, pair.cloud_a, b, M, tape)
    aligned = align(cfg.align_mode, fb, pair.cloud_b, pair.rel, b, M, tape)
    cells = sample_cells(ref, aligned, cfg.loss_config(sample_seed))
    loss = contrastive_loss(ref, aligned, cells, cfg.tau)
    grads = param_grads(tape, params, ad.backward(tape, loss)) if with_grads else None
    return float(loss.data), len(cells), grads


def overlap_count(pair: TrainingPair, cfg: TrainConfig):
    """Qualifying cells of a pair; depends on geometry only, not on the encoder."""
    ones_a = np.ones((len(pair.cloud_a), 1))
    ones_b = np.ones((len(pair.cloud_b), 1))
    ref = bev_pool(ones_a, pair.cloud_a, cfg.cell_size, cfg.grid_size)
    aligned = align(cfg.align_mode, ones_b, pair.cloud_b, pair.rel, cfg.cell_size, cfg.grid_size)
    return len(qualifying_cells(ref, aligned, cfg.occupancy_eps))


def _sample_seed(seed, step, k):
    return int(np.random.SeedSequence([seed, step, k]).generate_state(1)[0])


def steps_per_epoch(n_pairs, batch_size):
    return -(-n_pairs // batch_size)


def pretrain(pairs, cfg: TrainConfig, params=None, out_dir=None, resume=None):
    """Train an encoder on ``pairs``; returns ``(params, metrics)``.

    ``metrics`` is a list of dicts with keys ``METRIC_COLUMNS``. With ``out_dir``
    a checkpoint is written after every epoch plus ``metrics.csv``. ``resume``
    names a checkpoint with an optimizer section to continue from.
    """
    usable = []
    for k, pair in enumerate(pairs):
        if overlap_count(pair, cfg) < 2:
            log.warning("skipping pair %s: empty BEV overlap", pair.name or k)
            continue
        usable.append(pair)
    if not usable:
        raise EmptyOverlapError("every training pair is degenerate (no BEV overlap)")
    per_epoch = steps_per_epoch(len(usable), cfg.batch_size)
    total = cfg.epochs * per_epoch
    metrics = []
    if resume is not None:
        params, state = load_checkpoint(resume)
        metrics = read_metrics(Path(resume).parent / "metrics.csv")[: state.step] \
            if (Path(resume).parent / "metrics.csv").exists() else []
    else:
        if params is None:
            params = init_params(cfg.seed, cfg.hidden, cfg.dim, cfg.center_input)
        state = OptimizerState.zeros_like(params.arrays())
    params = EncoderParams.from_arrays(params.arrays(), cfg.center_input)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(cfg.to_json() + "\n")
    step = state.step
    if step % per_epoch:
        raise ContractError("resume checkpoint is not at an epoch boundary")
    for epoch in range(step // per_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(usable))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr_max)
            losses, cells, grad_sum = [], 0, None
            for k in batch:
                loss, n_cells, grads = pair_loss(params, usable[k], cfg, _sample_seed(cfg.seed, step, int(k)))
                losses.append(loss)
                cells += n_cells
                grad_sum = grads if grad_sum is None else [a + g for a, g in zip(grad_sum, grads)]
            grads = [g / len(batch) for g in grad_sum]
            new_arrays, state = adamw_step(params.arrays(), grads, state, lr,
                                           cfg.weight_decay, cfg.betas, cfg.eps)
            params = EncoderParams.from_arrays(new_arrays, cfg.center_input)
            metrics.append({"step": step, "epoch": epoch, "lr": lr, "loss": float(np.mean(losses)),
                            "n_cells": cells})
            step += 1
        if out_dir is not None:
            save_checkpoint(params, state, out_dir / f"ckpt_epoch{epoch:03d}.bin")
    if out_dir is not None:
        save_checkpoint(params, state, out_dir / "encoder.bin")
        write_metrics(metrics, out_dir / "metrics.csv", cfg)
    return params, metrics


def save_checkpoint(params: EncoderParams, state: OptimizerState, path):
    """Encoder section followed by the optimizer extension (magic, step, m..., v...)."""
    with open(path, "wb") as fh:
        _write_params(fh, params)
        fh.write(OPT_MAGIC + struct.pack("<Q", state.step))
        for a in state.m + state.v:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """``(params, OptimizerState)``; a plain encoder file yields fresh moments at step 0."""
    buf = Path(path).read_bytes()
    params, off = _read_params(buf)
    arrays = params.arrays()
    if off == len(buf):
        return params, OptimizerState.zeros_like(arrays)
    if buf[off:off + 8] != OPT_MAGIC or len(buf) < off + 16:
        raise FormatError("bad optimizer section", offset=off)
    (step,) = struct.unpack_from("<Q", buf, off + 8)
    off += 16
    moments = []
    for a in arrays + arrays:
        n = a.size
        if len(buf) < off + 8 * n:
            raise FormatError("optimizer section truncated", offset=off)
        moments.append(np.frombuffer(buf, "<f8", n, off).reshape(a.shape).copy())
        off += 8 * n
    k = len(arrays)
    return params, OptimizerState(moments[:k], moments[k:], int(step))


def write_metrics(metrics, path, cfg: TrainConfig | None = None):
    with open(path, "w") as fh:
        if cfg is not None:
            for key, val in sorted(dataclasses.asdict(cfg).items()):
                fh.write(f"# {key}={val}\n")
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for rec in metrics:
            fh.write(f"{rec['step']},{rec['epoch']},{rec['lr']!r},{rec['loss']!r},{rec['n_cells']}\n")


def read_metrics(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    out = []
    for ln in lines[1:]:
        s, e, lr, loss, n = ln.split(",")
        out.append({"step": int(s), "epoch": int(e), "lr": float(lr), "loss": float(loss), "n_cells": int(n)})
    return out


def load_pairs(data_dir, cfg: TrainConfig):
    """Training pairs from every sequence under ``data_dir``; never across sequences."""
    pairs = []
    for seq_dir in list_sequences(data_dir):
        seq = load_sequence(seq_dir, rate=cfg.scan_rate)
        gap = {"by_time": cfg.delta_time} if cfg.pair_mode == "time" else {"by_dist": cfg.delta_dist}
        for sp in select_pairs(seq.track, **gap):
            pairs.append(TrainingPair(seq.scans[sp.index_a], seq.scans[sp.index_b], sp.rel,
                                      f"{seq.name}:{sp.index_a}-{sp.index_b}"))
    return pairs
