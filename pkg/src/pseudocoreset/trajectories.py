"""Expert parameter trajectories trained on the full dataset.

A buffer stores one parameter snapshot per epoch boundary (epoch 0 is the
random initialisation). Buffers persist as ``BPCT`` binary files with a JSON
sidecar holding the training metadata.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import Dataset, ModelSpec, init_params, loss, loss_grad_value

log = logging.getLogger(__name__)

MAGIC = b"BPCT"
VERSION = 1


class DivergedTrainingError(FloatingPointError):
    pass


class TrajectoryFormatError(ValueError):
    pass


class SegmentBoundsError(IndexError):
    pass


@dataclass(eq=False)
class TrajectoryBuffer:
    model_id: str
    snapshots: np.ndarray  # (T+1, D)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        snaps = np.ascontiguousarray(self.snapshots, dtype=np.float64)
        if snaps.ndim != 2 or snaps.shape[0] < 1:
            raise ValueError("snapshots must be a non-empty (count, D) array")
        if not np.all(np.isfinite(snaps)):
            raise ValueError("snapshots contain non-finite values")
        snaps.setflags(write=False)
        self.snapshots = snaps

    @property
    def param_dim(self) -> int:
        return self.snapshots.shape[1]

    @property
    def epochs(self) -> int:
        return self.snapshots.shape[0] - 1

    def __len__(self) -> int:
        return self.snapshots.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256(self.model_id.encode())
        h.update(self.snapshots.tobytes())
        return h.hexdigest()


def model_id(spec: ModelSpec) -> str:
    return f"{spec.family}:d{spec.input_dim}:c{spec.num_classes}:h{spec.hidden}"


def train_expert(
    spec: ModelSpec,
    data: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int | None = None,
    init_scale: float = 0.1,
    dataset_id: str = "",
) -> TrajectoryBuffer:
    """Minibatch SGD on the loss, snapshotting theta at every epoch boundary.

    Minibatch gradients are rescaled by N/B so each step estimates the
    full-data gradient.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n = len(data)
    bs = n if batch_size is None else min(batch_size, n)
    rng = np.random.Generator(np.random.Philox(seed))
    theta = init_params(spec, rng, init_scale)
    snaps = [theta.copy()]
    losses = [float(loss(spec, data, theta).value)]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            batch = data.subset(order[start:start + bs])
            theta = theta - lr * loss_grad_value(spec, batch, theta, scale=n / len(batch))
        try:
            value = float(loss(spec, data, theta).value) if np.all(np.isfinite(theta)) else np.nan
        except FloatingPointError:
            value = np.nan
        if not np.isfinite(value):
            raise DivergedTrainingError(f"expert training diverged at epoch {epoch}")
        log.info("epoch %d loss %.6g", epoch, value)
        snaps.append(theta.copy())
        losses.append(value)
    if losses[-1] > losses[0]:
        log.warning("expert loss increased: %.6g -> %.6g", losses[0], losses[-1])
    meta = {
        "lr": lr,
        "epochs": epochs,
        "seed": seed,
        "batch_size": bs,
        "dataset_id": dataset_id,
        "losses": losses,
    }
    return TrajectoryBuffer(model_id(spec), np.array(snaps), meta)


def train_experts(spec, data, count: int, epochs: int, lr: float, seed: int, **kw) -> list[TrajectoryBuffer]:
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [train_expert(spec, data, epochs, lr, int(s), **kw) for s in seeds]


@dataclass(frozen=True, eq=False)
class TrajectorySegment:
    start: np.ndarray
    target: np.ndarray
    epoch: int
    buffer_index: int


def sample_segment(
    buffers: Sequence[TrajectoryBuffer],
    max_start: int,
    span: int,
    rng: np.random.Generator,
) -> TrajectorySegment:
    """Uniform buffer, uniform start epoch r in {0..max_start}; returns epochs r and r+span."""
    if not buffers:
        raise SegmentBoundsError("no expert buffers")
    if max_start < 0 or span < 0:
        raise ValueError("max_start and span must be >= 0")
    for i, buf in enumerate(buffers):
        if len(buf) < max_start + span + 1:
            raise SegmentBoundsError(
                f"buffer {i} ({buf.model_id}) has {len(buf)} snapshots, "
                f"needs {max_start + span + 1}"
            )
    b = int(rng.integers(len(buffers)))
    r = int(rng.integers(max_start + 1))
    snaps = buffers[b].snapshots
    return TrajectorySegment(snaps[r], snaps[r + span], r, b)


def save_buffer(path, buf: TrajectoryBuffer, meta: bool = True) -> None:
    path = Path(path)
    mid = buf.model_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(mid)))
        fh.write(mid)
        fh.write(struct.pack("<QQ", buf.param_dim, len(buf)))
        fh.write(buf.snapshots.astype("<f8").tobytes())
    if meta:
        sidecar = path.with_name(path.name + ".meta.json")
        sidecar.write_text(json.dumps(buf.meta, indent=2, sort_keys=True))


def load_buffer(path) -> TrajectoryBuffer:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise TrajectoryFormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise TrajectoryFormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise TrajectoryFormatError(f"{path}: unsupported version {version}")
    (nid,) = struct.unpack_from("<I", raw, 8)
    off = 12 + nid
    if len(raw) < off + 16:
        raise TrajectoryFormatError(f"{path}: truncated header")
    mid = raw[12:off].decode("utf-8")
    dim, count = struct.unpack_from("<QQ", raw, off)
    off += 16
    if len(raw) - off != 8 * dim * count:
        raise TrajectoryFormatError(
            f"{path}: header says {count} x {dim} values, payload has {(len(raw) - off) // 8}"
        )
    snaps = np.frombuffer(raw, "<f8", dim * count, off).reshape(count, dim).astype(np.float64)
    sidecar = path.with_name(path.name + ".meta.json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return TrajectoryBuffer(mid, snaps, meta)


def load_buffers(directory) -> list[TrajectoryBuffer]:
    files = sorted(Path(directory).glob("*.bpct"))
    if not files:
        raise FileNotFoundError(f"no .bpct buffers in {directory}")
    return [load_buffer(f) for f in files]
