"""Model families, potentials, the conjugate posterior and dataset files.

Three families share one calling convention: features and parameters are
graph nodes, labels are plain integer arrays. ``per_datum_log_lik`` returns
the vector of log-potentials f(x_n, theta); ``loss_grad`` returns the gradient
of the training loss with respect to theta as a graph expression, so it can be
unrolled through inner optimisation loops and differentiated once more with
respect to the features.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

FAMILIES = ("gaussian-location", "softmax-linear", "mlp-1hidden")


class UnsupportedModelError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows of ``features`` with optional integer ``labels``."""

    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if labels.shape != (feats.shape[0],):
                raise ValueError("labels must have one entry per row")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        idx = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[idx], None if self.labels is None else self.labels[idx])

    def concat(self, other: "Dataset") -> "Dataset":
        labels = None
        if self.labels is not None and other.labels is not None:
            labels = np.concatenate([self.labels, other.labels])
        return Dataset(np.vstack([self.features, other.features]), labels)


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ParamVector:
    flat: np.ndarray
    manifest: tuple[Segment, ...]

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float64)
        object.__setattr__(self, "flat", flat)
        check_manifest(self.manifest, flat.shape[0])

    def segment(self, name: str) -> np.ndarray:
        for seg in self.manifest:
            if seg.name == name:
                return self.flat[seg.offset:seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(name)


def check_manifest(manifest, dim: int) -> None:
    pos = 0
    for seg in sorted(manifest, key=lambda s: s.offset):
        if seg.offset != pos:
            raise ValueError(f"manifest segment {seg.name!r} does not start at {pos}")
        pos += seg.size
    if pos != dim:
        raise ValueError(f"manifest covers {pos} entries, parameter vector has {dim}")


def _as_matrix(cov, d: int, what: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        cov = np.full(d, float(cov))
    if cov.ndim == 1:
        if cov.shape != (d,) or np.any(cov <= 0):
            raise ValueError(f"{what}: diagonal must be {d} positive entries")
        return np.diag(cov)
    if cov.shape != (d, d):
        raise ValueError(f"{what}: expected ({d},{d}), got {cov.shape}")
    if d > 64:
        raise ValueError(f"{what}: full covariance only supported for d <= 64")
    if not np.allclose(cov, cov.T):
        raise ValueError(f"{what}: not symmetric")
    np.linalg.cholesky(cov)
    return cov


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Immutable model description.

    ``likelihood_cov``, ``prior_mean`` and ``prior_cov`` only apply to the
    gaussian-location family; covariances may be given as a scalar, a
    diagonal vector or (for d <= 64) a full matrix. ``weight_decay`` is the
    prior of the classifier families, encoded as ``lambda * ||theta||^2``.
    """

    family: str
    input_dim: int
    num_classes: int = 0
    hidden: int = 0
    weight_decay: float = 0.0
    likelihood_cov: object = 1.0
    prior_mean: object = 0.0
    prior_cov: object = 1.0
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnsupportedModelError(f"unknown family {self.family!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        d = self.input_dim
        if self.family == "gaussian-location":
            lik = _as_matrix(self.likelihood_cov, d, "likelihood_cov")
            pc = _as_matrix(self.prior_cov, d, "prior_cov")
            pm = np.broadcast_to(np.asarray(self.prior_mean, dtype=np.float64), (d,)).copy()
            self._cache.update(
                lik_cov=lik,
                lik_prec=np.linalg.inv(lik),
                prior_cov_m=pc,
                prior_prec=np.linalg.inv(pc),
                prior_mean_v=pm,
            )
        else:
            if self.num_classes < 2:
                raise ValueError("classifier families need num_classes >= 2")
            if self.family == "mlp-1hidden" and self.hidden < 1:
                raise ValueError("mlp-1hidden needs hidden >= 1")

    @property
    def is_classifier(self) -> bool:
        return self.family != "gaussian-location"

    @property
    def manifest(self) -> tuple[Segment, ...]:
        d, c, h = self.input_dim, self.num_classes, self.hidden
        if self.family == "gaussian-location":
            shapes = [("theta", (d,))]
        elif self.family == "softmax-linear":
            shapes = [("W", (c, d)), ("b", (c,))]
        else:
            shapes = [("W1", (h, d)), ("b1", (h,)), ("W2", (c, h)), ("b2", (c,))]
        segs, off = [], 0
        for name, shape in shapes:
            seg = Segment(name, shape, off)
            segs.append(seg)
            off += seg.size
        return tuple(segs)

    @property
    def param_dim(self) -> int:
        return sum(s.size for s in self.manifest)

    def params(self, flat) -> ParamVector:
        return ParamVector(np.asarray(flat, dtype=np.float64), self.manifest)

    # gaussian-location constants
    @property
    def lik_prec(self) -> np.ndarray:
        return self._cache["lik_prec"]

    @property
    def lik_cov(self) -> np.ndarray:
        return self._cache["lik_cov"]

    @property
    def prior_prec(self) -> np.ndarray:
        return self._cache["prior_prec"]

    @property
    def prior_cov_matrix(self) -> np.ndarray:
        return self._cache["prior_cov_m"]

    @property
    def prior_mean_vector(self) -> np.ndarray:
        return self._cache["prior_mean_v"]


def _check_dims(spec: ModelSpec, feats: dc.Node, labels, theta: dc.Node) -> None:
    if feats.value.ndim != 2 or feats.shape[1] != spec.input_dim:
        raise dc.DimensionError(
            f"features shape {feats.shape} does not match input dim {spec.input_dim}"
        )
    if theta.shape != (spec.param_dim,):
        raise dc.DimensionError(f"theta shape {theta.shape}, expected ({spec.param_dim},)")
    if spec.is_classifier:
        if labels is None:
            raise ValueError(f"{spec.family} needs labels")
        labels = np.asarray(labels)
        if labels.shape != (feats.shape[0],):
            raise dc.DimensionError("one label per datum required")
        if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
            raise ValueError("label out of range")


def _segments(spec: ModelSpec, theta: dc.Node) -> dict[str, dc.Node]:
    return {
        s.name: dc.reshape(dc.slice_(theta, s.offset, s.offset + s.size), s.shape)
        for s in spec.manifest
    }


def _onehot(labels, c: int) -> np.ndarray:
    out = np.zeros((len(labels), c))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _logits(spec: ModelSpec, feats: dc.Node, theta: dc.Node):
    p = _segments(spec, theta)
    if spec.family == "softmax-linear":
        return dc.add(dc.matmul(feats, dc.transpose(p["W"])), p["b"]), p, None
    hid = dc.tanh(dc.add(dc.matmul(feats, dc.transpose(p["W1"])), p["b1"]))
    return dc.add(dc.matmul(hid, dc.transpose(p["W2"])), p["b2"]), p, hid


def per_datum_log_lik(spec: ModelSpec, feats, labels, theta) -> dc.Node:
    """Vector of f(x_n, theta), one entry per row of ``feats``."""
    feats, theta = dc._lift(feats), dc._lift(theta)
    _check_dims(spec, feats, labels, theta)
    if spec.family == "gaussian-location":
        resid = dc.sub(feats, theta)
        quad = dc.sum_(dc.mul(dc.matmul(resid, dc.const(spec.lik_prec)), resid), axis=1)
        return dc.mul(quad, -0.5)
    logits, _, _ = _logits(spec, feats, theta)
    onehot = dc.const(_onehot(labels, spec.num_classes))
    return dc.sum_(dc.mul(onehot, dc.log_softmax(logits)), axis=1)


def log_potential(spec: ModelSpec, data: Dataset, theta, feats=None) -> dc.Node:
    """Sum of per-datum log-potentials. ``feats`` overrides ``data.features``
    with a graph node (e.g. a learnable pseudocoreset)."""
    if len(data) == 0:
        raise ValueError("log_potential needs at least one datum")
    node = per_datum_log_lik(spec, data.features if feats is None else feats, data.labels, theta)
    bad = ~np.isfinite(node.value)
    if bad.any():
        raise NumericError(f"non-finite log-potential at datum {int(np.argmax(bad))}")
    return dc.sum_(node)


def potential_energy(spec: ModelSpec, data: Dataset, theta, lam: float, feats=None) -> dc.Node:
    """U = -sum_n f(x_n, theta) + lam * ||theta||^2."""
    theta = dc._lift(theta)
    u = dc.neg(log_potential(spec, data, theta, feats))
    if lam:
        u = dc.add(u, dc.mul(dc.l2sq(theta), lam))
    return u


def prior_penalty(spec: ModelSpec, theta) -> dc.Node:
    """Negative log prior up to a constant."""
    theta = dc._lift(theta)
    if spec.family == "gaussian-location":
        r = dc.sub(theta, dc.const(spec.prior_mean_vector))
        return dc.mul(dc.sum_(dc.mul(dc.matmul(r, dc.const(spec.prior_prec)), r)), 0.5)
    return dc.mul(dc.l2sq(theta), spec.weight_decay)


def loss(spec: ModelSpec, data: Dataset, theta, feats=None, with_prior: bool = True) -> dc.Node:
    """Training loss -1^T f(x, theta), plus the negative log prior by default."""
    theta = dc._lift(theta)
    out = dc.neg(log_potential(spec, data, theta, feats))
    if with_prior:
        out = dc.add(out, prior_penalty(spec, theta))
    return out


def loss_grad(spec: ModelSpec, feats, labels, theta, with_prior: bool = True, scale: float = 1.0) -> dc.Node:
    """Gradient of ``scale * (-1^T f) (+ prior)`` w.r.t. theta, as a graph node.

    Built from first-order ops only, so it is differentiable with respect to
    both ``feats`` and ``theta``.
    """
    feats, theta = dc._lift(feats), dc._lift(theta)
    _check_dims(spec, feats, labels, theta)
    if spec.family == "gaussian-location":
        resid = dc.sub(feats, theta)
        g = dc.neg(dc.matmul(dc.sum_(resid, axis=0), dc.const(spec.lik_prec)))
        g = dc.mul(g, scale) if scale != 1.0 else g
        if with_prior:
            r = dc.sub(theta, dc.const(spec.prior_mean_vector))
            g = dc.add(g, dc.matmul(r, dc.const(spec.prior_prec)))
        return g
    logits, p, hid = _logits(spec, feats, theta)
    delta = dc.sub(dc.exp(dc.log_softmax(logits)), dc.const(_onehot(labels, spec.num_classes)))
    if scale != 1.0:
        delta = dc.mul(delta, scale)
    if spec.family == "softmax-linear":
        parts = [
            dc.reshape(dc.matmul(dc.transpose(delta), feats), (-1,)),
            dc.sum_(delta, axis=0),
        ]
    else:
        back = dc.mul(dc.matmul(delta, p["W2"]), dc.sub(1.0, dc.mul(hid, hid)))
        parts = [
            dc.reshape(dc.matmul(dc.transpose(back), feats), (-1,)),
            dc.sum_(back, axis=0),
            dc.reshape(dc.matmul(dc.transpose(delta), hid), (-1,)),
            dc.sum_(delta, axis=0),
        ]
    g = dc.concat(parts)
    if with_prior and spec.weight_decay:
        g = dc.add(g, dc.mul(theta, 2.0 * spec.weight_decay))
    return g


def loss_grad_value(spec: ModelSpec, data: Dataset, theta, with_prior: bool = True, scale: float = 1.0) -> np.ndarray:
    return loss_grad(spec, data.features, data.labels, theta, with_prior, scale).value


def init_params(spec: ModelSpec, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
    return scale * rng.standard_normal(spec.param_dim)


def exact_conjugate_posterior(spec: ModelSpec, data: Dataset | np.ndarray):
    """Exact Gaussian posterior of the gaussian-location model.

    Returns a full-covariance :class:`~pseudocoreset.gaussapprox.GaussianApprox`.
    """
    from .gaussapprox import GaussianApprox

    if spec.family != "gaussian-location":
        raise UnsupportedModelError(f"no conjugate posterior for {spec.family}")
    feats = data.features if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    feats = feats.reshape(-1, spec.input_dim)
    m = feats.shape[0]
    if m == 0:
        return GaussianApprox.full(spec.prior_mean_vector.copy(), spec.prior_cov_matrix.copy())
    post_prec = spec.prior_prec + m * spec.lik_prec
    cov = np.linalg.inv(post_prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (spec.prior_prec @ spec.prior_mean_vector + spec.lik_prec @ feats.sum(axis=0))
    return GaussianApprox.full(mean, cov)


AUGMENTATIONS = ("identity", "gaussian-jitter", "flip-sign")


@dataclass(frozen=True)
class Augmentation:
    kind: str = "identity"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Augmentation":
        """``identity``, ``flip-sign`` or ``gaussian-jitter:<sigma>``."""
        kind, _, arg = text.partition(":")
        return cls(kind, float(arg) if arg else (0.1 if kind == "gaussian-jitter" else 0.0))


def draw_augmentation(aug: Augmentation, shape: tuple[int, ...], rng: np.random.Generator | None):
    """Fix one random draw of ``aug`` and return it as a reusable transform.

    The transform accepts an array or a graph node; gradients pass through.
    """
    if aug.kind == "identity" or (aug.kind == "gaussian-jitter" and aug.sigma == 0):
        return lambda feats: feats
    if aug.kind == "gaussian-jitter":
        noise = aug.sigma * rng.standard_normal(shape)
        return lambda feats: dc.add(feats, noise) if isinstance(feats, dc.Node) else feats + noise
    signs = np.where(rng.random(shape[0]) < 0.5, -1.0, 1.0)[:, None]
    signs = np.broadcast_to(signs, shape).copy()
    return lambda feats: dc.mul(feats, signs) if isinstance(feats, dc.Node) else feats * signs


def augment(feats, aug: Augmentation, rng: np.random.Generator | None):
    """Apply a fresh draw of ``aug`` to a feature array or node."""
    value = feats.value if isinstance(feats, dc.Node) else np.asarray(feats)
    return draw_augmentation(aug, value.shape, rng)(feats)


# --- dataset files -------------------------------------------------------

_BPCD_MAGIC = b"BPCD"
_BPCD_VERSION = 1
_BPCD_HEADER = struct.Struct("<4sIQQB")


def save_bpcd(path, data: Dataset) -> None:
    has = data.labels is not None
    with open(path, "wb") as fh:
        fh.write(_BPCD_HEADER.pack(_BPCD_MAGIC, _BPCD_VERSION, len(data), data.dim, int(has)))
        fh.write(data.features.astype("<f8").tobytes())
        if has:
            fh.write(data.labels.astype("<i8").tobytes())


def load_bpcd(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _BPCD_HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, count, dim, has = _BPCD_HEADER.unpack_from(raw)
    if magic != _BPCD_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != _BPCD_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    need = _BPCD_HEADER.size + 8 * count * dim + (8 * count if has else 0)
    if len(raw) != need:
        raise DatasetFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    off = _BPCD_HEADER.size
    feats = np.frombuffer(raw, "<f8", count * dim, off).reshape(count, dim).astype(np.float64)
    labels = None
    if has:
        labels = np.frombuffer(raw, "<i8", count, off + 8 * count * dim).astype(np.int64)
    return Dataset(feats, labels)


def save_csv(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i in range(len(data)):
            row = [repr(float(v)) for v in data.features[i]]
            if data.labels is not None:
                row.append(str(int(data.labels[i])))
            w.writerow(row)


def load_csv(path, has_labels: bool = True) -> Dataset:
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    if has_labels:
        return Dataset(rows[:, :-1], rows[:, -1].astype(np.int64))
    return Dataset(rows)


def load_dataset(path, has_labels: bool = True) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if path.suffix.lower() == ".csv":
        return load_csv(path, has_labels)
    return load_bpcd(path)


def save_dataset(path, data: Dataset) -> None:
    if Path(path).suffix.lower() == ".csv":
        save_csv(path, data)
    else:
        save_bpcd(path, data)
