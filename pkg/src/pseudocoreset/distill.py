"""Pseudocoreset construction: forward KL, Wasserstein, reverse KL and
gradient matching, plus the outer loop that drives them.

All four step functions take the current pseudocoreset features as a plain
array and return the gradient of their objective with respect to those
features; :func:`distill` applies plain gradient descent with the outer
learning rate.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .gaussapprox import exact_divergences, make_cov, gaussian_w2_squared
from .models import (
    Augmentation,
    Dataset,
    ModelSpec,
    NumericError,
    augment,
    draw_augmentation,
    exact_conjugate_posterior,
    log_potential,
    loss_grad,
    loss_grad_value,
    per_datum_log_lik,
)
from .trajectories import TrajectoryBuffer, TrajectorySegment, sample_segment

log = logging.getLogger(__name__)

METHODS = ("rkl", "w", "fkl", "dc")


class DegenerateSegmentError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(eq=False)
class Pseudocoreset:
    features: np.ndarray
    labels: np.ndarray | None = None
    ipc: int | None = None

    def __post_init__(self):
        self.features = np.array(self.features, dtype=np.float64)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64)
            labels.setflags(write=False)
            self.labels = labels

    def __len__(self) -> int:
        return self.features.shape[0]

    def as_dataset(self) -> Dataset:
        return Dataset(self.features, self.labels)


@dataclass
class DistillConfig:
    """Distillation hyperparameters; defaults follow the 10-ipc forward-KL setting."""

    method: str = "fkl"
    steps: int = 5000  # K
    inner_steps: int = 30  # L_u
    expert_span: int = 1  # L_x
    inner_lr: float = 0.03  # eta
    outer_lr: float = 0.1  # gamma
    max_start: int = 20  # T+
    max_start_offset: int = 0
    samples: int = 30  # S
    sigma_u: float = 0.01
    sigma_x: float = 0.01
    cov_kind: str = "isotropic"
    batch_size: int = 1000  # B, reverse KL only
    rkl_rescale: bool = False
    augmentation: str = "identity"
    inner_prior: bool = True
    log_interval: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.steps < 0 or self.inner_steps < 1 or self.expert_span < 0:
            raise ValueError("steps >= 0, inner_steps >= 1, expert_span >= 0 required")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.samples < 1 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("samples, batch_size, log_interval must be >= 1")
        Augmentation.parse(self.augmentation)

    @property
    def aug(self) -> Augmentation:
        return Augmentation.parse(self.augmentation)

    @property
    def effective_max_start(self) -> int:
        return max(self.max_start - self.max_start_offset, 0)

    def to_dict(self) -> dict:
        return asdict(self)


def init_pseudocoreset(
    data: Dataset,
    rng: np.random.Generator,
    size: int | None = None,
    ipc: int | None = None,
) -> Pseudocoreset:
    """Copy a random subset of the data; class-balanced when ``ipc`` is given."""
    if ipc is not None:
        if data.labels is None:
            raise InsufficientDataError("ipc initialisation needs labelled data")
        picks = []
        for c in np.unique(data.labels):
            idx = np.flatnonzero(data.labels == c)
            if len(idx) < ipc:
                raise InsufficientDataError(f"class {c} has {len(idx)} examples, need {ipc}")
            picks.append(rng.choice(idx, ipc, replace=False))
        index = np.concatenate(picks)
    else:
        if size is None or size < 1:
            raise ValueError("give size >= 1 or ipc")
        if size > len(data):
            raise InsufficientDataError(f"dataset has {len(data)} points, need {size}")
        index = rng.choice(len(data), size, replace=False)
    sub = data.subset(index)
    return Pseudocoreset(sub.features.copy(), sub.labels, ipc)


def _inner_fit(spec, feats, labels, theta0, steps, lr, aug, rng, with_prior) -> np.ndarray:
    """Gradient descent on the pseudocoreset loss, values only (no graph kept)."""
    theta = np.array(theta0, dtype=np.float64)
    for t in range(1, steps + 1):
        x = augment(feats, aug, rng)
        theta = theta - lr * loss_grad(spec, x, labels, theta, with_prior).value
        if not np.all(np.isfinite(theta)):
            raise NumericError(f"inner loop produced non-finite parameters at step {t}")
    return theta


def _noise_scale(sigma, dim: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(sigma, dtype=np.float64), (dim,))


# --- forward KL ----------------------------------------------------------

def fkl_objective(spec, feats, labels, theta_u_end, theta_x_end, eps_u, eps_x, sigma_u, sigma_x) -> dc.Node:
    """(1/S) sum_s [1^T f(u, sg(theta_u) + s_u e_u) - 1^T f(u, theta_x + s_x e_x)]."""
    feats = dc._lift(feats)
    dim = eps_u.shape[1]
    su, sx = _noise_scale(sigma_u, dim), _noise_scale(sigma_x, dim)
    end_u = dc.stop_grad(theta_u_end)
    data = Dataset(feats.value, labels)
    total = None
    for e_u, e_x in zip(eps_u, eps_x):
        a = log_potential(spec, data, dc.add(end_u, su * e_u), feats=feats)
        b = log_potential(spec, data, dc.const(theta_x_end + sx * e_x), feats=feats)
        term = dc.sub(a, b)
        total = term if total is None else dc.add(total, term)
    return dc.mul(total, 1.0 / len(eps_u))


@dataclass
class StepResult:
    grad: np.ndarray
    objective: float
    info: dict = field(default_factory=dict)


def fkl_step(
    spec: ModelSpec,
    u: Pseudocoreset,
    segment: TrajectorySegment,
    cfg: DistillConfig,
    rng: np.random.Generator,
    noise: tuple[np.ndarray, np.ndarray] | None = None,
) -> StepResult:
    """Truncated forward-KL gradient for one expert segment.

    The inner loop runs on values only, so the dependence of the endpoint on
    ``u`` is dropped; ``u`` still enters through every likelihood term.
    ``noise`` fixes (eps_u, eps_x), each of shape (S, D).
    """
    theta_u = _inner_fit(
        spec, u.features, u.labels, segment.start, cfg.inner_steps, cfg.inner_lr, cfg.aug, rng, cfg.inner_prior
    )
    dim = theta_u.shape[0]
    if noise is None:
        eps = rng.standard_normal((2, cfg.samples, dim))
        noise = (eps[0], eps[1])
    feats = dc.leaf(u.features)
    obj = fkl_objective(spec, feats, u.labels, theta_u, segment.target, noise[0], noise[1], cfg.sigma_u, cfg.sigma_x)
    g = dc.backward(obj, wrt=[feats])[feats]
    return StepResult(g, float(obj.value), {"theta_u": theta_u})


# --- Wasserstein ---------------------------------------------------------

def _unrolled_endpoint(spec, feats: dc.Node, labels, theta0, cfg: DistillConfig, rng) -> dc.Node:
    theta = dc.const(theta0)
    for _ in range(cfg.inner_steps):
        x = augment(feats, cfg.aug, rng)
        theta = dc.sub(theta, dc.mul(loss_grad(spec, x, labels, theta, cfg.inner_prior), cfg.inner_lr))
        if not np.all(np.isfinite(theta.value)):
            raise NumericError("inner loop produced non-finite parameters")
    return theta


def w_objective(spec, feats: dc.Node, labels, segment: TrajectorySegment, cfg: DistillConfig, rng) -> dc.Node:
    """||theta_u^(L) - theta_x^(L)||^2 / ||theta^(0) - theta_x^(L)||^2 (+ covariance term)."""
    denom = float(np.sum((segment.start - segment.target) ** 2))
    if denom == 0.0:
        raise DegenerateSegmentError(f"segment start equals target (epoch {segment.epoch})")
    end = _unrolled_endpoint(spec, feats, labels, segment.start, cfg, rng)
    obj = dc.l2sq(dc.sub(end, dc.const(segment.target)))
    if cfg.cov_kind != "isotropic" or cfg.sigma_u != cfg.sigma_x:
        dim = segment.start.shape[0]
        cov_term = gaussian_w2_squared(
            make_cov(cfg.cov_kind, cfg.sigma_u, dim, np.zeros(dim)),
            make_cov(cfg.cov_kind, cfg.sigma_x, dim, np.zeros(dim)),
        )
        obj = dc.add(obj, cov_term)
    return dc.mul(obj, 1.0 / denom)


def w_step(spec, u: Pseudocoreset, segment: TrajectorySegment, cfg: DistillConfig, rng) -> StepResult:
    """Gradient of the normalised endpoint distance through the full inner unroll."""
    feats = dc.leaf(u.features)
    obj = w_objective(spec, feats, u.labels, segment, cfg, rng)
    g = dc.backward(obj, wrt=[feats])[feats]
    return StepResult(g, float(obj.value))


# --- reverse KL ----------------------------------------------------------

def rkl_estimator(
    spec: ModelSpec,
    feats_u: np.ndarray,
    labels_u,
    batch: Dataset,
    theta_mean: np.ndarray,
    eps: np.ndarray,
    sigma,
    scale_x: float,
    scale_u: float,
    transform=None,
) -> np.ndarray:
    """-(1/S) sum_s h_s (scale_x 1^T g_s - scale_u 1^T g~_s) with centred g, g~, h.

    ``transform`` is a fixed augmentation applied to the coreset features
    inside the graph, so h is the gradient through it.
    """
    s_count, dim = eps.shape
    if s_count < 2:
        raise ValueError("reverse-KL estimator needs S >= 2 samples for a covariance")
    transform = transform or (lambda v: v)
    thetas = theta_mean + _noise_scale(sigma, dim) * eps
    g = np.empty((s_count, len(batch)))
    gt = np.empty((s_count, feats_u.shape[0]))
    h = np.empty((s_count,) + feats_u.shape)
    for s, theta in enumerate(thetas):
        g[s] = per_datum_log_lik(spec, batch.features, batch.labels, theta).value
        leaf = dc.leaf(feats_u)
        fu = per_datum_log_lik(spec, transform(leaf), labels_u, theta)
        gt[s] = fu.value
        h[s] = dc.backward(dc.sum_(fu), wrt=[leaf])[leaf]
    g -= g.mean(axis=0)
    gt -= gt.mean(axis=0)
    h -= h.mean(axis=0)
    weights = scale_x * g.sum(axis=1) - scale_u * gt.sum(axis=1)
    return -np.tensordot(weights, h, axes=(0, 0)) / s_count


def rkl_step(
    spec: ModelSpec,
    u: Pseudocoreset,
    segment: TrajectorySegment,
    batch: Dataset,
    cfg: DistillConfig,
    rng: np.random.Generator,
    full_size: int | None = None,
) -> StepResult:
    """Reverse-KL covariance estimator under the SGD-endpoint Gaussian.

    Per-datum averages (1/B, 1/M) by default; with ``cfg.rkl_rescale`` the
    minibatch sum is scaled by N/B and the coreset sum is left unscaled, which
    estimates the population gradient.
    """
    aug = cfg.aug
    theta_u = _inner_fit(
        spec, u.features, u.labels, segment.start, cfg.inner_steps, cfg.inner_lr, aug, rng, cfg.inner_prior
    )
    eps = rng.standard_normal((cfg.samples, theta_u.shape[0]))
    batch_aug = Dataset(augment(batch.features, aug, rng), batch.labels)
    transform = draw_augmentation(aug, u.features.shape, rng)
    if cfg.rkl_rescale:
        n = len(batch) if full_size is None else full_size
        sx, su = n / len(batch), 1.0
    else:
        sx, su = 1.0 / len(batch), 1.0 / len(u)
    grad = rkl_estimator(spec, u.features, u.labels, batch_aug, theta_u, eps, cfg.sigma_u, sx, su, transform)
    return StepResult(grad, float("nan"), {"theta_u": theta_u})


# --- gradient matching -----------------------------------------------------

def dc_objective(spec: ModelSpec, feats: dc.Node, labels, theta, grad_x: np.ndarray):
    """Sum over parameter segments of 1 - cos(grad_x, grad_u).

    Segments where either gradient has zero norm are skipped and listed in the
    second return value.
    """
    gu = loss_grad(spec, feats, labels, theta, with_prior=False)
    total, skipped = None, []
    for seg in spec.manifest:
        a = dc.slice_(gu, seg.offset, seg.offset + seg.size)
        b = grad_x[seg.offset:seg.offset + seg.size]
        nb = float(b @ b)
        if nb == 0.0 or float(a.value @ a.value) == 0.0:
            skipped.append(seg.name)
            continue
        cos = dc.div(dc.dot(a, b), dc.sqrt(dc.mul(dc.l2sq(a), nb)))
        term = dc.sub(1.0, cos)
        total = term if total is None else dc.add(total, term)
    if total is None:
        total = dc.mul(dc.sum_(feats), 0.0)
    return total, skipped


def dc_step(spec, u: Pseudocoreset, data: Dataset, theta, cfg: DistillConfig | None = None) -> StepResult:
    """Gradient-matching gradient at a single parameter point."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise NumericError("dc_step: non-finite parameters")
    grad_x = loss_grad_value(spec, data, theta, with_prior=False)
    feats = dc.leaf(u.features)
    obj, skipped = dc_objective(spec, feats, u.labels, theta, grad_x)
    if skipped:
        log.warning("gradient matching skipped zero-norm segments: %s", ", ".join(skipped))
    g = dc.backward(obj, wrt=[feats])[feats]
    return StepResult(g, float(obj.value), {"skipped": skipped})


# --- one-step Gaussian surrogate and gradient matching ----------------------

@dataclass
class Prop1Result:
    lhs: np.ndarray
    rhs: np.ndarray
    rel_err: float


def surrogate_rkl_grad(spec, u: Dataset, x: Dataset, theta, lr: float, sigma, pairs: int = 32, rng=None) -> np.ndarray:
    """Reverse-KL gradient when the coreset posterior is replaced by
    N(theta - lr * grad l(u, theta), diag(sigma^2)).

    The score-function part of the KL gradient cancels against the gradient of
    log Z(u) under the surrogate, leaving the path through the surrogate mean:
    d mean/du^T E_q[grad_theta(1^T f(u, theta) - 1^T f(x, theta))].
    Expectations use antithetic noise pairs, exact when f is quadratic in theta.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = np.asarray(theta, dtype=np.float64)
    dim = theta.shape[0]
    scale = _noise_scale(sigma, dim)
    feats = dc.leaf(u.features)
    mean = dc.sub(dc.const(theta), dc.mul(loss_grad(spec, feats, u.labels, theta, with_prior=False), lr))
    fixed_u = dc.stop_grad(feats)
    eps = rng.standard_normal((pairs, dim))
    total = None
    for e in np.concatenate([eps, -eps]):
        th = dc.add(mean, scale * e)
        term = dc.sub(log_potential(spec, u, th, feats=fixed_u), log_potential(spec, x, th))
        total = term if total is None else dc.add(total, term)
    obj = dc.mul(total, 1.0 / (2 * pairs))
    return dc.backward(obj, wrt=[feats])[feats]


def gradient_matching_rhs(spec, u: Dataset, x: Dataset, theta, lr: float) -> np.ndarray:
    """-lr * d/du (grad l(x, theta)^T grad l(u, theta))."""
    theta = np.asarray(theta, dtype=np.float64)
    gx = loss_grad_value(spec, x, theta, with_prior=False)
    feats = dc.leaf(u.features)
    inner = dc.dot(loss_grad(spec, feats, u.labels, theta, with_prior=False), gx)
    return -lr * dc.backward(inner, wrt=[feats])[feats]


def verify_prop1(spec, u: Dataset, x: Dataset, theta, lr: float, sigma=0.01, pairs: int = 32, rng=None) -> Prop1Result:
    """Compare the surrogate reverse-KL gradient with the gradient-matching form."""
    lhs = surrogate_rkl_grad(spec, u, x, theta, lr, sigma, pairs, rng)
    rhs = gradient_matching_rhs(spec, u, x, theta, lr)
    num = float(np.linalg.norm(lhs - rhs))
    den = max(float(np.linalg.norm(rhs)), float(np.linalg.norm(lhs)))
    return Prop1Result(lhs, rhs, 0.0 if den == 0.0 else num / den)


# --- outer loop ------------------------------------------------------------

@dataclass
class DistillResult:
    coreset: Pseudocoreset
    reports: list
    objectives: list


def _streams(seed: int):
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(4)]


MAX_RESAMPLE = 10


def distill(
    spec: ModelSpec,
    data: Dataset,
    buffers: Sequence[TrajectoryBuffer],
    cfg: DistillConfig,
    size: int | None = None,
    ipc: int | None = None,
    init: Pseudocoreset | None = None,
    method_tag: str | None = None,
) -> DistillResult:
    """Run ``cfg.steps`` outer updates ``u <- u - outer_lr * grad``.

    For the gaussian-location family the exact rKL, fKL and W2^2 between the
    coreset posterior and the full-data posterior are logged at step 0, every
    ``cfg.log_interval`` steps and at the last step.
    """
    init_rng, seg_rng, noise_rng, batch_rng = _streams(cfg.seed)
    u = init if init is not None else init_pseudocoreset(data, init_rng, size=size, ipc=ipc)
    u = Pseudocoreset(u.features.copy(), u.labels, u.ipc)
    tag = method_tag or cfg.method
    oracle = exact_conjugate_posterior(spec, data) if spec.family == "gaussian-location" else None
    reports, objectives = [], []

    def _log(step):
        if oracle is not None:
            reports.extend(exact_divergences(step, tag, exact_conjugate_posterior(spec, u.features), oracle))

    _log(0)
    span = 0 if cfg.method == "dc" else cfg.expert_span
    for k in range(1, cfg.steps + 1):
        for attempt in range(MAX_RESAMPLE + 1):
            seg = sample_segment(buffers, cfg.effective_max_start, span, seg_rng)
            try:
                res = _method_step(spec, u, seg, data, cfg, noise_rng, batch_rng)
                break
            except DegenerateSegmentError:
                if attempt == MAX_RESAMPLE:
                    raise
                log.debug("degenerate segment at step %d, resampling", k)
        if not np.all(np.isfinite(res.grad)):
            raise NumericError(f"non-finite pseudocoreset gradient at outer step {k}")
        u.features = u.features - cfg.outer_lr * res.grad
        objectives.append(res.objective)
        if k % cfg.log_interval == 0 or k == cfg.steps:
            _log(k)
    return DistillResult(u, reports, objectives)


def _method_step(spec, u, seg, data, cfg, rng, batch_rng) -> StepResult:
    if cfg.method == "fkl":
        return fkl_step(spec, u, seg, cfg, rng)
    if cfg.method == "w":
        return w_step(spec, u, seg, cfg, rng)
    if cfg.method == "rkl":
        b = min(cfg.batch_size, len(data))
        batch = data if b == len(data) else data.subset(batch_rng.choice(len(data), b, replace=False))
        return rkl_step(spec, u, seg, batch, cfg, rng, full_size=len(data))
    # Gradient matching along a short trajectory trained on u.
    theta = np.array(seg.start)
    total = np.zeros_like(u.features)
    obj = 0.0
    for _ in range(cfg.inner_steps):
        r = dc_step(spec, u, data, theta, cfg)
        total += r.grad
        obj += r.objective
        theta = theta - cfg.inner_lr * loss_grad_value(spec, u.as_dataset(), theta, cfg.inner_prior)
    return StepResult(total, obj)


def with_method(cfg: DistillConfig, method: str, **overrides) -> DistillConfig:
    return replace(cfg, method=method, **overrides)
