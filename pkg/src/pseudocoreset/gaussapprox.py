"""Gaussian approximations of posteriors and divergences between Gaussians.

``GaussianApprox`` stores the covariance in the cheapest form that describes
it (isotropic variance, diagonal, or a full matrix for small dimensions).
Binary operations promote both operands to the richer of the two kinds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .models import Dataset, ModelSpec, NumericError, loss, loss_grad_value

COV_KINDS = ("isotropic", "diagonal", "full")
_RANK = {k: i for i, k in enumerate(COV_KINDS)}
MAX_FULL_DIM = 64


class DecompositionError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianApprox:
    mean: np.ndarray
    kind: str
    cov: np.ndarray  # shape () / (D,) / (D, D) depending on kind

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        d = mean.shape[0]
        if self.kind == "isotropic":
            if cov.ndim != 0 or not cov > 0:
                raise DecompositionError("isotropic variance must be a positive scalar")
        elif self.kind == "diagonal":
            if cov.shape != (d,) or np.any(cov <= 0):
                raise DecompositionError("diagonal covariance needs D positive entries")
        elif self.kind == "full":
            if cov.shape != (d, d):
                raise ValueError(f"full covariance must be ({d},{d})")
            if d > MAX_FULL_DIM:
                raise ValueError(f"full covariance limited to D <= {MAX_FULL_DIM}")
            if not np.allclose(cov, cov.T, atol=1e-12, rtol=1e-10):
                raise DecompositionError("covariance not symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise DecompositionError("covariance not positive definite") from exc
        else:
            raise ValueError(f"unknown covariance kind {self.kind!r}")

    @classmethod
    def isotropic(cls, mean, var: float) -> "GaussianApprox":
        return cls(mean, "isotropic", np.float64(var))

    @classmethod
    def diagonal(cls, mean, var) -> "GaussianApprox":
        return cls(mean, "diagonal", var)

    @classmethod
    def full(cls, mean, cov) -> "GaussianApprox":
        return cls(mean, "full", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def as_kind(self, kind: str) -> "GaussianApprox":
        if _RANK[kind] < _RANK[self.kind]:
            raise ValueError(f"cannot demote {self.kind} to {kind}")
        if kind == self.kind:
            return self
        return GaussianApprox(self.mean, kind, self._cov_as(kind))

    def _cov_as(self, kind: str) -> np.ndarray:
        if kind == "diagonal":
            return np.full(self.dim, float(self.cov)) if self.kind == "isotropic" else self.cov
        if self.kind == "full":
            return self.cov
        return np.diag(np.broadcast_to(self.cov, (self.dim,)))

    def cov_matrix(self) -> np.ndarray:
        return self._cov_as("full") if self.kind != "full" else self.cov

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        if self.kind == "full":
            return self.mean + eps @ np.linalg.cholesky(self.cov).T
        return self.mean + eps * np.sqrt(self.cov)

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        r = x - self.mean
        d = self.dim
        if self.kind == "full":
            chol = np.linalg.cholesky(self.cov)
            z = np.linalg.solve(chol, r.T).T
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        else:
            var = np.broadcast_to(self.cov, (d,))
            z = r / np.sqrt(var)
            logdet = float(np.sum(np.log(var)))
        return -0.5 * (np.sum(z * z, axis=1) + logdet + d * math.log(2 * math.pi))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "kind": self.kind, "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "GaussianApprox":
        return cls(np.array(obj["mean"], dtype=np.float64), obj["kind"], np.array(obj["cov"], dtype=np.float64))


def _promote(p: GaussianApprox, q: GaussianApprox):
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    kind = max(p.kind, q.kind, key=_RANK.__getitem__)
    return p.as_kind(kind), q.as_kind(kind), kind


def gaussian_kl(p: GaussianApprox, q: GaussianApprox) -> float:
    """KL[p || q] in closed form."""
    p, q, kind = _promote(p, q)
    d = p.dim
    diff = q.mean - p.mean
    if kind != "full":
        vp = np.broadcast_to(p.cov, (d,))
        vq = np.broadcast_to(q.cov, (d,))
        ratio = vp / vq
        val = 0.5 * (np.sum(ratio) + np.sum(diff * diff / vq) - d - np.sum(np.log(ratio)))
        return float(val)
    try:
        lp = np.linalg.cholesky(p.cov)
        lq = np.linalg.cholesky(q.cov)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(str(exc)) from exc
    a = np.linalg.solve(lq, lp)
    b = np.linalg.solve(lq, diff)
    logdet = 2.0 * (np.sum(np.log(np.diag(lq))) - np.sum(np.log(np.diag(lp))))
    return float(0.5 * (np.sum(a * a) + b @ b - d + logdet))


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    if w.min() < -1e-10 * max(1.0, abs(w.max())):
        raise DecompositionError("matrix square root of a non-PSD matrix")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_w2_squared(p: GaussianApprox, q: GaussianApprox) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    ``||m_p - m_q||^2 + Tr(C_p + C_q - 2 (C_p^{1/2} C_q C_p^{1/2})^{1/2})``.
    """
    p, q, kind = _promote(p, q)
    diff = p.mean - q.mean
    mean_term = float(diff @ diff)
    if kind != "full":
        d = p.dim
        sp = np.sqrt(np.broadcast_to(p.cov, (d,)))
        sq = np.sqrt(np.broadcast_to(q.cov, (d,)))
        return mean_term + float(np.sum((sp - sq) ** 2))
    if np.array_equal(p.cov, q.cov):
        return mean_term
    root_p = _sqrtm_psd(p.cov)
    cross = _sqrtm_psd(root_p @ q.cov @ root_p)
    trace = np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross)
    return mean_term + float(max(trace, 0.0))


@dataclass(frozen=True)
class KLEstimate:
    value: float
    stderr: float


def mc_kl_estimate(
    sample_p: Callable[[int], np.ndarray],
    log_p: Callable[[np.ndarray], np.ndarray],
    log_q: Callable[[np.ndarray], np.ndarray],
    n: int,
    chunk: int = 200_000,
) -> KLEstimate:
    """Monte-Carlo KL[p || q] = E_p[log p - log q] with its standard error."""
    if n < 1:
        raise ValueError("need at least one sample")
    total = total_sq = 0.0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        x = sample_p(k)
        r = log_p(x) - log_q(x)
        total += float(r.sum())
        total_sq += float((r * r).sum())
        done += k
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    se = math.sqrt(var / (n - 1)) if n > 1 else math.inf
    return KLEstimate(mean, se)


def mc_kl_between(p: GaussianApprox, q: GaussianApprox, n: int, rng: np.random.Generator) -> KLEstimate:
    return mc_kl_estimate(lambda k: p.sample(rng, k), p.log_density, q.log_density, n)


def mc_w2_squared(p: GaussianApprox, q: GaussianApprox, n: int, rng: np.random.Generator) -> KLEstimate:
    """Monte-Carlo W2^2 through the optimal linear coupling x -> m_q + T (x - m_p).

    Only the coupling map uses matrix square roots; the expectation of
    ``||x - T(x)||^2`` is estimated by sampling, so it cross-checks the closed
    form's trace algebra.
    """
    p, q, _ = _promote(p, q)
    cp, cq = p.cov_matrix(), q.cov_matrix()
    root_p = _sqrtm_psd(cp)
    inv_root_p = np.linalg.inv(root_p)
    t = inv_root_p @ _sqrtm_psd(root_p @ cq @ root_p) @ inv_root_p
    x = p.sample(rng, n)
    y = q.mean + (x - p.mean) @ t.T
    r = np.sum((x - y) ** 2, axis=1)
    return KLEstimate(float(r.mean()), float(r.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf)


@dataclass
class SGDFit:
    approx: GaussianApprox
    trajectory: np.ndarray  # (L+1, D), row 0 is the initial point
    losses: np.ndarray


def make_cov(kind: str, scale: float | np.ndarray, dim: int, mean) -> GaussianApprox:
    """Gaussian with standard deviation ``scale`` (scalar or per-coordinate)."""
    scale = np.asarray(scale, dtype=np.float64)
    if kind == "isotropic":
        return GaussianApprox.isotropic(mean, float(scale) ** 2)
    if kind == "diagonal":
        return GaussianApprox.diagonal(mean, np.broadcast_to(scale, (dim,)) ** 2)
    if kind == "full":
        return GaussianApprox.full(mean, np.diag(np.broadcast_to(scale, (dim,)) ** 2))
    raise ValueError(kind)


def fit_sgd_gaussian(
    spec: ModelSpec,
    data: Dataset,
    theta_init,
    steps: int,
    lr: float,
    cov_kind: str = "isotropic",
    cov_scale: float | np.ndarray = 0.01,
    with_prior: bool = True,
) -> SGDFit:
    """Full-batch gradient descent on the loss, wrapped in a Gaussian at the endpoint.

    The covariance is a fixed hyperparameter (standard deviation ``cov_scale``),
    not estimated from the run.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    theta = np.array(theta_init.flat if hasattr(theta_init, "flat") else theta_init, dtype=np.float64)
    traj = [theta.copy()]
    losses = [float(loss(spec, data, theta, with_prior=with_prior).value)]
    for t in range(1, steps + 1):
        theta = theta - lr * loss_grad_value(spec, data, theta, with_prior)
        if not np.all(np.isfinite(theta)):
            raise NumericError(f"gradient descent diverged at step {t}")
        traj.append(theta.copy())
        losses.append(float(loss(spec, data, theta, with_prior=with_prior).value))
    return SGDFit(make_cov(cov_kind, cov_scale, theta.shape[0], theta), np.array(traj), np.array(losses))


DIVERGENCE_KINDS = ("rKL", "fKL", "W2")


@dataclass(frozen=True)
class DivergenceReport:
    step: int
    method: str
    kind: str
    value: float
    exact: bool

    def __post_init__(self):
        if self.kind not in DIVERGENCE_KINDS:
            raise ValueError(f"unknown divergence kind {self.kind!r}")
        if self.value < -1e-10:
            raise ValueError(f"negative divergence {self.value}")

    def row(self) -> list[str]:
        return [str(self.step), self.method, self.kind, repr(float(self.value)), str(int(self.exact))]


REPORT_HEADER = ["step", "method", "kind", "value", "exact"]


def exact_divergences(step: int, method: str, approx_u: GaussianApprox, approx_x: GaussianApprox) -> list[DivergenceReport]:
    """rKL = KL[pi_u || pi_x], fKL = KL[pi_x || pi_u] and W2^2, all in closed form."""
    return [
        DivergenceReport(step, method, "rKL", max(gaussian_kl(approx_u, approx_x), 0.0), True),
        DivergenceReport(step, method, "fKL", max(gaussian_kl(approx_x, approx_u), 0.0), True),
        DivergenceReport(step, method, "W2", gaussian_w2_squared(approx_u, approx_x), True),
    ]


def write_reports(path_or_file, reports: Iterable[DivergenceReport], header: bool = True) -> None:
    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _write(fh)


def read_reports(path) -> list[DivergenceReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        DivergenceReport(int(r["step"]), r["method"], r["kind"], float(r["value"]), r["exact"] == "1")
        for r in rows
    ]
