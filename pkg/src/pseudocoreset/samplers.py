"""Posterior samplers over model parameters given a (pseudo)coreset.

Potential energy is U(u, theta) = -1^T f(u, theta) + lambda ||theta||^2.
Kinetic energy assumes unit mass even though momenta are drawn with scale
``sigma_r``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .models import Augmentation, Dataset, ModelSpec, augment, potential_energy

log = logging.getLogger(__name__)


@dataclass
class HMCConfig:
    iterations: int = 100
    leapfrog_steps: int = 5
    step_size: float = 0.01
    init_scale: float = 0.1  # sigma_theta
    momentum_scale: float = 0.1  # sigma_r
    weight_decay: float = 1.5  # lambda
    burn_in: int = 50

    def __post_init__(self):
        if self.leapfrog_steps < 1 or self.step_size <= 0:
            raise ValueError("need leapfrog_steps >= 1 and step_size > 0")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")


@dataclass
class SGHMCConfig(HMCConfig):
    momentum_decay: float = 0.1  # alpha
    noise: float = 0.01  # T
    augmentation: str = "identity"

    def __post_init__(self):
        super().__post_init__()
        if not 0 < self.momentum_decay < 1:
            raise ValueError("momentum_decay must lie in (0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        Augmentation.parse(self.augmentation)


@dataclass
class Chain:
    samples: np.ndarray  # (iterations - burn_in, D)
    potentials: np.ndarray  # one per iteration
    accepted: int = 0
    proposals: int = 0
    diagnostics: list = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else float("nan")

    def __len__(self) -> int:
        return self.samples.shape[0]


def potential_and_grad(spec: ModelSpec, data: Dataset, theta: np.ndarray, lam: float, feats=None):
    th = dc.leaf(theta)
    u = potential_energy(spec, data, th, lam, feats)
    return float(u.value), dc.backward(u, wrt=[th])[th]


def leapfrog(grad_u, theta: np.ndarray, r: np.ndarray, step: float, n: int):
    """``n`` leapfrog steps with half-step momentum updates at both ends."""
    theta = theta.copy()
    r = r - 0.5 * step * grad_u(theta)
    for i in range(n):
        theta = theta + step * r
        if i < n - 1:
            r = r - step * grad_u(theta)
    r = r - 0.5 * step * grad_u(theta)
    return theta, r


def mh_accept(log_rho: float, rng: np.random.Generator) -> bool:
    """Metropolis test: accept with probability min(1, exp(log_rho))."""
    return bool(np.log(rng.random()) < min(0.0, log_rho))


def hmc_sample(spec: ModelSpec, coreset: Dataset, cfg: HMCConfig, rng: np.random.Generator) -> Chain:
    """Full-batch HMC with a Metropolis-Hastings correction."""
    if len(coreset) == 0:
        raise ValueError("coreset is empty")
    lam = cfg.weight_decay

    def energy(th):
        try:
            with np.errstate(all="ignore"):
                return potential_and_grad(spec, coreset, th, lam)
        except FloatingPointError:
            return np.inf, np.full_like(th, np.nan)

    def grad_u(th):
        return energy(th)[1]

    theta = cfg.init_scale * rng.standard_normal(spec.param_dim)
    u_cur = energy(theta)[0]
    kept, pots, diags = [], [], []
    accepted = 0
    for t in range(cfg.iterations):
        r = cfg.momentum_scale * rng.standard_normal(theta.shape[0])
        h_cur = u_cur + 0.5 * float(r @ r)
        with np.errstate(all="ignore"):
            prop, r_new = leapfrog(grad_u, theta, r, cfg.step_size, cfg.leapfrog_steps)
        u_prop = energy(prop)[0] if np.all(np.isfinite(prop)) else np.inf
        h_prop = u_prop + 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        # H is an energy here, so the acceptance ratio is exp(H_cur - H_prop).
        log_rho = h_cur - h_prop
        if not np.isfinite(h_prop):
            diags.append((t, "non-finite Hamiltonian, proposal rejected"))
        elif mh_accept(log_rho, rng):
            theta, u_cur = prop, u_prop
            accepted += 1
        pots.append(u_cur)
        if t >= cfg.burn_in:
            kept.append(theta.copy())
    return Chain(np.array(kept), np.array(pots), accepted, cfg.iterations, diags)


def asghmc_sample(spec: ModelSpec, coreset: Dataset, cfg: SGHMCConfig, rng: np.random.Generator) -> Chain:
    """SGHMC where the gradient noise comes from re-augmenting a fixed coreset."""
    if len(coreset) == 0:
        raise ValueError("coreset is empty")
    aug = Augmentation.parse(cfg.augmentation)
    alpha, lam, eps = cfg.momentum_decay, cfg.weight_decay, cfg.step_size
    noise_sd = np.sqrt(2.0 * alpha * cfg.noise)
    theta = cfg.init_scale * rng.standard_normal(spec.param_dim)
    r = cfg.momentum_scale * rng.standard_normal(spec.param_dim)
    kept, pots, diags = [], [], []
    for t in range(cfg.iterations):
        u_val = np.nan
        for _ in range(cfg.leapfrog_steps):
            theta = theta + eps * r
            feats = augment(coreset.features, aug, rng)
            try:
                with np.errstate(all="ignore"):
                    u_val, g = potential_and_grad(spec, coreset, theta, lam, feats=feats)
            except FloatingPointError:
                u_val, g = np.nan, np.zeros_like(theta)
            r = (1.0 - alpha) * r - eps * g + noise_sd * rng.standard_normal(r.shape[0])
        if not (np.isfinite(u_val) and np.all(np.isfinite(theta))):
            diags.append((t, "non-finite state"))
        pots.append(u_val)
        if t >= cfg.burn_in:
            kept.append(theta.copy())
    return Chain(np.array(kept), np.array(pots), 0, 0, diags)
