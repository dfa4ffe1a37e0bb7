"""Ensemble optimizers on flat parameter vectors: Adam, consensus-based
updates, their hybrid, the multi-task variant, and the alpha / noise
schedules.

Updates are bulk-synchronous: every consensus point is formed from the
pre-step positions, then all particles move at once.  Per-particle noise comes
from the particle's own counter-based stream, so trajectories do not depend on
evaluation order or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import warnings

import numpy as np

from . import rng
from .network import NonFiniteError


@dataclass
class AdamState:
    """First/second moment estimates with bias-corrected steps."""

    dim: int
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8
    s: np.ndarray = field(init=False)
    r: np.ndarray = field(init=False)
    k: int = field(init=False, default=0)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1, beta2 must lie in [0, 1)")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        self.s = np.zeros(self.dim)
        self.r = np.zeros(self.dim)

    def displacement(self, grad: np.ndarray, dt: float) -> np.ndarray:
        """Advance the moments with `grad` and return the parameter step."""
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            bad = int(np.flatnonzero(~np.isfinite(grad))[0])
            raise NonFiniteError(f"non-finite gradient at index {bad}")
        self.s = self.beta1 * self.s + (1.0 - self.beta1) * grad
        self.r = self.beta2 * self.r + (1.0 - self.beta2) * grad * grad
        self.k += 1
        s_hat = self.s / (1.0 - self.beta1**self.k)
        r_hat = self.r / (1.0 - self.beta2**self.k)
        return -dt * (s_hat / (np.sqrt(r_hat) + self.delta))


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, dt: float) -> np.ndarray:
    """One Adam update; mutates `state`, returns the new parameters."""
    return theta + state.displacement(grad, dt)


@dataclass(frozen=True)
class CBOConfig:
    n_particles: int
    lam: float  # drift rate
    sigma: float  # diffusion scale
    alpha: float  # inverse temperature
    dt: float

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if min(self.lam, self.sigma, self.dt) <= 0 or self.alpha < 0:
            raise ValueError("lam, sigma, dt must be > 0 and alpha >= 0")
        if 2.0 * self.lam <= self.sigma**2:
            warnings.warn(
                f"2*lam = {2 * self.lam} <= sigma^2 = {self.sigma**2}: "
                "consensus formation is not guaranteed",
                stacklevel=2,
            )


@dataclass(frozen=True)
class HybridConfig:
    gamma: float
    cbo: CBOConfig
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass(frozen=True)
class ScheduleConfig:
    alpha_enabled: bool = True
    alpha_factor: float = 10.0
    alpha_every: int = 100
    alpha_cap: float = 1e7
    sigma_enabled: bool = False
    sigma_factor: float = 0.9
    sigma_every: int = 100

    def __post_init__(self):
        if self.alpha_factor <= 0 or self.sigma_factor <= 0:
            raise ValueError("schedule factors must be positive")
        if self.alpha_every < 1 or self.sigma_every < 1:
            raise ValueError("schedule periods must be >= 1")


def apply_schedules(cfg: CBOConfig, sched: ScheduleConfig, epoch: int) -> CBOConfig:
    """Config in effect at the start of `epoch` (pure in epoch, so idempotent).

    alpha is multiplied by its factor at each multiple of alpha_every until
    the cap; sigma decays by its factor at each multiple of sigma_every.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    alpha = cfg.alpha
    sigma = cfg.sigma
    if sched.alpha_enabled:
        alpha = min(cfg.alpha * sched.alpha_factor ** (epoch // sched.alpha_every), sched.alpha_cap)
    if sched.sigma_enabled:
        sigma = cfg.sigma * sched.sigma_factor ** (epoch // sched.sigma_every)
    if alpha == cfg.alpha and sigma == cfg.sigma:
        return cfg
    return replace(cfg, alpha=alpha, sigma=sigma)


@dataclass
class Ensemble:
    """N particle positions plus the stream bookkeeping for their noise."""

    positions: np.ndarray  # (N, P)
    seed: int
    step: int = 0

    def __post_init__(self):
        if self.positions.ndim != 2:
            raise ValueError("positions must be (N, P)")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]


def init_ensemble(n_particles: int, dim: int, seed: int, low: float = -1.0, high: float = 1.0) -> Ensemble:
    """Particles drawn i.i.d. uniform on [low, high]^dim, one stream each."""
    positions = np.stack(
        [rng.stream(seed, rng.INIT, n).uniform(low, high, size=dim) for n in range(n_particles)]
    )
    return Ensemble(positions, seed)


def gibbs_weights(risks: np.ndarray, alpha: float) -> np.ndarray:
    """Normalized exp(-alpha * risk) weights, computed with a min-shift.

    Shifting by the best risk leaves the weights unchanged mathematically and
    keeps them representable for alpha up to 1e12: the best particle always
    carries weight >= 1/N.
    """
    risks = np.asarray(risks, dtype=np.float64)
    if not np.all(np.isfinite(risks)):
        raise NonFiniteError("non-finite risk")
    w = np.exp(-alpha * (risks - risks.min()))
    return w / w.sum()


def consensus_point(positions: np.ndarray, risks: np.ndarray, alpha: float) -> np.ndarray:
    """Risk-weighted average of particle positions."""
    positions = np.asarray(positions)
    if positions.ndim != 2 or positions.shape[0] != len(risks):
        raise ValueError("positions must be (N, P) with one risk per particle")
    return gibbs_weights(risks, alpha) @ positions


def _noise(seed: int, step: int, n_particles: int, dim: int) -> np.ndarray:
    return np.stack(
        [rng.stream(seed, rng.NOISE, n, step).standard_normal(dim) for n in range(n_particles)]
    )


def cbo_displacement(
    positions: np.ndarray, consensus: np.ndarray, cfg: CBOConfig, xi: np.ndarray
) -> np.ndarray:
    """Drift toward the consensus plus componentwise multiplicative noise."""
    spread = positions - consensus
    return -cfg.lam * cfg.dt * spread + cfg.sigma * np.sqrt(cfg.dt) * spread * xi


def cbo_step(ens: Ensemble, consensus: np.ndarray, cfg: CBOConfig) -> None:
    """Advance every particle one step toward `consensus`; bumps ens.step."""
    if consensus.shape != (ens.positions.shape[1],):
        raise ValueError("consensus point length does not match particles")
    xi = _noise(ens.seed, ens.step, ens.n_particles, ens.positions.shape[1])
    ens.positions = ens.positions + cbo_displacement(ens.positions, consensus, cfg, xi)
    ens.step += 1


def hybrid_step(
    ens: Ensemble,
    adam_states: list[AdamState],
    consensus: np.ndarray,
    hcfg: HybridConfig,
    grads: np.ndarray,
) -> None:
    """Convex combination of a per-particle Adam step and a CBO step.

    `grads` holds each particle's gradient on the same minibatch that
    produced `consensus` (one batch drives both parts).  gamma = 1 reproduces
    per-particle Adam bitwise, gamma = 0 reproduces `cbo_step` bitwise (the
    noise streams are shared).
    """
    if len(adam_states) != ens.n_particles or grads.shape != ens.positions.shape:
        raise ValueError("need one Adam state and one gradient row per particle")
    cfg = hcfg.cbo
    xi = _noise(ens.seed, ens.step, ens.n_particles, ens.positions.shape[1])
    adam_disp = np.stack(
        [adam_states[n].displacement(grads[n], cfg.dt) for n in range(ens.n_particles)]
    )
    cbo_disp = cbo_displacement(ens.positions, consensus, cfg, xi)
    ens.positions = ens.positions + (hcfg.gamma * adam_disp + (1.0 - hcfg.gamma) * cbo_disp)
    ens.step += 1


def block_assignment(n_particles: int, n_tasks: int) -> np.ndarray:
    """Particle -> task map in contiguous blocks (particles 0..k-1 to task 0, ...)."""
    if n_particles % n_tasks != 0:
        raise ValueError(
            f"{n_particles} particles cannot be split evenly over {n_tasks} tasks"
        )
    return np.repeat(np.arange(n_tasks), n_particles // n_tasks)


def multitask_step(
    ens: Ensemble,
    task_risks: np.ndarray,
    cfg: CBOConfig,
    assignment: np.ndarray,
) -> np.ndarray:
    """One CBO step with a separate consensus point per task.

    `task_risks[p, n]` is particle n's risk on task p's current minibatch;
    every consensus point is formed from all N particles, then each particle
    moves toward the consensus of its assigned task.  Returns the (n_tasks, P)
    consensus points.
    """
    assignment = np.asarray(assignment)
    n_tasks = task_risks.shape[0]
    if assignment.shape != (ens.n_particles,):
        raise ValueError("assignment must map every particle to a task")
    if task_risks.shape[1] != ens.n_particles:
        raise ValueError("task_risks must be (n_tasks, n_particles)")
    if np.any((assignment < 0) | (assignment >= n_tasks)):
        raise ValueError("assignment references an unknown task")

    points = np.stack([consensus_point(ens.positions, task_risks[p], cfg.alpha) for p in range(n_tasks)])
    targets = points[assignment]
    xi = _noise(ens.seed, ens.step, ens.n_particles, ens.positions.shape[1])
    ens.positions = ens.positions + cbo_displacement(ens.positions, targets, cfg, xi)
    ens.step += 1
    return points
