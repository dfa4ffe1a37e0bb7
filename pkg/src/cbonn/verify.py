"""Numerical verification suites: gradient oracle, exact-transport oracle,
barycenter stationarity, the Fréchet-mean identity, variance contraction of
the deterministic transport dynamics, and consensus-point limits.

Each check pits an implementation against an independent oracle (finite
differences, factorial brute force, exhaustive coupling search, closed forms)
on seeded random instances, so the suites are deterministic.  They are used
both by the CLI and by the acceptance tests.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .network import LossKind, NetworkShape, empirical_risk, gradient
from .optim import consensus_point, gibbs_weights
from .transport import (
    MeasureEnsemble,
    barycenter,
    ensemble_variance,
    ot_cbo_step,
    w2_empirical,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------------------
# Gradient vs central finite differences


def _fd_gradient(shape, theta, X, y, kind, h=1e-5):
    out = np.empty_like(theta)
    for i in range(len(theta)):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        out[i] = (empirical_risk(shape, up, X, y, kind) - empirical_risk(shape, down, X, y, kind)) / (2 * h)
    return out


def _gradient_instance(g, kind):
    # Keep every pre-activation away from the ReLU kink so the finite
    # difference stays a valid oracle at h = 1e-5.
    while True:
        d = int(g.integers(1, 6))
        m = int(g.integers(1, 21))
        c = 1 if kind is LossKind.SQUARED_ERROR else int(g.integers(2, 6))
        reduction = "mean" if g.random() < 0.5 else "sum"
        shape = NetworkShape(d, m, c, reduction)
        s = int(g.integers(1, 21))
        theta = g.uniform(-1, 1, shape.param_count)
        X = g.standard_normal((s, d))
        W = theta.reshape(m, shape.atom_dim)[:, :d]
        b = theta.reshape(m, shape.atom_dim)[:, d]
        if np.min(np.abs(X @ W.T + b)) < 1e-3:
            continue
        if kind is LossKind.SQUARED_ERROR:
            y = g.standard_normal(s)
        else:
            y = g.integers(0, c, size=s)
        return shape, theta, X, y


def check_gradients(n_instances: int = 100, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    g = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for i in range(n_instances):
        kind = LossKind.SQUARED_ERROR if i % 2 == 0 else LossKind.CROSS_ENTROPY
        shape, theta, X, y = _gradient_instance(g, kind)
        exact = gradient(shape, theta, X, y, kind)
        approx = _fd_gradient(shape, theta, X, y, kind)
        # 1e-5 floor guards the finite-difference roundoff on coordinates
        # whose true gradient is ~0.
        denom = np.maximum(np.maximum(np.abs(exact), np.abs(approx)), 1e-5)
        worst = max(worst, float(np.max(np.abs(exact - approx) / denom)))
    elapsed = time.perf_counter() - t0
    return CheckResult(
        "gradient-vs-finite-differences",
        worst <= tol,
        f"{n_instances} instances, max relative error {worst:.3e} (tol {tol:g}), {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Exact W2 vs factorial brute force


def _brute_force_w2sq(x, y):
    m = len(x)
    best = np.inf
    cost = np.array([[np.sum((y[j] - x[i]) ** 2) for i in range(m)] for j in range(m)])
    for perm in itertools.permutations(range(m)):
        best = min(best, cost[np.arange(m), perm].mean())
    return best


def check_w2(n_pairs: int = 200, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    g = np.random.default_rng(seed)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(n_pairs):
        m = int(g.integers(1, 8))
        dim = int(g.integers(1, 4))
        x = g.standard_normal((m, dim))
        y = g.standard_normal((m, dim))
        dist, asg = w2_empirical(x, y)
        ref = _brute_force_w2sq(x, y)
        worst = max(worst, abs(asg.cost - ref), abs(dist - np.sqrt(ref)))
    elapsed = time.perf_counter() - t0
    return CheckResult(
        "w2-vs-brute-force",
        worst <= tol,
        f"{n_pairs} pairs (M <= 7), max deviation {worst:.3e} (tol {tol:g}), {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Barycenter: monotone objective, stationarity, tiny-instance global match


def _raw_ensemble(atoms, weights, seed=0):
    # Atom dim bookkeeping (d + 1 + C) is irrelevant to the transport math;
    # zero-pad below three dims so a consistent split exists.  Padded
    # coordinates contribute nothing to any distance or mean.
    n, m, dim = atoms.shape
    if dim < 3:
        atoms = np.concatenate([atoms, np.zeros((n, m, 3 - dim))], axis=2)
    return MeasureEnsemble(atoms.shape[2] - 2, 1, atoms, weights, seed=seed)


def _exhaustive_barycenter_f(atoms, weights):
    from .transport import _solve_couplings

    n, m, dim = atoms.shape
    best = np.inf
    for combo in itertools.product(itertools.permutations(range(m)), repeat=n):
        support = np.zeros((m, dim))
        for i, perm in enumerate(combo):
            support += weights[i] * atoms[i][list(perm)]
        _, costs = _solve_couplings(atoms, support)
        best = min(best, 0.5 * float(weights @ costs))
    return best


def check_barycenter(
    n_ensembles: int = 100, n_tiny: int = 20, seed: int = 0, res_tol: float = 1e-9
) -> CheckResult:
    g = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_increase = -np.inf
    worst_residual = 0.0
    for i in range(n_ensembles):
        n = int(g.integers(2, 6))
        m = int(g.integers(1, 6))
        dim = int(g.integers(1, 5))
        atoms = g.standard_normal((n, m, dim))
        w = g.random(n)
        w /= w.sum()
        b = barycenter(_raw_ensemble(atoms, w, seed=i))
        steps = np.diff(b.trace)
        if steps.size:
            worst_increase = max(worst_increase, float(steps.max()))
        worst_residual = max(worst_residual, b.residual)
        if not b.converged:
            return CheckResult(
                "barycenter-stationarity", False, f"ensemble {i} failed to converge"
            )
    worst_gap = 0.0
    for i in range(n_tiny):
        gg = np.random.default_rng(seed + 1000 + i)
        atoms = gg.standard_normal((3, 3, 3))
        w = gg.random(3)
        w /= w.sum()
        b = barycenter(_raw_ensemble(atoms, w, seed=i))
        worst_gap = max(worst_gap, b.f_value - _exhaustive_barycenter_f(atoms, w))
    elapsed = time.perf_counter() - t0
    passed = worst_increase <= 1e-12 and worst_residual <= res_tol and worst_gap <= 1e-9
    return CheckResult(
        "barycenter-stationarity",
        passed,
        f"{n_ensembles} ensembles: max objective increase {worst_increase:.2e}, "
        f"max residual {worst_residual:.2e}; {n_tiny} tiny instances: "
        f"max gap to exhaustive search {worst_gap:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Fréchet-mean identity: single-atom barycenter == consensus point


def check_frechet_mean(n_instances: int = 100, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    g = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        n = int(g.integers(2, 9))
        dim = int(g.integers(1, 6))
        atoms = g.standard_normal((n, 1, dim))
        risks = g.random(n)
        alpha = float(g.choice([0.0, 1.0, 10.0]))
        weights = gibbs_weights(risks, alpha)
        ens = _raw_ensemble(atoms, weights, seed=i)
        b = barycenter(ens)
        point = consensus_point(atoms[:, 0, :], risks, alpha)
        worst = max(worst, float(np.max(np.abs(b.support[0, :dim] - point))))
    return CheckResult(
        "frechet-mean-identity",
        worst <= tol,
        f"{n_instances} single-atom ensembles, max deviation {worst:.3e} (tol {tol:g})",
    )


# ---------------------------------------------------------------------------
# Variance contraction of the deterministic transport dynamics


def check_variance_contraction(
    n_runs: int = 50, n_steps: int = 20, seed: int = 0, slack: float = 1e-10
) -> CheckResult:
    dts = [0.25, 0.5, 1.0]
    worst_excess = -np.inf
    worst_dt1 = 0.0
    for run in range(n_runs):
        dt = dts[run % len(dts)]
        g = np.random.default_rng(seed + run)
        atoms = g.uniform(-2, 2, size=(8, 4, 3))
        ens = MeasureEnsemble(1, 1, atoms, np.full(8, 1 / 8), seed=run)
        b = barycenter(ens)
        v_prev = ensemble_variance(ens, b)
        for k in range(n_steps):
            ot_cbo_step(ens, b, lam=1.0, sigma=0.0, dt=dt)
            b = barycenter(ens, init_support=b.support)
            v = ensemble_variance(ens, b)
            worst_excess = max(worst_excess, v - (1.0 - dt) ** 2 * v_prev)
            if dt == 1.0 and k == 0:
                worst_dt1 = max(worst_dt1, v)
            v_prev = v
    passed = worst_excess <= slack and worst_dt1 <= 1e-20
    return CheckResult(
        "variance-contraction",
        passed,
        f"{n_runs} runs x {n_steps} steps, dt in {dts}: worst excess over "
        f"(1-dt)^2 bound {worst_excess:.2e} (slack {slack:g}); "
        f"worst variance after one dt=1 step {worst_dt1:.2e}",
    )


# ---------------------------------------------------------------------------
# Consensus-point limits


def check_consensus_limits(n_instances: int = 50, seed: int = 0) -> CheckResult:
    g = np.random.default_rng(seed)
    worst_argmin = 0.0
    worst_mean = 0.0
    worst_shift = 0.0
    for _ in range(n_instances):
        n = int(g.integers(2, 30))
        p = int(g.integers(1, 20))
        positions = g.standard_normal((n, p))
        risks = g.permutation(n) * 1e-3 + g.random() + 0.1  # distinct, spaced >= 1e-3
        best = positions[int(np.argmin(risks))]
        sharp = consensus_point(positions, risks, 1e12)
        scale = max(1.0, float(np.max(np.abs(best))))
        worst_argmin = max(worst_argmin, float(np.max(np.abs(sharp - best))) / scale)
        flat = consensus_point(positions, risks, 0.0)
        worst_mean = max(worst_mean, float(np.max(np.abs(flat - positions.mean(axis=0)))))
        alpha = float(g.uniform(0.5, 5.0))
        shifted = consensus_point(positions, risks + 123.456, alpha)
        worst_shift = max(
            worst_shift, float(np.max(np.abs(shifted - consensus_point(positions, risks, alpha))))
        )
    passed = worst_argmin <= 1e-9 and worst_mean <= 1e-12 and worst_shift <= 1e-12
    return CheckResult(
        "consensus-limits",
        passed,
        f"{n_instances} instances: argmin deviation {worst_argmin:.2e} (tol 1e-9), "
        f"mean deviation {worst_mean:.2e} (tol 1e-12), "
        f"risk-shift deviation {worst_shift:.2e} (tol 1e-12)",
    )


SUITES = {
    "gradient": check_gradients,
    "w2": check_w2,
    "barycenter": check_barycenter,
    "prop1": check_frechet_mean,
    "prop3": check_variance_contraction,
    "consensus": check_consensus_limits,
}


def run_suites(names=None) -> list[CheckResult]:
    chosen = SUITES if names is None else {k: SUITES[k] for k in names}
    return [fn() for fn in chosen.values()]
