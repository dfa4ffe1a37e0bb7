"""Exact optimal transport between uniform empirical measures, weighted
Wasserstein barycenters with free support, and the measure-space consensus
dynamics built on them.

Measures here have equal atom counts and uniform weights, so optimal couplings
are permutations and W2 reduces to an M x M linear assignment problem, solved
exactly (scipy's Jonker-Volgenant variant).  Barycenters are computed by the
classic alternation: fix couplings, move support points to the weighted means,
re-solve couplings; the objective is non-increasing and the scheme stops at a
fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import rng
from .network import EmpiricalMeasure


@dataclass(frozen=True)
class Assignment:
    """Optimal coupling between two uniform M-atom measures.

    `perm[j]` is the source-atom index matched with target atom j; `cost` is
    the mean squared distance over matched pairs, i.e. the squared W2.
    """

    perm: np.ndarray
    cost: float


def _atoms_of(m) -> np.ndarray:
    atoms = m.atoms if isinstance(m, EmpiricalMeasure) else np.asarray(m, dtype=np.float64)
    if atoms.ndim != 2:
        raise ValueError("expected an (M, dim) atom array")
    return atoms


def w2_empirical(mu, nu) -> tuple[float, Assignment]:
    """W2 distance between two uniform empirical measures and its coupling.

    Accepts `EmpiricalMeasure`s or raw (M, dim) atom arrays.  Atom counts must
    match; couplings between unequal supports are out of scope.
    """
    x = _atoms_of(mu)
    y = _atoms_of(nu)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"atom counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"atom dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    costs = cdist(y, x, "sqeuclidean")
    rows, cols = linear_sum_assignment(costs)
    w2_sq = float(costs[rows, cols].mean())
    return float(np.sqrt(w2_sq)), Assignment(cols, w2_sq)


@dataclass
class MeasureEnsemble:
    """N uniform empirical measures with Gibbs weights and noise streams."""

    input_dim: int
    output_dim: int
    atoms: np.ndarray  # (N, M, input_dim + 1 + output_dim)
    weights: np.ndarray  # (N,), nonnegative, sums to 1
    seed: int
    step: int = 0

    def __post_init__(self):
        if self.atoms.ndim != 3:
            raise ValueError("atoms must be (N, M, dim)")
        if self.atoms.shape[2] != self.input_dim + 1 + self.output_dim:
            raise ValueError("atom dimension does not match d+1+C")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.atoms.shape[0],):
            raise ValueError("need one weight per measure")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")

    @property
    def n_measures(self) -> int:
        return self.atoms.shape[0]

    @property
    def width(self) -> int:
        return self.atoms.shape[1]

    def measure(self, n: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.input_dim, self.output_dim, self.atoms[n].copy())


def init_measure_ensemble(
    n_measures: int,
    width: int,
    input_dim: int,
    seed: int,
    output_dim: int = 1,
    low: float = -2.0,
    high: float = 2.0,
) -> MeasureEnsemble:
    dim = input_dim + 1 + output_dim
    atoms = np.stack(
        [rng.stream(seed, rng.INIT, n).uniform(low, high, size=(width, dim)) for n in range(n_measures)]
    )
    weights = np.full(n_measures, 1.0 / n_measures)
    return MeasureEnsemble(input_dim, output_dim, atoms, weights, seed)


@dataclass
class Barycenter:
    support: np.ndarray  # (M, dim)
    assignments: np.ndarray  # (N, M); assignments[n, j] = atom of measure n at support j
    costs: np.ndarray  # (N,) squared W2 from each measure to the support
    f_value: float
    converged: bool
    residual: float
    trace: list[float]  # objective after every coupling solve; non-increasing

    @property
    def n_iters(self) -> int:
        return len(self.trace) - 1


def _solve_couplings(atoms: np.ndarray, support: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, m = atoms.shape[0], support.shape[0]
    perms = np.empty((n, m), dtype=np.intp)
    costs = np.empty(n)
    for i in range(n):
        c = cdist(support, atoms[i], "sqeuclidean")
        rows, cols = linear_sum_assignment(c)
        perms[i] = cols
        costs[i] = c[rows, cols].mean()
    return perms, costs


def _mean_under(atoms: np.ndarray, weights: np.ndarray, perms: np.ndarray) -> np.ndarray:
    gathered = atoms[np.arange(atoms.shape[0])[:, None], perms]  # (N, M, dim)
    return np.tensordot(weights, gathered, axes=1)


def barycenter(
    ens: MeasureEnsemble,
    tol: float = 1e-12,
    max_iters: int = 50,
    init_support: np.ndarray | None = None,
    residual_tol: float = 1e-9,
    restarts: int = 32,
) -> Barycenter:
    """Weighted free-support barycenter of the ensemble.

    With `init_support` given (the usual warm start inside a consensus loop,
    fed the previous step's support), a single alternation runs from there.
    Cold starts are multistarted: the alternation runs from every input
    measure's support, heaviest first, plus `restarts` seeded random
    candidates of stationary form (weighted means under random couplings),
    and the lowest objective wins; single-basin descent misses the global
    fixed point too often on small adversarial ensembles.

    Each run alternates coupling solves with support updates until the
    couplings stop changing, the objective stalls (relative decrease < tol),
    or max_iters; `converged` reports whether the first-order stationarity
    residual fell below `residual_tol`.
    """
    if init_support is not None:
        support = np.asarray(init_support, dtype=np.float64).copy()
        if support.shape != ens.atoms.shape[1:]:
            raise ValueError("init_support must be (M, dim)")
        return _descend(ens, support, tol, max_iters, residual_tol)

    order = np.argsort(-ens.weights, kind="stable")
    best = None
    for start in _candidate_starts(ens, order, restarts):
        result = _descend(ens, start, tol, max_iters, residual_tol)
        if best is None or result.f_value < best.f_value:
            best = result
    return best


def _candidate_starts(ens: MeasureEnsemble, order: np.ndarray, restarts: int):
    n_measures, m, _ = ens.atoms.shape
    for n in order:
        yield ens.atoms[n].copy()
    g = rng.stream(getattr(ens, "seed", 0), rng.BARYCENTER, step=getattr(ens, "step", 0))
    for _ in range(restarts):
        perms = np.stack([g.permutation(m) for _ in range(n_measures)])
        yield _mean_under(ens.atoms, ens.weights, perms)


def _descend(
    ens: MeasureEnsemble,
    support: np.ndarray,
    tol: float,
    max_iters: int,
    residual_tol: float,
) -> Barycenter:
    atoms = ens.atoms
    weights = ens.weights
    perms, costs = _solve_couplings(atoms, support)
    f_val = 0.5 * float(weights @ costs)
    trace = [f_val]
    for _ in range(max_iters):
        support = _mean_under(atoms, weights, perms)
        new_perms, costs = _solve_couplings(atoms, support)
        new_f = 0.5 * float(weights @ costs)
        trace.append(new_f)
        stable = np.array_equal(new_perms, perms)
        perms = new_perms
        prev_f, f_val = f_val, new_f
        if stable or prev_f - new_f < tol * max(abs(prev_f), 1.0):
            break

    residual = float(
        np.max(np.linalg.norm(_mean_under(atoms, weights, perms) - support, axis=1))
    )
    return Barycenter(
        support=support,
        assignments=perms,
        costs=costs,
        f_value=f_val,
        converged=residual <= residual_tol,
        residual=residual,
        trace=trace,
    )


def ot_cbo_step(ens: MeasureEnsemble, bary: Barycenter, lam: float, sigma: float, dt: float) -> None:
    """Move every atom along its coupling toward the barycenter, plus noise.

    Atom i of measure n heads for the barycenter atom coupled to it; the
    deterministic part is the geodesic interpolation, so lam * dt = 1 with
    sigma = 0 lands each measure exactly on the barycenter.  Noise is additive
    and isotropic (no multiplicative term), which is why the harness decays
    sigma on a schedule.
    """
    n, m, dim = ens.atoms.shape
    if bary.assignments.shape != (n, m):
        raise ValueError("barycenter was not computed against this ensemble")
    if not 0.0 < lam * dt <= 1.0:
        raise ValueError("need 0 < lam * dt <= 1")
    pull = lam * dt
    inv = np.empty(m, dtype=np.intp)
    new_atoms = np.empty_like(ens.atoms)
    for i in range(n):
        inv[bary.assignments[i]] = np.arange(m)
        targets = bary.support[inv]
        xi = rng.stream(ens.seed, rng.NOISE, i, ens.step).standard_normal((m, dim))
        new_atoms[i] = (1.0 - pull) * ens.atoms[i] + pull * targets + sigma * np.sqrt(dt) * xi
    ens.atoms = new_atoms
    ens.step += 1


def ensemble_variance(ens: MeasureEnsemble, bary: Barycenter) -> float:
    """Half the mean squared W2 distance from the measures to the barycenter.

    Couplings are re-solved here rather than reusing the barycenter's cached
    costs, so the value is honest even for a stale barycenter.
    """
    _, costs = _solve_couplings(ens.atoms, bary.support)
    return 0.5 * float(costs.mean())
