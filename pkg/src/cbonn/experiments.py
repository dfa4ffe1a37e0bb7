"""Experiment harness: seeded runs of the four benchmark experiments, per-epoch
risk records, multi-seed aggregation, and tidy CSV emission.

Each run is a pure function of its resolved config and seed; the per-run CSV
holds only reproducible columns (wall-clock times go to the sidecar metadata
file, which also echoes the exact config needed to reproduce the CSV byte for
byte).
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__, config as cfgmod, rng
from .data import (
    Dataset,
    MinibatchSampler,
    gen_class_images,
    gen_shifted_sines,
    gen_sine,
    gen_square,
    load_mnist_idx,
)
from .network import (
    EmpiricalMeasure,
    LossKind,
    NetworkShape,
    NonFiniteError,
    batch_losses,
    empirical_risk,
    forward_batch,
    gradient,
    measure_risk,
)
from .optim import (
    AdamState,
    CBOConfig,
    Ensemble,
    HybridConfig,
    ScheduleConfig,
    adam_step,
    apply_schedules,
    block_assignment,
    cbo_step,
    consensus_point,
    gibbs_weights,
    hybrid_step,
    init_ensemble,
    multitask_step,
)
from .transport import MeasureEnsemble, barycenter, init_measure_ensemble, ot_cbo_step


@dataclass
class RunRecord:
    config: dict
    seed: int
    risk_columns: list[str]
    epochs: np.ndarray  # (rows,)
    risks: np.ndarray  # (rows, len(risk_columns))
    alphas: np.ndarray
    sigmas: np.ndarray
    wall_ms: np.ndarray  # excluded from the data CSV; see metadata
    completed: bool = True
    abort_reason: str | None = None
    notes: dict | None = None


@dataclass
class AggregateRecord:
    experiment: str
    method: str
    epochs: np.ndarray
    stats: dict[str, np.ndarray]
    seed_count: int


def _pool_map(fn, count: int, workers: int) -> list:
    """Ordered map over range(count); the kernel is identical with and
    without the thread pool, so results are bitwise independent of workers."""
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(count)))


def _ensemble_risks(shape, positions, X, y, kind, workers) -> np.ndarray:
    return np.array(
        _pool_map(lambda n: empirical_risk(shape, positions[n], X, y, kind), len(positions), workers)
    )


def _ensemble_preds(shape, positions, X, workers) -> list[np.ndarray]:
    return _pool_map(lambda n: forward_batch(shape, positions[n], X), len(positions), workers)


def _risks_from_preds(kind, y, preds) -> np.ndarray:
    return np.array([float(np.mean(batch_losses(kind, y, p))) for p in preds])


def _ensemble_grads(shape, positions, X, y, kind, workers) -> np.ndarray:
    return np.stack(
        _pool_map(lambda n: gradient(shape, positions[n], X, y, kind), len(positions), workers)
    )


def _fan_in_init(shape: NetworkShape, seed: int) -> np.ndarray:
    """Documented stand-in for a framework default: per-block fan-in uniform.

    w, b ~ U[-1/sqrt(d), 1/sqrt(d)]; c ~ U[-1/sqrt(M), 1/sqrt(M)].
    """
    g = rng.stream(seed, rng.INIT)
    table = g.uniform(-1.0, 1.0, size=(shape.width, shape.atom_dim))
    d = shape.input_dim
    table[:, : d + 1] /= np.sqrt(d)
    table[:, d + 1 :] /= np.sqrt(shape.width)
    return table.reshape(-1)


def build_dataset(cfg: dict, seed: int):
    """Dataset (or TaskSet) for the config; returns (data, loss_kind, notes)."""
    data = cfg["data"]
    exp = cfg["experiment"]
    if exp == "sine":
        return gen_sine(data["size"], data["noise_std"], seed), LossKind.SQUARED_ERROR, {}
    if exp == "square_ot":
        return gen_square(data["size"], data["noise_std"], seed), LossKind.SQUARED_ERROR, {}
    if exp == "multitask":
        return gen_shifted_sines(data["tasks"], data["size"], seed), LossKind.SQUARED_ERROR, {}
    if exp == "mnist":
        if data["images"] and data["labels"]:
            ds = load_mnist_idx(data["images"], data["labels"], data["subset"])
            notes = {"data_source": "idx_files", "pixel_scaling": "1/255"}
        else:
            ds = gen_class_images(data["subset"], seed)
            notes = {"data_source": "synthetic_stand_in", "pixel_scaling": "unit_interval"}
        return ds, LossKind.CROSS_ENTROPY, notes
    raise cfgmod.ConfigError(f"unknown experiment {exp!r}")


def _make_cbo_config(cfg: dict) -> tuple[CBOConfig, ScheduleConfig]:
    opt, sch = cfg["optimizer"], cfg["schedule"]
    base = CBOConfig(opt["particles"], opt["lam"], opt["sigma"], opt["alpha"], opt["dt"])
    sched = ScheduleConfig(
        alpha_enabled=sch["alpha_enabled"],
        alpha_factor=sch["alpha_factor"],
        alpha_every=sch["alpha_every"],
        alpha_cap=sch["alpha_cap"],
        sigma_enabled=sch["sigma_enabled"],
        sigma_factor=sch["sigma_factor"],
        sigma_every=sch["sigma_every"],
    )
    return base, sched


class _Recorder:
    def __init__(self, columns):
        self.columns = columns
        self.rows: list[tuple] = []
        self.t0 = time.perf_counter()

    def add(self, epoch, risks, alpha, sigma):
        now = (time.perf_counter() - self.t0) * 1e3
        self.rows.append((epoch, tuple(np.atleast_1d(risks)), alpha, sigma, now))
        return all(np.isfinite(np.atleast_1d(risks)))

    def build(self, cfg, seed, completed=True, abort_reason=None, notes=None) -> RunRecord:
        epochs = np.array([r[0] for r in self.rows], dtype=np.int64)
        risks = np.array([r[1] for r in self.rows])
        alphas = np.array([r[2] for r in self.rows])
        sigmas = np.array([r[3] for r in self.rows])
        wall = np.array([r[4] for r in self.rows])
        return RunRecord(
            cfg, seed, self.columns, epochs, risks, alphas, sigmas, wall,
            completed=completed, abort_reason=abort_reason, notes=notes or {},
        )


def _train_adam(cfg: dict, seed: int, ds: Dataset, kind: LossKind) -> RunRecord:
    shape = NetworkShape(ds.input_dim, cfg["network"]["width"], ds.output_dim, cfg["network"]["reduction"])
    opt = cfg["optimizer"]
    theta = _fan_in_init(shape, seed)
    state = AdamState(shape.param_count, opt["beta1"], opt["beta2"], opt["delta"])
    sampler = MinibatchSampler(ds.size, cfg["data"]["batch_size"], seed)
    rec = _Recorder(["risk"])
    rec.add(0, empirical_risk(shape, theta, ds.inputs, ds.targets, kind), opt["alpha"], opt["sigma"])
    try:
        for epoch in range(cfg["epochs"]):
            for _ in range(sampler.batches_per_epoch):
                idx = sampler.next_indices()
                grad = gradient(shape, theta, ds.inputs[idx], ds.targets[idx], kind)
                theta = adam_step(state, theta, grad, opt["dt"])
            risk = empirical_risk(shape, theta, ds.inputs, ds.targets, kind)
            if not rec.add(epoch + 1, risk, opt["alpha"], opt["sigma"]):
                return rec.build(cfg, seed, completed=False, abort_reason="non-finite risk")
    except NonFiniteError as err:
        return rec.build(cfg, seed, completed=False, abort_reason=str(err))
    return rec.build(cfg, seed)


def _consensus_risk(shape, ens, ds, kind, alpha, workers) -> float:
    risks = _ensemble_risks(shape, ens.positions, ds.inputs, ds.targets, kind, workers)
    point = consensus_point(ens.positions, risks, alpha)
    return empirical_risk(shape, point, ds.inputs, ds.targets, kind)


def _train_cbo(cfg: dict, seed: int, ds: Dataset, kind: LossKind) -> RunRecord:
    shape = NetworkShape(ds.input_dim, cfg["network"]["width"], ds.output_dim, cfg["network"]["reduction"])
    opt = cfg["optimizer"]
    base, sched = _make_cbo_config(cfg)
    hybrid = cfg["method"] == "hybrid"
    hcfg = HybridConfig(opt["gamma"], base, opt["beta1"], opt["beta2"], opt["delta"]) if hybrid else None
    workers = cfg["workers"]

    ens = init_ensemble(base.n_particles, shape.param_count, seed, opt["init_low"], opt["init_high"])
    states = [AdamState(shape.param_count, opt["beta1"], opt["beta2"], opt["delta"])
              for _ in range(base.n_particles)] if hybrid else None
    sampler = MinibatchSampler(ds.size, cfg["data"]["batch_size"], seed)
    rec = _Recorder(["risk"])
    cur = apply_schedules(base, sched, 0)
    rec.add(0, _consensus_risk(shape, ens, ds, kind, cur.alpha, workers), cur.alpha, cur.sigma)
    try:
        for epoch in range(cfg["epochs"]):
            cur = apply_schedules(base, sched, epoch)
            hcur = HybridConfig(hcfg.gamma, cur, hcfg.beta1, hcfg.beta2, hcfg.delta) if hybrid else None
            for _ in range(sampler.batches_per_epoch):
                idx = sampler.next_indices()
                X, y = ds.inputs[idx], ds.targets[idx]
                risks = _ensemble_risks(shape, ens.positions, X, y, kind, workers)
                point = consensus_point(ens.positions, risks, cur.alpha)
                if hybrid:
                    grads = _ensemble_grads(shape, ens.positions, X, y, kind, workers)
                    hybrid_step(ens, states, point, hcur, grads)
                else:
                    cbo_step(ens, point, cur)
            risk = _consensus_risk(shape, ens, ds, kind, cur.alpha, workers)
            if not rec.add(epoch + 1, risk, cur.alpha, cur.sigma):
                return rec.build(cfg, seed, completed=False, abort_reason="non-finite risk")
    except NonFiniteError as err:
        return rec.build(cfg, seed, completed=False, abort_reason=str(err))
    return rec.build(cfg, seed)


def _train_multitask(cfg: dict, seed: int, taskset, kind: LossKind) -> RunRecord:
    first = taskset.tasks[0]
    shape = NetworkShape(first.input_dim, cfg["network"]["width"], first.output_dim, cfg["network"]["reduction"])
    opt = cfg["optimizer"]
    base, sched = _make_cbo_config(cfg)
    workers = cfg["workers"]
    n_tasks = taskset.n_tasks

    ens = init_ensemble(base.n_particles, shape.param_count, seed, opt["init_low"], opt["init_high"])
    assignment = block_assignment(base.n_particles, n_tasks)
    # Tasks share their inputs, so one sampler drives every task's minibatch
    # and each particle prediction is reused across all task risks.
    sampler = MinibatchSampler(first.size, cfg["data"]["batch_size"], seed)
    targets = np.stack([t.targets for t in taskset.tasks])  # (P, S)

    def epoch_row(alpha):
        preds = _ensemble_preds(shape, ens.positions, first.inputs, workers)
        rows = []
        for p in range(n_tasks):
            risks = _risks_from_preds(kind, targets[p], preds)
            point = consensus_point(ens.positions, risks, alpha)
            rows.append(empirical_risk(shape, point, first.inputs, targets[p], kind))
        rows = np.array(rows)
        return np.array([np.median(rows), rows.min()])

    rec = _Recorder(["risk_median", "risk_min"])
    cur = apply_schedules(base, sched, 0)
    rec.add(0, epoch_row(cur.alpha), cur.alpha, cur.sigma)
    try:
        for epoch in range(cfg["epochs"]):
            cur = apply_schedules(base, sched, epoch)
            for _ in range(sampler.batches_per_epoch):
                idx = sampler.next_indices()
                preds = _ensemble_preds(shape, ens.positions, first.inputs[idx], workers)
                task_risks = np.stack(
                    [_risks_from_preds(kind, targets[p][idx], preds) for p in range(n_tasks)]
                )
                multitask_step(ens, task_risks, cur, assignment)
            row = epoch_row(cur.alpha)
            if not rec.add(epoch + 1, row, cur.alpha, cur.sigma):
                return rec.build(cfg, seed, completed=False, abort_reason="non-finite risk")
    except NonFiniteError as err:
        return rec.build(cfg, seed, completed=False, abort_reason=str(err))
    return rec.build(cfg, seed)


def _train_ot(cfg: dict, seed: int, ds: Dataset, kind: LossKind) -> RunRecord:
    opt = cfg["optimizer"]
    base, sched = _make_cbo_config(cfg)
    workers = cfg["workers"]
    width = cfg["network"]["width"]
    mens = init_measure_ensemble(
        base.n_particles, width, ds.input_dim, seed, ds.output_dim, opt["init_low"], opt["init_high"]
    )
    sampler = MinibatchSampler(ds.size, cfg["data"]["batch_size"], seed)

    def measure_risks(X, y):
        return np.array(
            _pool_map(
                lambda n: measure_risk(mens.measure(n), X, y, kind), mens.n_measures, workers
            )
        )

    support = None

    def refit(X, y, alpha):
        nonlocal support
        mens.weights = gibbs_weights(measure_risks(X, y), alpha)
        bary = barycenter(mens, init_support=support)
        support = bary.support
        return bary

    rec = _Recorder(["risk"])
    cur = apply_schedules(base, sched, 0)
    bary = refit(ds.inputs, ds.targets, cur.alpha)
    eval_measure = EmpiricalMeasure(ds.input_dim, ds.output_dim, bary.support)
    rec.add(0, measure_risk(eval_measure, ds.inputs, ds.targets, kind), cur.alpha, cur.sigma)
    try:
        for epoch in range(cfg["epochs"]):
            cur = apply_schedules(base, sched, epoch)
            for _ in range(sampler.batches_per_epoch):
                idx = sampler.next_indices()
                bary = refit(ds.inputs[idx], ds.targets[idx], cur.alpha)
                ot_cbo_step(mens, bary, cur.lam, cur.sigma, cur.dt)
            bary = refit(ds.inputs, ds.targets, cur.alpha)
            eval_measure = EmpiricalMeasure(ds.input_dim, ds.output_dim, bary.support)
            risk = measure_risk(eval_measure, ds.inputs, ds.targets, kind)
            if not rec.add(epoch + 1, risk, cur.alpha, cur.sigma):
                return rec.build(cfg, seed, completed=False, abort_reason="non-finite risk")
    except NonFiniteError as err:
        return rec.build(cfg, seed, completed=False, abort_reason=str(err))
    return rec.build(cfg, seed)


def run_one(cfg: dict, seed: int) -> RunRecord:
    """One seeded run of the configured experiment/method."""
    data, kind, notes = build_dataset(cfg, seed)
    method = cfg["method"]
    if method == "adam":
        record = _train_adam(cfg, seed, data, kind)
    elif method in ("cbo", "hybrid"):
        record = _train_cbo(cfg, seed, data, kind)
    elif method == "multitask_cbo":
        record = _train_multitask(cfg, seed, data, kind)
    elif method == "ot_cbo":
        record = _train_ot(cfg, seed, data, kind)
    else:
        raise cfgmod.ConfigError(f"unknown method {method!r}")
    record.notes.update(notes)
    return record


def run_experiment(cfg: dict) -> list[RunRecord]:
    """All seeded runs for the config; warns when a consensus margin is bad."""
    margin = cfgmod.consensus_margin(cfg)
    if margin <= 0 and cfg["method"] != "adam":
        warnings.warn(f"consensus margin 2*lam - sigma^2 = {margin:g} <= 0", stacklevel=2)
    return [run_one(cfg, seed) for seed in cfg["seeds"]]


# ---------------------------------------------------------------------------
# Aggregation and CSV output

_AGG_NAMES = {
    "risk": ("risk_median", "risk_mean"),
    "risk_median": ("median_task_risk", "median_task_risk_mean"),
    "risk_min": ("min_task_risk", "min_task_risk_mean"),
}


def aggregate(records: list[RunRecord]) -> AggregateRecord:
    """Per-epoch median and mean across completed seeded runs."""
    done = [r for r in records if r.completed]
    if not done:
        raise ValueError("no completed runs to aggregate")
    epochs = done[0].epochs
    for r in done[1:]:
        if not np.array_equal(r.epochs, epochs):
            raise ValueError("runs have misaligned epoch grids")
    stats: dict[str, np.ndarray] = {}
    for j, col in enumerate(done[0].risk_columns):
        values = np.stack([r.risks[:, j] for r in done])  # (seeds, rows)
        med_name, mean_name = _AGG_NAMES[col]
        stats[med_name] = np.median(values, axis=0)
        stats[mean_name] = values.mean(axis=0)
    cfg = done[0].config
    return AggregateRecord(cfg["experiment"], cfg["method"], epochs, stats, len(done))


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_run_csv(record: RunRecord, path: str) -> None:
    lines = ["epoch," + ",".join(record.risk_columns) + ",alpha,sigma"]
    for i in range(len(record.epochs)):
        risks = ",".join(_fmt(v) for v in record.risks[i])
        lines.append(
            f"{record.epochs[i]},{risks},{_fmt(record.alphas[i])},{_fmt(record.sigmas[i])}"
        )
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_run_meta(record: RunRecord, path: str) -> None:
    import yaml

    meta = {
        "seed": record.seed,
        "config": record.config,
        "config_hash": cfgmod.config_hash(record.config),
        "code_version": __version__,
        "completed": record.completed,
        "abort_reason": record.abort_reason,
        "notes": record.notes,
        "wall_ms": [float(v) for v in record.wall_ms],
    }
    with open(path, "w") as f:
        yaml.safe_dump(meta, f, sort_keys=True)


def emit_plot_data(agg: AggregateRecord, path: str) -> None:
    """Tidy CSV (experiment, method, epoch, stat, value) for any plotting tool."""
    try:
        with open(path, "w", newline="\n") as f:
            f.write("experiment,method,epoch,stat,value\n")
            for stat in sorted(agg.stats):
                series = agg.stats[stat]
                for epoch, value in zip(agg.epochs, series):
                    f.write(f"{agg.experiment},{agg.method},{epoch},{stat},{_fmt(value)}\n")
    except OSError as err:
        raise OSError(f"cannot write plot data to {path}: {err}") from err


def run_and_write(cfg: dict) -> dict:
    """Run every seed, write per-run CSV + metadata and the aggregate CSV.

    Returns a manifest with the written paths.
    """
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    records = run_experiment(cfg)
    stem = f"{cfg['experiment']}_{cfg['method']}"
    run_paths = []
    for record in records:
        base = os.path.join(out_dir, f"{stem}_seed{record.seed}")
        write_run_csv(record, base + ".csv")
        write_run_meta(record, base + ".meta.yaml")
        run_paths.append(base + ".csv")
    agg_path = None
    if any(r.completed for r in records):
        agg = aggregate(records)
        agg_path = os.path.join(out_dir, f"{stem}_agg.csv")
        emit_plot_data(agg, agg_path)
    return {"runs": run_paths, "aggregate": agg_path, "records": records}
