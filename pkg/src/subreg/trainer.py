"""Two-stage training on desk-scale synthetic regression tasks.

The task hides a low-rank shift inside a frozen base weight: targets are
``(w0 + delta_star) @ X`` plus Gaussian noise, and the adapter has to
recover the shift. Stage one minimizes the task loss alone; stage two
adds ``lambda *`` (subspace redundancy measure) and keeps the optimizer
state, so the only change between stages is the extra penalty.

Runs are fully deterministic functions of their config: task data comes
from stream 0 of the seed, adapter initialization from stream 1, and the
optimizer itself uses no randomness (epochs are full-batch steps unless a
batch size is set, in which case contiguous slices are visited in a fixed
order).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import LowRankAdapter, SubspaceFeatureSet, init_adapter, subspace_forward
from .matrix import Rng, randn
from .redundancy import redundancy_matrix
from .regularizers import MEASURES, RegularizerSpec, regularize

__all__ = [
    "SyntheticTask",
    "TrainConfig",
    "OptimizerState",
    "EpochRecord",
    "TrainTrace",
    "TrainRun",
    "make_task",
    "loss",
    "task_gradients",
    "step",
    "train_two_stage",
    "run_training",
    "trace_to_csv",
    "trace_to_json",
]


@dataclass(frozen=True)
class SyntheticTask:
    w0: np.ndarray          # d_out x d_in, frozen
    delta_star: np.ndarray  # d_out x d_in, hidden rank-r* shift
    x_train: np.ndarray     # d_in x N
    y_train: np.ndarray     # d_out x N
    x_test: np.ndarray
    y_test: np.ndarray
    noise_std: float


@dataclass(frozen=True)
class TrainConfig:
    # task
    d_in: int = 32
    d_out: int = 32
    true_rank: int = 2
    n_train: int = 512
    n_test: int = 512
    noise_std: float = 0.02
    # adapter
    rank: int = 8
    init_std: float = 0.02
    # optimizer
    step_size: float = 0.3
    momentum: float = 0.9
    adaptive: bool = False
    weight_decay: float = 0.0
    # schedule
    stage1_epochs: int = 200
    stage2_epochs: int = 200
    # regularization
    reg: RegularizerSpec = field(default_factory=RegularizerSpec)
    lam: float = 0.1
    # bookkeeping
    seed: int = 0
    batch_size: int | None = None
    trace_sample: int | None = 128

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 1 <= self.true_rank <= min(self.d_in, self.d_out):
            raise ValueError(
                f"true_rank must satisfy 1 <= r* <= min(d_in, d_out), got {self.true_rank}"
            )
        if not 1 <= self.rank <= min(self.d_in, self.d_out):
            raise ValueError(
                f"rank must satisfy 1 <= r <= min(d_in, d_out), got {self.rank}"
            )
        if self.trace_sample is not None and self.trace_sample < 2:
            raise ValueError("trace_sample must be >= 2 (or None for the full batch)")


@dataclass
class OptimizerState:
    """Hyperparameters plus per-factor buffers for momentum or Adam-style moments.

    Weight decay is coupled (added to the gradient) for the momentum
    optimizer and decoupled (applied directly to the parameters) for the
    adaptive one.
    """

    step_size: float
    momentum: float = 0.9
    adaptive: bool = False
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    t: int = 0
    vel_b: np.ndarray | None = None
    vel_a: np.ndarray | None = None
    m2_b: np.ndarray | None = None
    m2_a: np.ndarray | None = None

    @classmethod
    def for_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(
            step_size=cfg.step_size,
            momentum=cfg.momentum,
            adaptive=cfg.adaptive,
            weight_decay=cfg.weight_decay,
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stage: int
    task_loss_train: float
    task_loss_test: float
    reg_value: float
    mean_offdiag_linear: float
    mean_offdiag_euclidean: float
    mean_offdiag_cosine: float
    mean_offdiag_nonlinear: float

    FIELDS = (
        "epoch",
        "stage",
        "task_loss_train",
        "task_loss_test",
        "reg_value",
        "mean_offdiag_linear",
        "mean_offdiag_euclidean",
        "mean_offdiag_cosine",
        "mean_offdiag_nonlinear",
    )

    def as_row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass(frozen=True)
class TrainTrace:
    """One record per epoch, taken after the epoch's parameter update.

    Redundancy summaries (and the recorded ``reg_value``, the active
    measure's strict-upper-triangle sum) are evaluated on the first
    ``trace_sample`` training columns to keep per-epoch cost flat; the
    training step itself always regularizes the full batch.
    """

    records: tuple[EpochRecord, ...]

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class TrainRun:
    """Everything a caller might want back from one training run."""

    config: TrainConfig
    task: SyntheticTask
    adapter: LowRankAdapter
    stage1_adapter: LowRankAdapter
    trace: TrainTrace


def make_task(cfg: TrainConfig) -> SyntheticTask:
    """Build the synthetic task for a config: deterministic per seed.

    The hidden shift is a product of true_rank rank-1 factors, so its rank
    is exactly true_rank (almost surely for Gaussian factors), scaled so
    that its outputs are O(1) on unit-variance inputs.
    """
    rng = Rng(cfg.seed, stream=0)
    w0 = randn(rng, cfg.d_out, cfg.d_in, std=1.0 / np.sqrt(cfg.d_in))
    u = randn(rng, cfg.d_out, cfg.true_rank)
    v = randn(rng, cfg.true_rank, cfg.d_in)
    delta_star = (u @ v) / np.sqrt(cfg.true_rank * cfg.d_in)
    w_true = w0 + delta_star
    x_train = randn(rng, cfg.d_in, cfg.n_train)
    x_test = randn(rng, cfg.d_in, cfg.n_test)
    y_train = w_true @ x_train + randn(rng, cfg.d_out, cfg.n_train, std=cfg.noise_std)
    y_test = w_true @ x_test + randn(rng, cfg.d_out, cfg.n_test, std=cfg.noise_std)
    return SyntheticTask(
        w0=w0,
        delta_star=delta_star,
        x_train=x_train,
        y_train=y_train,
        x_test=x_test,
        y_test=y_test,
        noise_std=cfg.noise_std,
    )


def loss(adapter: LowRankAdapter, batch: tuple[np.ndarray, np.ndarray]) -> float:
    """Mean squared error of the adapted map over a batch: mean over all N * d_out entries."""
    x, y = batch
    resid = adapter.w0 @ x + adapter.b @ (adapter.a @ x) - y
    return float(np.mean(resid * resid))


def task_gradients(
    adapter: LowRankAdapter, x: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of ``loss`` with respect to the factors b and a."""
    n = x.shape[1]
    ax = adapter.a @ x
    resid = adapter.w0 @ x + adapter.b @ ax - y
    scale = 2.0 / (n * adapter.d_out)
    grad_b = scale * (resid @ ax.T)
    grad_a = scale * ((adapter.b.T @ resid) @ x.T)
    return grad_b, grad_a


def step(
    adapter: LowRankAdapter,
    batch: tuple[np.ndarray, np.ndarray],
    spec: RegularizerSpec,
    lam: float,
    state: OptimizerState,
) -> tuple[LowRankAdapter, OptimizerState]:
    """One update of b and a against task loss + lam * regularizer; w0 untouched."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    x, y = batch
    grad_b, grad_a = task_gradients(adapter, x, y)
    if lam > 0:
        rv = regularize(adapter, x, spec)
        grad_b = grad_b + lam * rv.grad_b
        grad_a = grad_a + lam * rv.grad_a
    if not (np.all(np.isfinite(grad_b)) and np.all(np.isfinite(grad_a))):
        raise FloatingPointError(
            "non-finite gradient: "
            f"max|grad_b|={np.max(np.abs(grad_b))}, max|grad_a|={np.max(np.abs(grad_a))}, "
            f"lambda={lam}, measure={spec.measure}"
        )
    new_b, new_a = _apply_update(adapter, grad_b, grad_a, state)
    return replace(adapter, b=new_b, a=new_a), state


def _apply_update(adapter, grad_b, grad_a, state: OptimizerState):
    lr = state.step_size
    if state.vel_b is None:
        state.vel_b = np.zeros_like(adapter.b)
        state.vel_a = np.zeros_like(adapter.a)
        if state.adaptive:
            state.m2_b = np.zeros_like(adapter.b)
            state.m2_a = np.zeros_like(adapter.a)
    if not state.adaptive:
        if state.weight_decay > 0:
            grad_b = grad_b + state.weight_decay * adapter.b
            grad_a = grad_a + state.weight_decay * adapter.a
        state.vel_b = state.momentum * state.vel_b + grad_b
        state.vel_a = state.momentum * state.vel_a + grad_a
        return adapter.b - lr * state.vel_b, adapter.a - lr * state.vel_a
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.vel_b = b1 * state.vel_b + (1 - b1) * grad_b
    state.vel_a = b1 * state.vel_a + (1 - b1) * grad_a
    state.m2_b = b2 * state.m2_b + (1 - b2) * grad_b * grad_b
    state.m2_a = b2 * state.m2_a + (1 - b2) * grad_a * grad_a
    c1, c2 = 1 - b1**state.t, 1 - b2**state.t
    upd_b = (state.vel_b / c1) / (np.sqrt(state.m2_b / c2) + state.adam_eps)
    upd_a = (state.vel_a / c1) / (np.sqrt(state.m2_a / c2) + state.adam_eps)
    new_b = adapter.b - lr * upd_b
    new_a = adapter.a - lr * upd_a
    if state.weight_decay > 0:
        new_b = new_b - lr * state.weight_decay * adapter.b
        new_a = new_a - lr * state.weight_decay * adapter.a
    return new_b, new_a


def _epoch_batches(x, y, batch_size):
    n = x.shape[1]
    if batch_size is None or batch_size >= n:
        yield x, y
        return
    for start in range(0, n, batch_size):
        end = min(start + batch_size, n)
        yield x[:, start:end], y[:, start:end]


def _mean_offdiag(features: SubspaceFeatureSet, measure: str, spec: RegularizerSpec):
    m = redundancy_matrix(
        features,
        measure,
        beta=spec.beta,
        sigma_fraction=spec.sigma_fraction,
        sigma_floor=spec.sigma_floor,
        eps=spec.eps,
    )
    r = m.scores.shape[0]
    iu = np.triu_indices(r, k=1)
    vals = m.scores[iu]
    return float(np.mean(vals)) if vals.size else 0.0, float(np.sum(vals))


def _record(epoch, stage, adapter, task, cfg) -> EpochRecord:
    k = cfg.trace_sample
    x = task.x_train if k is None else task.x_train[:, : min(k, cfg.n_train)]
    summaries = {}
    reg_value = 0.0
    if adapter.rank >= 2:
        feats = subspace_forward(adapter, x)
        for measure in MEASURES:
            mean_off, total = _mean_offdiag(feats, measure, cfg.reg)
            summaries[measure] = mean_off
            if measure == cfg.reg.measure:
                reg_value = total
    else:
        summaries = {m: 0.0 for m in MEASURES}
    return EpochRecord(
        epoch=epoch,
        stage=stage,
        task_loss_train=loss(adapter, (task.x_train, task.y_train)),
        task_loss_test=loss(adapter, (task.x_test, task.y_test)),
        reg_value=reg_value,
        mean_offdiag_linear=summaries["linear"],
        mean_offdiag_euclidean=summaries["euclidean"],
        mean_offdiag_cosine=summaries["cosine"],
        mean_offdiag_nonlinear=summaries["nonlinear"],
    )


def run_training(cfg: TrainConfig) -> TrainRun:
    """Two-stage run returning the final adapter, stage-1 snapshot, and trace."""
    task = make_task(cfg)
    adapter = init_adapter(
        Rng(cfg.seed, stream=1), cfg.d_in, cfg.d_out, cfg.rank, cfg.init_std, w0=task.w0
    )
    state = OptimizerState.for_config(cfg)
    records = []
    stage1_adapter = adapter
    total = cfg.stage1_epochs + cfg.stage2_epochs
    for epoch in range(1, total + 1):
        stage = 1 if epoch <= cfg.stage1_epochs else 2
        lam = 0.0 if stage == 1 else cfg.lam
        for bx, by in _epoch_batches(task.x_train, task.y_train, cfg.batch_size):
            adapter, state = step(adapter, (bx, by), cfg.reg, lam, state)
        records.append(_record(epoch, stage, adapter, task, cfg))
        if epoch == cfg.stage1_epochs:
            stage1_adapter = adapter
    if cfg.stage1_epochs == 0:
        stage1_adapter = adapter if total == 0 else None
        # no stage-1 phase: fall back to the initial adapter as the snapshot
        if stage1_adapter is None:
            stage1_adapter = init_adapter(
                Rng(cfg.seed, stream=1),
                cfg.d_in,
                cfg.d_out,
                cfg.rank,
                cfg.init_std,
                w0=task.w0,
            )
    return TrainRun(
        config=cfg,
        task=task,
        adapter=adapter,
        stage1_adapter=stage1_adapter,
        trace=TrainTrace(records=tuple(records)),
    )


def train_two_stage(cfg: TrainConfig) -> tuple[LowRankAdapter, TrainTrace]:
    """Stage one on the task loss alone, stage two with the regularizer added."""
    run = run_training(cfg)
    return run.adapter, run.trace


def trace_to_csv(trace: TrainTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EpochRecord.FIELDS)
        for rec in trace.records:
            w.writerow(
                [v if isinstance(v, int) else repr(float(v)) for v in rec.as_row()]
            )


def trace_to_json(trace: TrainTrace, path) -> None:
    payload = [dict(zip(EpochRecord.FIELDS, rec.as_row())) for rec in trace.records]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
