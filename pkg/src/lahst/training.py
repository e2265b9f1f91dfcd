"""Training loop: random-subsequence sampling, per-position BCE over the
broadcast stay labels, one-cycle learning rate, decoupled-weight-decay
adaptive moments, and patience-based early stopping on dev Micro-F1.

Every step samples at most ``n_max`` chunks from the stay (uniformly
without replacement, order preserved), so memory stays bounded while each
epoch sees a different view of the same stay.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from lahst import autodiff as ad
from lahst.autodiff import DiffArray, Tape
from lahst.data import ChunkSequence, CutoffSpec, ValidationError, chunk_stay
from lahst.model import LahstParams, ModelConfig, forward, init_params
from lahst.synth import label_prior

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss; carries a diagnostic dump."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message + "\n" + json.dumps(diagnostics, sort_keys=True, default=str))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    n_max: int = 16
    peak_lr: float = 5e-5
    max_epochs: int = 20
    patience: int = 3
    batch_size: int = 1
    seed: int = 0
    context_strategy: str = "random"  # "random" | "last"
    sample_unit: str = "chunk"  # "chunk" | "note"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dev_metric: str = "micro-f1-full"  # or "micro-f1-mean-cutoffs"
    stop_after_epoch: int | None = None  # controlled interruption, for resume

    def validate(self) -> None:
        if self.n_max < 1:
            raise ValidationError("n_max must be >= 1")
        if not self.patience < self.max_epochs:
            raise ValidationError(
                f"patience {self.patience} must be smaller than max_epochs {self.max_epochs}"
            )
        if self.context_strategy not in ("random", "last"):
            raise ValidationError(f"unknown context strategy {self.context_strategy!r}")
        if self.sample_unit not in ("chunk", "note"):
            raise ValidationError(f"unknown sample unit {self.sample_unit!r}")
        if self.dev_metric not in ("micro-f1-full", "micro-f1-mean-cutoffs"):
            raise ValidationError(f"unknown dev metric {self.dev_metric!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n_max": self.n_max,
            "peak_lr": self.peak_lr,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "context_strategy": self.context_strategy,
            "sample_unit": self.sample_unit,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "dev_metric": self.dev_metric,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# subsequence sampling
# ---------------------------------------------------------------------------


def sample_subsequence(seq: ChunkSequence, n_max: int, rng) -> ChunkSequence:
    """min(n_max, len) distinct chunk indices, uniform, sorted ascending."""
    n = len(seq)
    if n == 0:
        raise ValidationError("cannot sample from an empty chunk sequence")
    m = min(n_max, n)
    idx = np.sort(rng.choice(n, size=m, replace=False))
    return seq.subset(idx)


def sample_note_subsequence(seq: ChunkSequence, n_max: int, rng) -> ChunkSequence:
    """Note-level variant: whole notes are drawn (uniform, without
    replacement) while their combined chunk count fits in n_max."""
    n = len(seq)
    if n == 0:
        raise ValidationError("cannot sample from an empty chunk sequence")
    groups = []
    for i, chunk in enumerate(seq.chunks):
        if groups and groups[-1][0] == chunk.note_id:
            groups[-1][1].append(i)
        else:
            groups.append((chunk.note_id, [i]))
    order = rng.permutation(len(groups))
    chosen: list = []
    for gi in order:
        members = groups[gi][1]
        if len(chosen) + len(members) <= n_max:
            chosen.extend(members)
    if not chosen:  # single oversized note: keep its first n_max chunks
        chosen = groups[order[0]][1][:n_max]
    return seq.subset(sorted(chosen))


def last_chunks(seq: ChunkSequence, n_max: int) -> ChunkSequence:
    return seq.window(max(0, len(seq) - n_max), len(seq))


def select_training_view(seq: ChunkSequence, config: TrainConfig, rng) -> ChunkSequence:
    if config.context_strategy == "last":
        return last_chunks(seq, config.n_max)
    if config.sample_unit == "note":
        return sample_note_subsequence(seq, config.n_max, rng)
    return sample_subsequence(seq, config.n_max, rng)


# ---------------------------------------------------------------------------
# loss and schedule
# ---------------------------------------------------------------------------


def broadcast_targets(labels, n_positions: int, n_labels: int) -> np.ndarray:
    y = np.zeros((n_positions, n_labels))
    for l in labels:
        y[:, l] = 1.0
    return y


def temporal_bce(p: DiffArray, labels, n_labels: int) -> DiffArray:
    """BCE against the stay's final gold set broadcast to every position."""
    y = broadcast_targets(labels, p.shape[0], n_labels)
    return ad.bce_loss(p, y)


WARMUP_FRACTION = 0.3
START_DIV = 25.0
FLOOR_DIV = 1e4


def one_cycle_lr(step: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup from peak/25 over the first 30% of steps, then cosine
    anneal to peak/1e4."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = int(round(WARMUP_FRACTION * total_steps))
    start = peak_lr / START_DIV
    floor = peak_lr / FLOOR_DIV
    if step < warm:
        return start + (peak_lr - start) * (step / warm)
    span = max(total_steps - warm, 1)
    u = (step - warm) / span
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * u))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, named_params: dict, config: TrainConfig):
        self.named = named_params
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.named.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def grad_norms(self) -> dict:
        return {
            name: float(np.linalg.norm(p.grad)) if p.grad is not None else None
            for name, p in self.named.items()
        }


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


@dataclass
class EarlyStopper:
    """Halt after ``patience`` epochs without strict dev improvement."""

    patience: int
    best: float = -math.inf
    best_epoch: int = 0
    stale: int = 0

    def update(self, epoch: int, metric: float):
        """Returns (improved, should_stop)."""
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.stale = 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


# ---------------------------------------------------------------------------
# training state + loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    params: LahstParams
    best_params: LahstParams
    optimizer: AdamW
    epoch: int  # completed epochs
    global_step: int
    total_steps: int
    best_metric: float
    best_epoch: int
    stale_epochs: int
    rng_state: dict
    history: list = field(default_factory=list)


def save_state(path, state: TrainState, train_config: TrainConfig) -> None:
    """Serialize the full resumable state: params, best params, moments."""
    from lahst.checkpoint import save_tensors

    tensors = {}
    for name, arr in state.params.named_parameters().items():
        tensors[f"params.{name}"] = arr.data
    if state.params.label_prior is not None:
        tensors["params.label_prior"] = state.params.label_prior
    for name, arr in state.best_params.named_parameters().items():
        tensors[f"best.{name}"] = arr.data
    if state.best_params.label_prior is not None:
        tensors["best.label_prior"] = state.best_params.label_prior
    for name in state.optimizer.m:
        tensors[f"adam.m.{name}"] = state.optimizer.m[name]
        tensors[f"adam.v.{name}"] = state.optimizer.v[name]
    meta = {
        "kind": "train-state",
        "model": state.params.config.to_dict(),
        "train": train_config.to_dict(),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "total_steps": state.total_steps,
        "adam_t": state.optimizer.t,
        "best_metric": state.best_metric if math.isfinite(state.best_metric) else None,
        "best_epoch": state.best_epoch,
        "stale_epochs": state.stale_epochs,
        "rng_state": state.rng_state,
        "history": state.history,
    }
    save_tensors(path, tensors, meta)


def load_state(path):
    """Rebuild (TrainState, TrainConfig) from a saved training state."""
    from lahst.checkpoint import CheckpointError, load_tensors

    tensors, meta = load_tensors(path)
    if meta.get("kind") != "train-state":
        raise CheckpointError(f"{path}: not a training-state checkpoint")
    model_config = ModelConfig.from_dict(meta["model"])
    train_config = TrainConfig.from_dict(meta["train"])

    def fill(prefix: str) -> LahstParams:
        params = init_params(model_config, seed=0)
        for name, arr in params.named_parameters().items():
            stored = tensors[f"{prefix}.{name}"]
            if tuple(stored.shape) != arr.shape:
                raise CheckpointError(
                    f"{path}: tensor {prefix}.{name} has shape {tuple(stored.shape)}, "
                    f"expected {arr.shape}"
                )
            arr.data = np.ascontiguousarray(stored)
            arr.grad = None
        prior = tensors.get(f"{prefix}.label_prior")
        params.label_prior = None if prior is None else np.ascontiguousarray(prior)
        return params

    params = fill("params")
    best_params = fill("best")
    optimizer = AdamW(params.named_parameters(), train_config)
    optimizer.t = meta["adam_t"]
    for name in optimizer.m:
        optimizer.m[name] = np.ascontiguousarray(tensors[f"adam.m.{name}"])
        optimizer.v[name] = np.ascontiguousarray(tensors[f"adam.v.{name}"])
    best_metric = meta["best_metric"]
    state = TrainState(
        params=params,
        best_params=best_params,
        optimizer=optimizer,
        epoch=meta["epoch"],
        global_step=meta["global_step"],
        total_steps=meta["total_steps"],
        best_metric=-math.inf if best_metric is None else best_metric,
        best_epoch=meta["best_epoch"],
        stale_epochs=meta["stale_epochs"],
        rng_state=meta["rng_state"],
        history=list(meta["history"]),
    )
    return state, train_config


def _dev_micro_f1(dev_pairs, params: LahstParams, train_config: TrainConfig) -> float:
    # local imports; evaluation builds on inference which builds on this module
    from lahst.inference import eca_infer
    from lahst.metrics import micro_f1

    scores = []
    gold = []
    n_labels = params.config.n_labels
    for seq, labels in dev_pairs:
        preds = eca_infer(seq, params, train_config.n_max)
        scores.append(preds.final_row())
        gold.append(broadcast_targets(labels, 1, n_labels)[0])
    return micro_f1(np.stack(scores), np.stack(gold))


def train(
    train_stays,
    dev_stays,
    model_config: ModelConfig,
    train_config: TrainConfig,
    state: TrainState | None = None,
    on_epoch=None,
) -> TrainState:
    """Run (or resume) training; returns the state with best params loaded.

    Per epoch: seeded shuffle of stays, one optimizer step per stay batch
    on a sampled context view, then dev Micro-F1 over the full sequences
    via extended-context inference. Raises :class:`NumericError` with a
    diagnostic dump on a non-finite loss.
    """
    train_config.validate()
    if not train_stays:
        raise ValidationError("empty training corpus")
    if not dev_stays:
        raise ValidationError("empty dev corpus")

    t = model_config.chunk_tokens
    train_pairs = [(chunk_stay(s, t), sorted(s.labels)) for s in train_stays]
    dev_pairs = [(chunk_stay(s, t), sorted(s.labels)) for s in dev_stays]

    steps_per_epoch = math.ceil(len(train_pairs) / train_config.batch_size)

    if state is None:
        params = init_params(model_config, train_config.seed)
        params.label_prior = label_prior(train_stays, model_config.n_labels)
        optimizer = AdamW(params.named_parameters(), train_config)
        rng = np.random.default_rng([train_config.seed, 0x7EA1])
        state = TrainState(
            params=params,
            best_params=params.copy(),
            optimizer=optimizer,
            epoch=0,
            global_step=0,
            total_steps=train_config.max_epochs * steps_per_epoch,
            best_metric=-math.inf,
            best_epoch=0,
            stale_epochs=0,
            rng_state={},
            history=[],
        )
    else:
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state

    stopper = EarlyStopper(
        patience=train_config.patience,
        best=state.best_metric,
        best_epoch=state.best_epoch,
        stale=state.stale_epochs,
    )
    params = state.params
    optimizer = state.optimizer
    n_labels = model_config.n_labels

    for epoch in range(state.epoch + 1, train_config.max_epochs + 1):
        order = rng.permutation(len(train_pairs))
        epoch_losses = []
        lr = 0.0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            lr = one_cycle_lr(state.global_step, state.total_steps, train_config.peak_lr)
            with Tape() as tape:
                total = None
                for stay_index in batch:
                    seq, labels = train_pairs[stay_index]
                    view = select_training_view(seq, train_config, rng)
                    assert len(view) <= train_config.n_max
                    preds, _, _ = forward(view, params)
                    loss = temporal_bce(preds.diff, labels, n_labels)
                    total = loss if total is None else ad.add(total, loss)
                if len(batch) > 1:
                    total = ad.scale(total, 1.0 / len(batch))
                loss_value = total.item()
                if not math.isfinite(loss_value):
                    raise NumericError(
                        "non-finite training loss",
                        {
                            "epoch": epoch,
                            "step": state.global_step,
                            "lr": lr,
                            "loss": loss_value,
                            "grad_norms": optimizer.grad_norms(),
                        },
                    )
                tape.backward(total)
            optimizer.step(lr)
            params.zero_grads()
            state.global_step += 1
            epoch_losses.append(loss_value)

        dev_value = _dev_metric_value(dev_pairs, params, train_config)
        improved, should_stop = stopper.update(epoch, dev_value)
        if improved:
            state.best_params = params.copy()
        state.best_metric = stopper.best
        state.best_epoch = stopper.best_epoch
        state.stale_epochs = stopper.stale
        state.epoch = epoch
        state.rng_state = rng.bit_generator.state
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "dev": {train_config.dev_metric: dev_value},
            "lr": lr,
        }
        state.history.append(row)
        log.info(
            "epoch %d: loss %.4f dev %s %.4f%s",
            epoch,
            row["train_loss"],
            train_config.dev_metric,
            dev_value,
            " *" if improved else "",
        )
        if on_epoch is not None:
            on_epoch(state, row)
        if should_stop:
            break
        if train_config.stop_after_epoch is not None and epoch >= train_config.stop_after_epoch:
            break
    return state


def _dev_metric_value(dev_pairs, params: LahstParams, train_config: TrainConfig) -> float:
    if train_config.dev_metric == "micro-f1-full":
        return _dev_micro_f1(dev_pairs, params, train_config)

    # mean Micro-F1 over the quarter/half/three-quarter availability points
    from lahst.inference import eca_infer
    from lahst.metrics import micro_f1

    n_labels = params.config.n_labels
    values = []
    for frac in (0.25, 0.5, 0.75):
        scores = []
        gold = []
        for seq, labels in dev_pairs:
            keep = max(1, int(round(frac * len(seq))))
            preds = eca_infer(seq.window(0, keep), params, train_config.n_max)
            scores.append(preds.final_row())
            gold.append(broadcast_targets(labels, 1, n_labels)[0])
        values.append(micro_f1(np.stack(scores), np.stack(gold)))
    return float(np.mean(values))
