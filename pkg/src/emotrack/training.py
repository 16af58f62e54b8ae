"""Objective, AdamW with warmup-cosine schedule, and the seeded training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .data import (Corpus, DataError, SplitManifest, fit_feature_stats, split_corpus,
                   turn_matrix, z_normalize)
from .model import Example, as_tensors, forward, init_params, make_batch, predict
from .rng import fisher_yates, stream

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite values during training."""


# -- objective -------------------------------------------------------------------

def compute_loss(items, labels, lambda_sym=0.5, delta=1.0):
    """Batch mean of Huber(total) + lambda_sym * mean_j Huber(item_j).

    ``items`` is a Tensor of shape (B, J) or (J,); ``labels`` the matching
    self-report items.
    """
    if labels is None:
        raise DataError("labels are required to compute the loss")
    labels = np.asarray(labels, dtype=np.float64)
    if not isinstance(items, nx.Tensor):
        items = nx.Tensor(items)
    total = nx.sum_(items, axis=-1)
    agg = nx.huber(total, labels.sum(axis=-1), delta)
    per = nx.mean(nx.huber(items, labels, delta), axis=-1)
    return nx.mean(agg + per * lambda_sym)


# -- schedule and optimiser ---------------------------------------------------------

def lr_at(step, total_steps, warmup_ratio=0.05, base_lr=1e-3):
    """Linear warmup over ceil(ratio * total) steps, then cosine decay to zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps == warmup:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params, grads, state: OptimizerState, lr, weight_decay=1e-2,
               beta1=0.9, beta2=0.999, eps=1e-8, no_decay=()):
    """One decoupled-weight-decay Adam step; returns (new params, new state)."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k!r} at step {state.step}")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        wd = 0.0 if k in no_decay else weight_decay
        new_p[k] = p - lr * (update + wd * p)
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, t)


class EarlyStopping:
    """Track the best validation loss; ``stop`` after ``patience`` epochs without improvement."""

    def __init__(self, patience=8):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch, value) -> bool:
        """Record an epoch; returns True if it is the new best."""
        if value < self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return True
        self.bad += 1
        return False

    @property
    def stop(self):
        return self.bad >= self.patience


# -- data preparation ----------------------------------------------------------

def prepare_examples(trajectories, stats, cfg: TrainConfig, require_labels=False):
    """Turn trajectories into model-ready Examples (filtered, truncated, normalised)."""
    view, n_max = cfg.speaker_view, cfg.model.N_max
    use_history = cfg.model.memory_mode != "none"
    out = []
    for traj in trajectories:
        prev = None
        for s in traj.sessions:
            if require_labels and s.labels is None:
                raise DataError(f"session {s.client_id}#{s.session_index} in a training split has no labels")
            turns = turn_matrix(s, view, n_max)
            target_total = None
            if s.latent_items is not None or s.labels is not None:
                target_total = s.eval_total()
            out.append(Example(
                run_id=traj.run_id,
                session_index=s.session_index,
                z=z_normalize(s.features, stats),
                turns=turns,
                prev_turns=prev if use_history else None,
                label_items=None if s.labels is None else s.labels.items,
                target_total=target_total,
                target_items=s.eval_items(),
            ))
            prev = turns
    return out


@dataclass
class Prepared:
    stats: object
    train: list
    val: list
    test: list


def prepare_splits(corpus: Corpus, manifest: SplitManifest, cfg: TrainConfig) -> Prepared:
    if corpus.d_e != cfg.model.d_e or corpus.F != cfg.model.F:
        raise DataError(f"corpus has d_e={corpus.d_e}, F={corpus.F} but the model expects "
                        f"d_e={cfg.model.d_e}, F={cfg.model.F}")
    parts = split_corpus(corpus, manifest)
    train_sessions = [s for t in parts["train"] for s in t.sessions]
    if not train_sessions:
        raise DataError("training split is empty")
    stats = fit_feature_stats(train_sessions)
    return Prepared(
        stats,
        prepare_examples(parts["train"], stats, cfg, require_labels=True),
        prepare_examples(parts["val"], stats, cfg, require_labels=True),
        prepare_examples(parts["test"], stats, cfg),
    )


# -- training loop ----------------------------------------------------------------

def loss_and_grads(params, cfg: TrainConfig, batch, mode="train", seed=0, step=0):
    with nx.Tape() as tape:
        P = as_tensors(params, requires_grad=True)
        items, _ = forward(P, cfg.model, batch, mode=mode, seed=seed, step=step, p_hist=cfg.p_hist)
        loss = compute_loss(items, batch.label_items, cfg.lambda_sym, cfg.huber_delta)
    return float(loss.data), tape.gradients(loss, P)


def evaluate_loss(params, cfg: TrainConfig, examples, batch_size=64):
    """Eval-mode objective (history always used) and total MAE against the evaluation target."""
    items, totals = predict(params, cfg.model, examples, batch_size)
    labels = np.stack([e.label_items for e in examples])
    loss = float(compute_loss(items, labels, cfg.lambda_sym, cfg.huber_delta).data)
    targets = np.array([e.target_total for e in examples])
    return loss, float(np.mean(np.abs(totals - targets)))


@dataclass
class TrainResult:
    params: dict
    best_epoch: int
    log: list = field(default_factory=list)
    stats: object = None


def train(examples_train, examples_val, cfg: TrainConfig, seed=None, init=None,
          log_path=None, on_epoch=None) -> TrainResult:
    """Mini-batch AdamW training with early stopping on validation loss.

    Returns the parameters of the best validation epoch.
    """
    if not examples_train:
        raise DataError("training split is empty")
    if not examples_val:
        raise DataError("validation split is empty")
    seed = cfg.seed if seed is None else seed
    params = init if init is not None else init_params(cfg.model, seed)
    state = OptimizerState.zeros_like(params)
    n = len(examples_train)
    per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.max_epochs * per_epoch
    stopper = EarlyStopping(cfg.patience)
    best = params
    records = []
    step = 0
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = fisher_yates(range(n), stream(seed, "epoch-shuffle", epoch))
            losses = []
            for b in range(per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = make_batch([examples_train[i] for i in idx])
                loss, grads = loss_and_grads(params, cfg, batch, "train", seed, step)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite training loss at step {step}")
                grads, _ = nx.clip_global_norm(grads, cfg.clip_norm)
                lr = lr_at(step, total_steps, cfg.warmup_ratio, cfg.lr)
                params, state = adamw_step(params, grads, state, lr, cfg.weight_decay,
                                           cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.no_decay)
                losses.append(loss * len(idx))
                step += 1
            val_loss, val_mae = evaluate_loss(params, cfg, examples_val)
            if stopper.update(epoch, val_loss):
                best = params
            rec = {"epoch": epoch, "train_loss": sum(losses) / n, "val_loss": val_loss,
                   "val_mae": val_mae, "lr": lr, "seconds": round(time.perf_counter() - t0, 3)}
            records.append(rec)
            log.debug("epoch %d train %.4f val %.4f mae %.4f", epoch, rec["train_loss"], val_loss, val_mae)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(rec)
            if stopper.stop:
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(best, stopper.best_epoch, records)
