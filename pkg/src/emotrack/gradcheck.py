"""Central finite-difference check of the full training objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, TrainConfig
from .model import Example, as_tensors, forward, init_params, make_batch
from .rng import stream
from .training import compute_loss, loss_and_grads

TINY = dict(d=8, h=2, d_ff=16, L_enc=1, L_dec=1, F=4, J=8, S=4, N_max=6, d_e=6,
            score_mlp_hidden=4, memory_mode="summary+retrieval")


def tiny_config(**kw) -> TrainConfig:
    model = ModelConfig(**{**TINY, **kw})
    return TrainConfig(model=model)


def tiny_batch(cfg: ModelConfig, seed=0, n=3, n_turns=6):
    """Sessions with ragged turn counts; all but the first have a previous session."""
    rng = stream(seed, "gradcheck/data")
    ex = []
    for i in range(n):
        k = n_turns - i % 3
        prev = rng.normal(size=(max(1, k - 1), cfg.d_e)) if i > 0 else None
        # keep labels away from the Huber kink
        labels = rng.choice([0.2, 0.8, 1.6, 2.4, 2.9], size=cfg.J)
        ex.append(Example(f"r{i}", 1 + int(i > 0), rng.normal(size=cfg.F),
                          rng.normal(size=(k, cfg.d_e)), prev, labels))
    return make_batch(ex)


@dataclass
class GradcheckReport:
    passed: bool
    worst_param: str
    worst_error: float
    n_checked: int
    errors: dict = field(default_factory=dict)

    def lines(self):
        out = [f"{name:28s} max_rel_err={err:.3e}" for name, err in sorted(self.errors.items())]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict}: {self.n_checked} entries, worst {self.worst_param} {self.worst_error:.3e}")
        return out


def relative_error(a, f):
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def run_gradcheck(cfg: TrainConfig = None, seed=0, step=1e-5, tol=1e-4, corrupt=None):
    """Compare analytic gradients with central differences for every entry.

    ``corrupt`` optionally names a parameter whose analytic gradient is
    perturbed before comparison (negative control).
    """
    cfg = cfg or tiny_config()
    params = init_params(cfg.model, seed)
    # move off the zero-init biases and unit gammas so every path is exercised
    r = stream(seed, "gradcheck/params")
    params = {k: v + 0.1 * r.normal(size=v.shape) for k, v in params.items()}
    batch = tiny_batch(cfg.model, seed)

    def loss_of(p):
        items, _ = forward(as_tensors(p), cfg.model, batch, mode="eval")
        return float(compute_loss(items, batch.label_items, cfg.lambda_sym, cfg.huber_delta).data)

    _, grads = loss_and_grads(params, cfg, batch, mode="eval")
    if corrupt is not None:
        if corrupt not in grads:
            raise ValueError(f"unknown parameter {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 1.01 + 1e-3

    errors = {}
    worst = ("", 0.0)
    n = 0
    for name, value in params.items():
        fd = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            plus = flat.copy()
            plus[i] += step
            minus = flat.copy()
            minus[i] -= step
            lp = loss_of({**params, name: plus.reshape(value.shape)})
            lm = loss_of({**params, name: minus.reshape(value.shape)})
            fd.reshape(-1)[i] = (lp - lm) / (2 * step)
        err = float(relative_error(grads[name], fd).max())
        errors[name] = err
        n += value.size
        if err > worst[1]:
            worst = (name, err)
    return GradcheckReport(worst[1] <= tol, worst[0], worst[1], n, errors)
