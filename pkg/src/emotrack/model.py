"""Current-session forward pass: tokenizers, encoder, symptom-query decoder, head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import memory as mem
from . import numerics as nx
from .config import ModelConfig
from .rng import stream

MODES = ("train", "eval")


# -- parameters -----------------------------------------------------------------

def glorot(shape, seed, name):
    fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return stream(seed, "init/" + name).uniform(-limit, limit, size=shape)


def normal(shape, seed, name, std=0.02):
    return stream(seed, "init/" + name).normal(0.0, std, size=shape)


def attention_params(prefix, d, seed):
    out = {}
    for k in ("q", "k", "v", "o"):
        out[f"{prefix}.w{k}"] = glorot((d, d), seed, f"{prefix}.w{k}")
        # no key bias: it shifts every score of a query equally and cancels in softmax
        if k != "k":
            out[f"{prefix}.b{k}"] = np.zeros(d)
    return out


def ln_params(prefix, d):
    return {f"{prefix}.g": np.ones(d), f"{prefix}.b": np.zeros(d)}


def ff_params(prefix, d, d_ff, seed):
    return {
        f"{prefix}.w1": glorot((d, d_ff), seed, f"{prefix}.w1"),
        f"{prefix}.b1": np.zeros(d_ff),
        f"{prefix}.w2": glorot((d_ff, d), seed, f"{prefix}.w2"),
        f"{prefix}.b2": np.zeros(d),
    }


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Fresh parameters.  Each tensor draws from its own named stream, so the
    values of one parameter never depend on which other modules exist."""
    d, H = cfg.d, cfg.score_mlp_hidden
    p = {
        "score.w1": glorot((1, H), seed, "score.w1"),
        "score.b1": np.zeros(H),
        "score.w2": glorot((H, d), seed, "score.w2"),
        "score.b2": np.zeros(d),
        "e_feat": normal((cfg.F, d), seed, "e_feat"),
        "e_group": normal((3, d), seed, "e_group"),
        "proj.w": glorot((cfg.d_e, d), seed, "proj.w"),
        "proj.b": np.zeros(d),
    }
    p.update(ln_params("proj.ln", d))
    for i in range(cfg.L_enc):
        p.update(ln_params(f"enc{i}.ln1", d))
        p.update(attention_params(f"enc{i}.attn", d, seed))
        p.update(ln_params(f"enc{i}.ln2", d))
        p.update(ff_params(f"enc{i}.ff", d, cfg.d_ff, seed))
    if cfg.L_enc:
        p.update(ln_params("enc.ln_f", d))
    if cfg.readout == "symptom-query":
        p["queries"] = normal((cfg.J, d), seed, "queries")
        for i in range(cfg.L_dec):
            if cfg.decoder_self_attn:
                p.update(ln_params(f"dec{i}.ln_sa", d))
                p.update(attention_params(f"dec{i}.sa", d, seed))
            p.update(ln_params(f"dec{i}.ln_ca", d))
            p.update(attention_params(f"dec{i}.ca", d, seed))
            p.update(ln_params(f"dec{i}.ln_ff", d))
            p.update(ff_params(f"dec{i}.ff", d, cfg.d_ff, seed))
        if cfg.L_dec:
            p.update(ln_params("dec.ln_f", d))
    lim = np.sqrt(6.0 / (d + 1))
    p["head.w"] = stream(seed, "init/head.w").uniform(-lim, lim, size=(cfg.J, d))
    p["head.b"] = np.zeros(cfg.J)
    p.update(mem.init_memory_params(cfg, seed))
    return p


def count_params(params) -> int:
    return int(sum(v.size for v in params.values()))


def sub(params, prefix):
    """View of ``prefix.*`` entries with the prefix stripped."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# -- batches --------------------------------------------------------------------

@dataclass
class Example:
    """One model-ready session."""
    run_id: str
    session_index: int
    z: np.ndarray
    turns: np.ndarray
    prev_turns: Optional[np.ndarray] = None
    label_items: Optional[np.ndarray] = None
    target_total: Optional[float] = None
    target_items: Optional[np.ndarray] = None


@dataclass
class Batch:
    z: np.ndarray               # (B, F)
    turns: np.ndarray           # (B, N, d_e)
    turn_mask: np.ndarray       # (B, N) bool
    prev: Optional[np.ndarray]  # (B, M, d_e)
    prev_mask: Optional[np.ndarray]
    has_prev: np.ndarray        # (B,) bool
    label_items: Optional[np.ndarray] = None

    @property
    def size(self):
        return self.z.shape[0]


def _pad(mats, d_e):
    n = max(m.shape[0] for m in mats)
    out = np.zeros((len(mats), n, d_e))
    mask = np.zeros((len(mats), n), dtype=bool)
    for i, m in enumerate(mats):
        out[i, :m.shape[0]] = m
        mask[i, :m.shape[0]] = True
    return out, mask


def make_batch(examples) -> Batch:
    d_e = examples[0].turns.shape[1]
    turns, tmask = _pad([e.turns for e in examples], d_e)
    has_prev = np.array([e.prev_turns is not None for e in examples])
    prev = pmask = None
    if has_prev.any():
        empty = np.zeros((1, d_e))
        prev, pmask = _pad([e.prev_turns if e.prev_turns is not None else empty for e in examples], d_e)
    labels = None
    if all(e.label_items is not None for e in examples):
        labels = np.stack([e.label_items for e in examples])
    return Batch(np.stack([e.z for e in examples]), turns, tmask, prev, pmask, has_prev, labels)


# -- forward pieces ---------------------------------------------------------------

class Run:
    """Per-call stochastic context: training flag plus named dropout streams."""

    def __init__(self, mode="eval", seed=0, step=0, p_drop=0.0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.training = mode == "train"
        self.seed, self.step, self.p_drop = seed, step, p_drop

    def rng(self, label):
        return stream(self.seed, label, self.step)

    def drop(self, x, label):
        if not self.training or self.p_drop == 0.0:
            return x
        return nx.dropout(x, self.p_drop, self.rng(label), True)

    def attn_kw(self, label):
        if not self.training:
            return {}
        return {"rng": self.rng(label + "/attn"), "p_drop": self.p_drop, "training": True}


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def ln(x, P, prefix, eps=1e-5):
    return nx.layer_norm(x, P[prefix + ".g"], P[prefix + ".b"], eps)


def feed_forward(x, P, prefix):
    h = nx.gelu(nx.linear(x, P[prefix + ".w1"], P[prefix + ".b1"]))
    return nx.linear(h, P[prefix + ".w2"], P[prefix + ".b2"])


def embed_clinical_features(z, P, cfg: ModelConfig, run: Run = None):
    """(B, F) normalised scores -> (B, F, d) tokens: score MLP + feature id + group id."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cfg.F:
        raise ValueError(f"expected {cfg.F} feature scores, got {z.shape[-1]}")
    hidden = nx.gelu(nx.linear(z[..., None], P["score.w1"], P["score.b1"]))
    score = nx.linear(hidden, P["score.w2"], P["score.b2"])
    groups = nx.take_rows(P["e_group"], np.asarray(cfg.group_map) - 1)
    tok = score + (P["e_feat"] + groups)
    return tok if run is None else run.drop(tok, "drop/clinical")


def embed_dialogue_turns(U, P, cfg: ModelConfig, run: Run = None, with_positions=True):
    """(B, N, d_e) turn embeddings -> (B, N, d) tokens."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape[-1] != cfg.d_e:
        raise ValueError(f"turn embeddings have dim {U.shape[-1]}, model expects d_e={cfg.d_e}")
    s = ln(nx.linear(U, P["proj.w"], P["proj.b"]), P, "proj.ln", cfg.ln_eps)
    if with_positions:
        s = s + sinusoidal_positions(U.shape[-2], cfg.d)
    return s if run is None else run.drop(s, "drop/dialogue")


def encoder_block(x, mask, P, i, cfg, run):
    pre = f"enc{i}"
    h = ln(x, P, pre + ".ln1", cfg.ln_eps)
    a = nx.multi_head_attention(h, h, h, sub(P, pre + ".attn"), cfg.h, mask, **run.attn_kw(pre))
    x = x + run.drop(a, pre + "/drop1")
    h = ln(x, P, pre + ".ln2", cfg.ln_eps)
    return x + run.drop(feed_forward(h, P, pre + ".ff"), pre + "/drop2")


def encode_session(X, mask, P, cfg: ModelConfig, run: Run):
    """Pre-norm transformer encoder over the joint token sequence."""
    for i in range(cfg.L_enc):
        X = encoder_block(X, mask, P, i, cfg, run)
    if cfg.L_enc:
        X = ln(X, P, "enc.ln_f", cfg.ln_eps)
    return X


def decoder_block(q, enc, mask, P, i, cfg, run):
    pre = f"dec{i}"
    if cfg.decoder_self_attn:
        h = ln(q, P, pre + ".ln_sa", cfg.ln_eps)
        a = nx.multi_head_attention(h, h, h, sub(P, pre + ".sa"), cfg.h, None, **run.attn_kw(pre + ".sa"))
        q = q + run.drop(a, pre + "/drop_sa")
    h = ln(q, P, pre + ".ln_ca", cfg.ln_eps)
    a = nx.multi_head_attention(h, enc, enc, sub(P, pre + ".ca"), cfg.h, mask, **run.attn_kw(pre + ".ca"))
    q = q + run.drop(a, pre + "/drop_ca")
    h = ln(q, P, pre + ".ln_ff", cfg.ln_eps)
    return q + run.drop(feed_forward(h, P, pre + ".ff"), pre + "/drop_ff")


def decode_symptoms(enc, mask, P, cfg: ModelConfig, run: Run):
    """J learned queries read the encoded session; returns (B, J, d)."""
    B = enc.shape[0]
    D = nx.broadcast_to(P["queries"], (B, cfg.J, cfg.d))
    for i in range(cfg.L_dec):
        D = decoder_block(D, enc, mask, P, i, cfg, run)
    if cfg.L_dec:
        D = ln(D, P, "dec.ln_f", cfg.ln_eps)
    return D


def mean_pool_readout(enc, mask, cfg: ModelConfig):
    """Masked mean of encoder outputs, copied to every symptom row."""
    w = mask.astype(np.float64)
    w = w / w.sum(axis=1, keepdims=True)
    pooled = nx.sum_(enc * w[..., None], axis=1, keepdims=True)
    return nx.broadcast_to(pooled, (enc.shape[0], cfg.J, cfg.d))


def predict_items(D, P):
    """3 * sigmoid(w_j . d_j + b_j) per symptom, plus their sum."""
    logits = nx.sum_(D * P["head.w"], axis=-1) + P["head.b"]
    items = nx.sigmoid(logits) * 3.0
    return items, nx.sum_(items, axis=-1)


# -- full forward ----------------------------------------------------------------

def forward(P, cfg: ModelConfig, batch: Batch, mode="eval", seed=0, step=0, p_hist=0.0):
    """Predict per-symptom scores (B, J) and totals (B,) for a batch.

    ``P`` maps names to arrays or Tensors.  In train mode, dropout and
    history dropout draw from streams keyed by (seed, label, step).
    """
    run = Run(mode, seed, step, cfg.dropout)
    tok = []
    key_mask = []
    B = batch.size
    if cfg.input_source in ("both", "features"):
        tok.append(embed_clinical_features(batch.z, P, cfg, run))
        key_mask.append(np.ones((B, cfg.F), dtype=bool))
    if cfg.input_source in ("both", "embeddings"):
        U = np.where(batch.turn_mask[..., None], batch.turns, 0.0)
        tok.append(embed_dialogue_turns(U, P, cfg, run))
        key_mask.append(batch.turn_mask)
    X = tok[0] if len(tok) == 1 else nx.concat(tok, axis=1)
    mask = key_mask[0] if len(key_mask) == 1 else np.concatenate(key_mask, axis=1)

    enc = encode_session(X, mask, P, cfg, run)
    if cfg.readout == "symptom-query":
        D = decode_symptoms(enc, mask, P, cfg, run)
    else:
        D = mean_pool_readout(enc, mask, cfg)

    if cfg.memory_mode != "none" and batch.prev is not None:
        use = mem.history_gate(batch.has_prev, p_hist, mode, seed, step)
        if use.any():
            D = mem.refine(D, batch, use, P, cfg, run)
    return predict_items(D, P)


def as_tensors(params, requires_grad=False):
    return {k: nx.Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def predict(params, cfg: ModelConfig, examples, batch_size=64):
    """Eval-mode predictions for a list of Examples: (items (n, J), totals (n,))."""
    P = as_tensors(params)
    items, totals = [], []
    for i in range(0, len(examples), batch_size):
        y, t = forward(P, cfg, make_batch(examples[i:i + batch_size]), mode="eval")
        items.append(y.data)
        totals.append(t.data)
    return np.concatenate(items), np.concatenate(totals)
