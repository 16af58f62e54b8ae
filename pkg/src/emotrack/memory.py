"""Previous-session memory: slot compression, gated retrieval, gated summary."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .rng import stream


def init_memory_params(cfg, seed) -> dict:
    from .model import attention_params, glorot, ln_params, normal

    if cfg.memory_mode == "none":
        return {}
    d = cfg.d
    p = {
        "mem.proj.w": glorot((cfg.d_e, d), seed, "mem.proj.w"),
        "mem.proj.b": np.zeros(d),
        "mem.sum.w": glorot((d, d), seed, "mem.sum.w"),
        "mem.sum.b": np.zeros(d),
        "mem.sgate.w": glorot((2 * d, d), seed, "mem.sgate.w"),
        "mem.sgate.b": np.zeros(d),
    }
    if cfg.memory_mode == "summary+retrieval":
        p["mem.slots"] = normal((cfg.S, d), seed, "mem.slots")
        p.update(attention_params("mem.slot_attn", d, seed))
        p.update(ln_params("mem.slot_ln", d))
        p.update(attention_params("mem.ret_attn", d, seed))
        p["mem.gate.w"] = glorot((2 * d, d), seed, "mem.gate.w")
        p["mem.gate.b"] = np.zeros(d)
        p["mem.out.w"] = glorot((d, d), seed, "mem.out.w")
    return p


def _sub(P, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in P.items() if k.startswith(prefix + ".")}


def project_history(U_prev, P, cfg):
    """Affine map of previous-session turn embeddings into model space."""
    U_prev = np.asarray(U_prev, dtype=np.float64)
    if U_prev.shape[-1] != cfg.d_e:
        raise ValueError(f"history embeddings have dim {U_prev.shape[-1]}, expected d_e={cfg.d_e}")
    return nx.linear(U_prev, P["mem.proj.w"], P["mem.proj.b"])


def build_slot_memory(V, mask, P, cfg, run=None):
    """S learned slots attend over V; returns LN(MHA(slots, V, V)) of shape (..., S, d)."""
    slots = P["mem.slots"]
    if V.ndim == 3:
        slots = nx.broadcast_to(slots, (V.shape[0], cfg.S, cfg.d))
    kw = {} if run is None else run.attn_kw("mem.slot")
    M = nx.multi_head_attention(slots, V, V, _sub(P, "mem.slot_attn"), cfg.h, mask, **kw)
    return nx.layer_norm(M, P["mem.slot_ln.g"], P["mem.slot_ln.b"], cfg.ln_eps)


def retrieve_and_gate(D, M, P, cfg, run=None):
    """D + sigmoid(W_g [D; C]) * W_o C with C = MHA(D, M, M)."""
    kw = {} if run is None else run.attn_kw("mem.ret")
    C = nx.multi_head_attention(D, M, M, _sub(P, "mem.ret_attn"), cfg.h, None, **kw)
    gate = nx.sigmoid(nx.linear(nx.concat([D, C], axis=-1), P["mem.gate.w"], P["mem.gate.b"]))
    return D + gate * nx.matmul(C, P["mem.out.w"])


def summary_vector(V, mask, P):
    """Masked mean of V rows, then a learned affine map; shape (..., 1, d)."""
    if mask is None:
        mask = np.ones(V.shape[:-1], dtype=bool)
    w = mask.astype(np.float64)
    w = w / w.sum(axis=-1, keepdims=True)
    pooled = nx.sum_(V * w[..., None], axis=-2, keepdims=True)
    return nx.linear(pooled, P["mem.sum.w"], P["mem.sum.b"])


def summary_gate(D, V, mask, P, cfg):
    """D + sigmoid(W_g' [D; v]) * v with the mapped summary v broadcast over symptoms."""
    v = nx.broadcast_to(summary_vector(V, mask, P), D.shape)
    gate = nx.sigmoid(nx.linear(nx.concat([D, v], axis=-1), P["mem.sgate.w"], P["mem.sgate.b"]))
    return D + gate * v


def history_gate(has_history, p_hist, mode, seed=0, step=0):
    """Which examples use their previous session.

    Eval mode: every example that has one.  Train mode: each is kept with
    probability 1 - p_hist, drawn from the ``history`` stream.
    """
    has = np.atleast_1d(np.asarray(has_history, dtype=bool))
    if not 0.0 <= p_hist <= 1.0:
        raise ValueError("p_hist must lie in [0, 1]")
    if mode != "train":
        return has
    u = stream(seed, "history", step).random(has.shape)
    return has & (u >= p_hist)


def refine(D, batch, use, P, cfg, run=None):
    """Apply retrieval (if enabled) then summary updates to the rows selected by ``use``."""
    idx = np.flatnonzero(use)
    B = D.shape[0]
    prev = batch.prev[idx]
    pmask = batch.prev_mask[idx]
    prev = np.where(pmask[..., None], prev, 0.0)

    Dsub = nx.take_rows(D, idx)
    V = project_history(prev, P, cfg)
    if cfg.memory_mode == "summary+retrieval":
        M = build_slot_memory(V, pmask, P, cfg, run)
        Dsub = retrieve_and_gate(Dsub, M, P, cfg, run)
    Dsub = summary_gate(Dsub, V, pmask, P, cfg)

    keep = np.ones((B, 1, 1))
    keep[idx] = 0.0
    return D * keep + nx.scatter_rows(Dsub, idx, B)
