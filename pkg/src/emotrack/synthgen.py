"""Deterministic desk-scale fixture corpus with known latent symptom trajectories.

Chain per client: trend class -> quarterly (start, end) windows -> five anchor
totals -> hashed decomposition into 8 items per visit -> turn embeddings and
feature scores planted from those items -> averaged noisy self-reports.

Embeddings for session t carry B @ s_t, where s_t holds the observable items
of visit t and, in the hidden coordinates, the items of visit t+1.  Hidden
items of visit t are therefore visible only in session t-1's turns, which is
the signal the previous-session memory has to find.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, default_group_map, format_kv, parse_kv
from .data import (J, Corpus, Labels, SessionRecord, SplitManifest, TrajectoryRecord, Turn,
                   build_split_manifest, save_dataset)
from .rng import hash64, stream

TRENDS = ("stable", "improving", "worsening", "fluctuating")
N_VISITS = 5
BUCKET_SIZE = 64


@dataclass(frozen=True)
class GeneratorConfig:
    n_clients: int = 200
    client_turns: int = 20
    counselor_turns: int = 20
    d_e: int = 32
    F: int = 23
    hist_fraction: float = 0.0
    hidden_symptoms: tuple = ()
    embed_noise: float = 1.0
    feature_noise: float = 1.0
    p_flip: float = 0.1
    passes: int = 5
    boundary_disagree: float = 0.3
    seed: int = 42
    split_seed: int = 42
    ratios: tuple = (0.7, 0.1, 0.2)
    round_decimals: int = 6

    def __post_init__(self):
        object.__setattr__(self, "hidden_symptoms", tuple(int(j) for j in self.hidden_symptoms))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.n_clients < 1 or self.client_turns < 1 or self.counselor_turns < 0:
            raise ConfigError("n_clients and client_turns must be >= 1")
        if not 0.0 <= self.hist_fraction <= 1.0:
            raise ConfigError("hist_fraction must lie in [0, 1]")
        if any(not 0 <= j < J for j in self.hidden_symptoms):
            raise ConfigError(f"hidden_symptoms must index 0..{J - 1}")
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {self.ratios}")
        if self.passes < 1:
            raise ConfigError("passes must be >= 1")
        if not 0.0 <= self.p_flip <= 1.0:
            raise ConfigError("p_flip must lie in [0, 1]")

    def hidden_mask(self) -> np.ndarray:
        """Boolean (J,) mask of history-dependent symptoms."""
        mask = np.zeros(J, dtype=bool)
        if self.hidden_symptoms:
            mask[list(self.hidden_symptoms)] = True
            return mask
        k = int(round(self.hist_fraction * J))
        if k:
            chosen = stream(self.seed, "synth/hidden").permutation(J)[:k]
            mask[np.sort(chosen)] = True
        return mask

    def to_kv(self) -> str:
        return format_kv(dataclasses.asdict(self))

    @classmethod
    def from_kv(cls, text: str, source="<generator config>") -> "GeneratorConfig":
        raw = parse_kv(text, source)
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in raw.items():
            if k not in types:
                raise ConfigError(f"unknown generator key {k!r}")
            t = types[k]
            try:
                if t in ("int", int):
                    kw[k] = int(v)
                elif t in ("float", float):
                    kw[k] = float(v)
                else:
                    kw[k] = tuple(p.strip() for p in v.split(",") if p.strip())
            except ValueError as exc:
                raise ConfigError(f"{k}: cannot parse {v!r}") from exc
        if "ratios" in kw:
            total = sum(float(r) for r in kw["ratios"])
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"ratios: values must sum to 1, got {total}")
        return cls(**kw)


# -- trajectories -----------------------------------------------------------------

def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def reconstruct_anchor_chain(windows) -> list:
    """Chain four quarterly (start, end) windows into five visit anchors.

    Visit 1 is the first start; visit k+1 is the end of window k.  Where the
    end of window k and the start of window k+1 disagree, their mean (rounded
    half up) is used.
    """
    windows = [tuple(w) for w in windows]
    if len(windows) != N_VISITS - 1:
        raise ValueError(f"expected {N_VISITS - 1} windows, got {len(windows)}")
    for w in windows:
        for v in w:
            if not 0 <= v <= 24:
                raise ValueError(f"score {v} outside [0, 24]")
    anchors = [int(windows[0][0])]
    for k, (_, end) in enumerate(windows):
        if k + 1 < len(windows) and windows[k + 1][0] != end:
            anchors.append(round_half_up((end + windows[k + 1][0]) / 2))
        else:
            anchors.append(int(end))
    return anchors


def trend_class(anchors) -> str:
    a = list(anchors)
    delta = a[-1] - a[0]
    if delta <= -3:
        return "improving"
    if delta >= 3:
        return "worsening"
    if max(a) - min(a) >= 5:
        return "fluctuating"
    return "stable"


def _draw_anchors(trend, rng):
    if trend == "stable":
        base = rng.integers(2, 21)
        a = base + rng.integers(-1, 2, size=N_VISITS)
    elif trend in ("improving", "worsening"):
        hi = rng.integers(9, 23)
        lo = max(0, hi - rng.integers(4, 11))
        a = np.round(np.linspace(hi, lo, N_VISITS)).astype(int) + rng.integers(-1, 2, size=N_VISITS)
        if trend == "worsening":
            a = a[::-1]
    else:
        base = rng.integers(6, 18)
        amp = rng.integers(3, 5)
        sign = rng.choice([-1, 1])
        a = base + sign * amp * np.array([0, 1, -1, 1, 0]) + rng.integers(-1, 2, size=N_VISITS)
    return [int(v) for v in np.clip(a, 0, 24)]


def _windows_from_anchors(anchors, p_disagree, rng):
    windows = []
    for k in range(N_VISITS - 1):
        start = anchors[k]
        if k > 0 and rng.random() < p_disagree:
            start = int(np.clip(start + rng.choice([-1, 1]), 0, 24))
        windows.append((start, anchors[k + 1]))
    return windows


def sample_trajectory(trend, rng, p_disagree=0.3, max_tries=1000):
    """Quarterly windows and reconstructed anchors whose trend class matches ``trend``."""
    for _ in range(max_tries):
        anchors = _draw_anchors(trend, rng)
        windows = _windows_from_anchors(anchors, p_disagree, rng)
        # the first window's start is the first anchor
        windows[0] = (anchors[0], windows[0][1])
        rebuilt = reconstruct_anchor_chain(windows)
        if trend_class(rebuilt) == trend:
            return windows, rebuilt
    raise RuntimeError(f"could not sample a {trend} trajectory")


# -- symptom decomposition ---------------------------------------------------------

def candidate_buckets(seed: int, size: int = BUCKET_SIZE) -> dict:
    """total -> sorted list of distinct 8-item vectors with that sum (interior totals)."""
    buckets = {}
    for total in range(1, 24):
        rng = stream(seed, "synth/bucket", total)
        # per-bucket symptom propensities give co-occurrence structure
        found = set()
        for _ in range(size * 20):
            w = rng.gamma(1.0, 1.0, size=J)
            v = np.zeros(J, dtype=int)
            for _ in range(total):
                open_ = v < 3
                p = w * open_
                v[rng.choice(J, p=p / p.sum())] += 1
            found.add(tuple(int(x) for x in v))
            if len(found) >= size:
                break
        buckets[total] = sorted(found)
    return buckets


def decompose_total(total, bucket, seed, participant_id, visit_index) -> np.ndarray:
    if total == 0:
        return np.zeros(J, dtype=int)
    if total == 24:
        return np.full(J, 3, dtype=int)
    if not bucket:
        raise ValueError(f"no candidate vectors for total {total}")
    k = hash64(seed, participant_id, visit_index, total) % len(bucket)
    items = np.array(bucket[k], dtype=int)
    assert items.sum() == total
    return items


# -- self-reports -------------------------------------------------------------------

def simulate_self_report(latent_items, passes=5, p_flip=0.1, rng=None):
    """Average of ``passes`` noisy answers; each item moves +-1 w.p. p_flip, clipped to [0, 3]."""
    latent = np.asarray(latent_items, dtype=np.float64)
    if passes < 1:
        raise ValueError("passes must be >= 1")
    if p_flip == 0.0:
        answers = np.tile(latent, (passes, 1))
    else:
        flip = rng.random((passes, latent.size)) < p_flip
        sign = np.where(rng.random((passes, latent.size)) < 0.5, -1.0, 1.0)
        answers = np.clip(latent + flip * sign, 0.0, 3.0)
    items = answers.mean(axis=0)
    return items, float(items.sum())


def expected_report_error(latent_value, passes=5, p_flip=0.1):
    """E|mean of clipped noisy passes - latent| by enumerating all 3**passes outcomes."""
    import itertools

    moves = ((-1, p_flip / 2), (0, 1 - p_flip), (1, p_flip / 2))
    total = 0.0
    for combo in itertools.product(moves, repeat=passes):
        prob = math.prod(p for _, p in combo)
        vals = [min(3, max(0, latent_value + m)) for m, _ in combo]
        total += prob * abs(sum(vals) / passes - latent_value)
    return total


# -- sessions ---------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusCoefficients:
    basis: np.ndarray         # (d_e, J)
    feat_w: np.ndarray        # (F, J)
    feat_a: np.ndarray        # (F,)
    feat_b: np.ndarray        # (F,)


def corpus_coefficients(cfg: GeneratorConfig) -> CorpusCoefficients:
    rng = stream(cfg.seed, "synth/coefficients")
    basis = rng.normal(0.0, 1.0, size=(cfg.d_e, J))
    groups = default_group_map(cfg.F)
    feat_w = np.zeros((cfg.F, J))
    for i, g in enumerate(groups):
        if g == 1:
            feat_w[i, i % J] = 1.0
        else:
            w = rng.gamma(0.5, 1.0, size=J)
            feat_w[i] = w / w.sum()
    feat_a = rng.uniform(2.0, 3.0, size=cfg.F)
    feat_b = rng.uniform(0.0, 1.5, size=cfg.F)
    return CorpusCoefficients(basis, feat_w, feat_a, feat_b)


def speaker_order(n_client, n_counselor):
    """Counselor opens, then speakers alternate; leftovers go at the end."""
    order = []
    for k in range(max(n_client, n_counselor)):
        if k < n_counselor:
            order.append("counselor")
        if k < n_client:
            order.append("client")
    return order


def synthesize_session(client_id, visit, items, next_items, coef: CorpusCoefficients,
                       cfg: GeneratorConfig, rng, labels=None):
    """One SessionRecord with planted turn embeddings and feature scores.

    ``items`` are visit t's latent items; ``next_items`` (or None at the last
    visit) supply the hidden coordinates.  Noise comes from ``rng``.
    """
    hidden = cfg.hidden_mask()
    items = np.asarray(items, dtype=np.float64)
    observed = np.where(hidden, 0.0, items)
    signal = observed.copy()
    if next_items is not None:
        signal = np.where(hidden, np.asarray(next_items, dtype=np.float64), observed)
    centre = coef.basis @ (signal / 3.0)

    turns = []
    for speaker in speaker_order(cfg.client_turns, cfg.counselor_turns):
        noise = rng.normal(0.0, cfg.embed_noise, size=cfg.d_e)
        emb = centre + noise if speaker == "client" else noise
        turns.append(Turn(speaker, np.round(emb, cfg.round_decimals)))

    raw = coef.feat_a * (coef.feat_w @ observed) + coef.feat_b
    raw = raw + rng.normal(0.0, cfg.feature_noise, size=cfg.F)
    features = np.round(np.clip(raw, 0.0, 10.0), cfg.round_decimals)

    lab = None
    if labels is not None:
        lab = Labels(np.asarray(labels[0], dtype=np.float64), float(labels[1]))
    return SessionRecord(client_id, visit, tuple(turns), features, lab,
                         items.astype(np.float64), None)


def generate_trajectory(i, cfg: GeneratorConfig, buckets, coef):
    trend = TRENDS[i % len(TRENDS)]
    pid = f"client{i:05d}"
    rng = stream(cfg.seed, "synth/client", i)
    windows, anchors = sample_trajectory(trend, rng, cfg.boundary_disagree)
    latent = [decompose_total(a, buckets.get(a, []), cfg.seed, pid, t + 1) for t, a in enumerate(anchors)]
    sessions = []
    for t in range(N_VISITS):
        srng = stream(cfg.seed, f"synth/session/{pid}", t + 1)
        report = simulate_self_report(latent[t], cfg.passes, cfg.p_flip, srng)
        nxt = latent[t + 1] if t + 1 < N_VISITS else None
        sessions.append(synthesize_session(pid, t + 1, latent[t], nxt, coef, cfg, srng, report))
    return TrajectoryRecord(pid, tuple(sessions)), trend, anchors


def generate_corpus(cfg: GeneratorConfig):
    """Return (Corpus, SplitManifest, per-client trend classes)."""
    buckets = candidate_buckets(cfg.seed)
    coef = corpus_coefficients(cfg)
    trajs, trends = [], {}
    for i in range(cfg.n_clients):
        traj, trend, _ = generate_trajectory(i, cfg, buckets, coef)
        trajs.append(traj)
        trends[traj.run_id] = trend
    corpus = Corpus(cfg.d_e, cfg.F, trajs)
    manifest = build_split_manifest([t.run_id for t in trajs], cfg.split_seed, cfg.ratios)
    return corpus, manifest, trends


def write_corpus(cfg: GeneratorConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus, manifest, _ = generate_corpus(cfg)
    paths = {"corpus": out / "corpus.jsonl", "manifest": out / "manifest.json",
             "generator_config": out / "generator.cfg"}
    save_dataset(paths["corpus"], corpus)
    manifest.save(paths["manifest"])
    paths["generator_config"].write_text(cfg.to_kv(), encoding="utf-8")
    return paths


# -- linear oracles -----------------------------------------------------------------

def _design(vectors):
    X = np.asarray(vectors)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def ols_oracle_mae(train_x, train_y, test_x, test_y) -> float:
    """Least-squares fit on train, MAE on test."""
    coef, *_ = np.linalg.lstsq(_design(train_x), np.asarray(train_y), rcond=None)
    pred = _design(test_x) @ coef
    return float(np.mean(np.abs(pred - np.asarray(test_y))))


def mean_client_embedding(session: SessionRecord) -> np.ndarray:
    return np.mean([t.embedding for t in session.turns if t.speaker == "client"], axis=0)


def oracle_table(corpus: Corpus, manifest: SplitManifest, with_previous=False, min_index=1):
    """(train_x, train_y, test_x, test_y) from mean client embeddings to latent totals."""
    rows = {"train": ([], []), "test": ([], [])}
    for traj in corpus.trajectories:
        split = manifest.assignments[traj.run_id]
        if split not in rows:
            continue
        for k, s in enumerate(traj.sessions):
            if s.session_index < min_index:
                continue
            x = mean_client_embedding(s)
            if with_previous:
                x = np.concatenate([x, mean_client_embedding(traj.sessions[k - 1])])
            rows[split][0].append(x)
            rows[split][1].append(float(np.sum(s.latent_items)))
    return rows["train"][0], rows["train"][1], rows["test"][0], rows["test"][1]


def baseline_mae(corpus: Corpus, manifest: SplitManifest) -> float:
    """MAE of predicting the mean training label total for every test session."""
    train = [s.labels.total for t in corpus.trajectories if manifest.assignments[t.run_id] == "train"
             for s in t.sessions]
    test = [s.eval_total() for t in corpus.trajectories if manifest.assignments[t.run_id] == "test"
            for s in t.sessions]
    return float(np.mean(np.abs(np.asarray(test) - np.mean(train))))
