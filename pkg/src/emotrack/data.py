"""Session corpus: records, JSONL/sidecar I/O, feature statistics, splits."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .rng import fisher_yates, stream

J = 8
SPEAKERS = ("client", "counselor")
VIEWS = ("client", "counselor", "both")
SPLITS = ("train", "val", "test")
STD_FLOOR = 1e-6
SIDECAR_MAGIC = b"EMOT"
SIDECAR_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent corpus content."""


class UnusableSession(DataError):
    """No turns survive speaker filtering."""


@dataclass(frozen=True)
class Turn:
    speaker: str
    embedding: np.ndarray
    text: Optional[str] = None


@dataclass(frozen=True)
class Labels:
    items: np.ndarray
    total: float


@dataclass(frozen=True)
class SessionRecord:
    client_id: str
    session_index: int
    turns: tuple
    features: np.ndarray
    labels: Optional[Labels] = None
    latent_items: Optional[np.ndarray] = None
    run_id: Optional[str] = None

    @property
    def trajectory_id(self) -> str:
        return self.run_id if self.run_id is not None else self.client_id

    def eval_total(self) -> float:
        """Evaluation target: latent total when known, else the label total."""
        if self.latent_items is not None:
            return float(np.sum(self.latent_items))
        if self.labels is None:
            raise DataError(f"session {self.client_id}#{self.session_index} has no target")
        return self.labels.total

    def eval_items(self):
        if self.latent_items is not None:
            return self.latent_items
        return None if self.labels is None else self.labels.items


@dataclass(frozen=True)
class TrajectoryRecord:
    run_id: str
    sessions: tuple

    @property
    def client_id(self) -> str:
        return self.sessions[0].client_id


@dataclass(frozen=True)
class Corpus:
    d_e: int
    F: int
    trajectories: list = field(default_factory=list)

    def sessions(self):
        for traj in self.trajectories:
            yield from traj.sessions

    def by_run(self):
        return {t.run_id: t for t in self.trajectories}


def total_score(items) -> float:
    items = np.asarray(items, dtype=np.float64)
    if items.shape != (J,):
        raise DataError(f"expected {J} items, got shape {items.shape}")
    if np.any(items < 0) or np.any(items > 3):
        raise DataError(f"item scores must lie in [0, 3], got {items.tolist()}")
    return float(items.sum())


# -- ingestion -------------------------------------------------------------------

def read_sidecar(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != SIDECAR_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != SIDECAR_VERSION:
        raise DataError(f"{path}: unsupported sidecar version {version}")
    body = raw[16:]
    if len(body) != rows * cols * 4:
        raise DataError(f"{path}: expected {rows}x{cols} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def write_sidecar(path, matrix) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    rows, cols = m.shape
    Path(path).write_bytes(SIDECAR_MAGIC + struct.pack("<III", SIDECAR_VERSION, rows, cols) + m.tobytes())


def _parse_session(obj, lineno, d_e, F, sidecar):
    where = f"line {lineno}"
    try:
        client_id = str(obj["client_id"])
        index = obj["session_index"]
        raw_turns = obj["turns"]
        features = np.asarray(obj["features"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: missing or malformed field ({exc})") from exc
    if not isinstance(index, int) or index < 1:
        raise DataError(f"{where}: session_index must be an integer >= 1")
    name = f"{client_id}#{index}"
    if features.shape != (F,):
        raise DataError(f"{where}: session {name} field 'features' has length {features.size}, expected {F}")
    if not np.all(np.isfinite(features)):
        raise DataError(f"{where}: session {name} field 'features' has non-finite values")

    turns = []
    for k, t in enumerate(raw_turns):
        speaker = t.get("speaker")
        if speaker not in SPEAKERS:
            raise DataError(f"{where}: session {name} turn {k} has speaker {speaker!r}")
        if "embedding_ref" in t:
            if sidecar is None:
                raise DataError(f"{where}: session {name} references a sidecar but none was given")
            emb = sidecar[int(t["embedding_ref"])]
        else:
            emb = np.asarray(t.get("embedding"), dtype=np.float64)
        if emb.shape != (d_e,):
            raise DataError(f"{where}: session {name} turn {k} embedding length {emb.size} != d_e {d_e}")
        if not np.all(np.isfinite(emb)):
            raise DataError(f"{where}: session {name} turn {k} embedding has non-finite values")
        turns.append(Turn(speaker, emb, t.get("text")))

    labels = None
    if obj.get("labels") is not None:
        lab = obj["labels"]
        items = np.asarray(lab.get("items"), dtype=np.float64)
        if items.shape != (J,):
            raise DataError(f"{where}: session {name} field 'labels.items' has {items.size} values, expected {J}")
        try:
            total = total_score(items)
        except DataError as exc:
            raise DataError(f"{where}: session {name} field 'labels.items': {exc}") from exc
        given = float(lab.get("total", total))
        if abs(given - total) > 1e-9:
            raise DataError(f"{where}: session {name} field 'labels.total' {given} != sum of items {total}")
        labels = Labels(items, given)

    latent = None
    if obj.get("latent_items") is not None:
        latent = np.asarray(obj["latent_items"], dtype=np.float64)
        if latent.shape != (J,):
            raise DataError(f"{where}: session {name} field 'latent_items' has {latent.size} values, expected {J}")
        try:
            total_score(latent)
        except DataError as exc:
            raise DataError(f"{where}: session {name} field 'latent_items': {exc}") from exc

    return SessionRecord(client_id, index, tuple(turns), features, labels, latent,
                         None if obj.get("run_id") is None else str(obj["run_id"]))


def load_dataset(path, sidecar=None) -> Corpus:
    """Read a session JSONL corpus.

    The first non-blank line is the header ``{"d_e": int, "F": int}``; it may
    name a ``"sidecar"`` file relative to the corpus.  An empty file yields an
    empty corpus with ``d_e = F = 0``.
    """
    path = Path(path)
    header = None
    sessions = []
    matrix = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            if header is None:
                if "d_e" not in obj or "F" not in obj:
                    raise DataError(f"line {lineno}: corpus header must declare d_e and F")
                header = obj
                side = sidecar if sidecar is not None else obj.get("sidecar")
                if side is not None:
                    side = Path(side)
                    matrix = read_sidecar(side if side.is_absolute() else path.parent / side)
                continue
            sessions.append(_parse_session(obj, lineno, int(header["d_e"]), int(header["F"]), matrix))
    if header is None:
        return Corpus(0, 0, [])
    return Corpus(int(header["d_e"]), int(header["F"]), group_trajectories(sessions))


def group_trajectories(sessions) -> list:
    groups = {}
    for s in sessions:
        groups.setdefault(s.trajectory_id, []).append(s)
    out = []
    for run_id, items in groups.items():
        items.sort(key=lambda s: s.session_index)
        clients = {s.client_id for s in items}
        if len(clients) != 1:
            raise DataError(f"trajectory {run_id} mixes clients {sorted(clients)}")
        idx = [s.session_index for s in items]
        if idx != list(range(1, len(idx) + 1)):
            raise DataError(f"trajectory {run_id} has non-contiguous session indices {idx}")
        out.append(TrajectoryRecord(run_id, tuple(items)))
    return out


def _session_json(s: SessionRecord) -> dict:
    obj = {"client_id": s.client_id}
    if s.run_id is not None:
        obj["run_id"] = s.run_id
    obj["session_index"] = s.session_index
    turns = []
    for t in s.turns:
        tj = {"speaker": t.speaker, "embedding": [float(v) for v in t.embedding]}
        if t.text is not None:
            tj["text"] = t.text
        turns.append(tj)
    obj["turns"] = turns
    obj["features"] = [float(v) for v in s.features]
    obj["labels"] = None if s.labels is None else {
        "items": [float(v) for v in s.labels.items], "total": float(s.labels.total)}
    obj["latent_items"] = None if s.latent_items is None else [float(v) for v in s.latent_items]
    return obj


def save_dataset(path, corpus: Corpus) -> None:
    """Write a corpus as JSONL; ``load_dataset`` reproduces it bit-for-bit."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"d_e": corpus.d_e, "F": corpus.F}) + "\n")
        for s in corpus.sessions():
            fh.write(json.dumps(_session_json(s), separators=(",", ":")) + "\n")


# -- turn handling ------------------------------------------------------------

def filter_turns(session: SessionRecord, view: str = "client") -> list:
    if view not in VIEWS:
        raise ValueError(f"unknown speaker view {view!r}")
    kept = [t for t in session.turns
            if (view == "both" or t.speaker == view)
            and not (t.text is not None and not t.text.strip())]
    if not kept:
        raise UnusableSession(
            f"session {session.client_id}#{session.session_index} has no usable {view} turns")
    return kept


def truncate_turns(turns, n_max: int = 80) -> list:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    return list(turns[:n_max])


def turn_matrix(session, view="client", n_max=80) -> np.ndarray:
    turns = truncate_turns(filter_turns(session, view), n_max)
    return np.stack([t.embedding for t in turns])


# -- feature statistics ---------------------------------------------------------

@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


def fit_feature_stats(sessions) -> FeatureStats:
    x = np.stack([s.features for s in sessions])
    if x.shape[0] == 0:
        raise DataError("need at least one training session")
    # population std, floored
    return FeatureStats(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))


def z_normalize(features, stats: FeatureStats) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - stats.mean) / np.maximum(stats.std, STD_FLOOR)


# -- split manifest -----------------------------------------------------------

@dataclass(frozen=True)
class SplitManifest:
    seed: int
    ratios: tuple
    assignments: dict

    def ids(self, split):
        return sorted(k for k, v in self.assignments.items() if v == split)

    def counts(self):
        return tuple(len(self.ids(s)) for s in SPLITS)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "ratios": list(self.ratios),
                           "assignments": dict(sorted(self.assignments.items()))}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        obj = json.loads(text)
        bad = {v for v in obj["assignments"].values()} - set(SPLITS)
        if bad:
            raise DataError(f"manifest has unknown splits {sorted(bad)}")
        return cls(int(obj["seed"]), tuple(obj["ratios"]), dict(obj["assignments"]))

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_split_manifest(run_ids, seed: int = 42, ratios=(0.7, 0.1, 0.2)) -> SplitManifest:
    """Sort ids, Fisher-Yates shuffle, then cut at floor(r1*n) and floor((r1+r2)*n)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = list(run_ids)
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"duplicate run ids: {dup[:5]}")
    order = fisher_yates(sorted(ids), stream(seed, "split-manifest"))
    n = len(order)
    b1 = math.floor(ratios[0] * n + 1e-9)
    b2 = math.floor((ratios[0] + ratios[1]) * n + 1e-9)
    assignments = {}
    for k, rid in enumerate(order):
        assignments[rid] = "train" if k < b1 else ("val" if k < b2 else "test")
    return SplitManifest(seed, ratios, assignments)


def split_corpus(corpus: Corpus, manifest: SplitManifest) -> dict:
    """Trajectories per split; trajectories missing from the manifest are an error."""
    out = {s: [] for s in SPLITS}
    for traj in corpus.trajectories:
        split = manifest.assignments.get(traj.run_id)
        if split is None:
            raise DataError(f"trajectory {traj.run_id} is not in the split manifest")
        out[split].append(traj)
    return out
