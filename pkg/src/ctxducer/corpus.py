"""Synthetic conversational corpora and their on-disk formats.

Sessions are sequences of utterances ordered by start time. Each utterance
carries Gaussian feature frames emitted around per-phone centroids plus a
word transcript. With context strength kappa > 0, the first word of an
utterance is coupled to the closing phone of its predecessor and the last
word to the opening phone of its successor; those words are realized with a
dedicated acoustically-ambiguous phone, so they are recoverable only from
neighbouring utterances.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FormatError, ShapeError
from .quantizer import Codebook, quantize
from .seeding import derive_rng

_FEATURE_MAGIC = b"CTXF"
_FEATURE_VERSION = 1


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Utterance:
    session_id: str
    utterance_id: str
    index: int  # 1-based ordinal within the session
    start_ms: int
    transcript: tuple
    features: np.ndarray | None = None
    tokens: np.ndarray | None = None
    phone_labels: np.ndarray | None = None
    feature_file: str | None = None
    # in-memory generator ground truth: (first word coupled?, last word coupled?)
    context_flags: tuple = (False, False)

    @property
    def num_frames(self) -> int:
        if self.features is not None:
            return self.features.shape[0]
        if self.tokens is not None:
            return self.tokens.shape[0]
        return 0


@dataclass
class Session:
    session_id: str
    utterances: list

    def __post_init__(self):
        starts = [u.start_ms for u in self.utterances]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ShapeError(f"session {self.session_id}: start_ms must be strictly increasing")
        for i, u in enumerate(self.utterances):
            if u.index != i + 1:
                raise ShapeError(f"session {self.session_id}: indices must be contiguous from 1")


@dataclass
class GeneratorConfig:
    num_sessions: int = 4
    utterances_per_session: int = 6
    phone_count: int = 4
    feature_dim: int = 16
    emission_noise: float = 0.15
    mean_phone_duration: int = 2
    context_strength: float = 0.8
    seed: int = 0
    middle_words: int = 2

    def validate(self) -> None:
        if self.num_sessions < 1 or self.utterances_per_session < 1:
            raise ConfigError("num_sessions and utterances_per_session must be >= 1")
        if self.phone_count < 2:
            raise ConfigError("phone_count must be >= 2")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.emission_noise < 0:
            raise ConfigError("emission_noise must be >= 0")
        if self.mean_phone_duration < 1:
            raise ConfigError("mean_phone_duration must be >= 1")
        if not 0.0 <= self.context_strength <= 1.0:
            raise ConfigError("context_strength must lie in [0, 1]")
        if self.middle_words < 1:
            raise ConfigError("middle_words must be >= 1")


# ---------------------------------------------------------------------------
# word inventory
#
# Regular words are phone bigrams "w{p}_{q}". Edge words come in two
# families: "a{p}" opens an utterance (coupled to the predecessor's closing
# phone) and "b{p}" closes it (coupled to the successor's opening phone).
# Both families are realized with their own reserved phone, identical across
# the family, so the word identity is not acoustically recoverable in-place.


def regular_word(p: int, q: int) -> str:
    return f"w{p}_{q}"


def alpha_word(p: int) -> str:
    return f"a{p}"


def beta_word(p: int) -> str:
    return f"b{p}"


def word_inventory(phone_count: int) -> list:
    words = [regular_word(p, q) for p in range(phone_count) for q in range(phone_count)]
    words += [alpha_word(p) for p in range(phone_count)]
    words += [beta_word(p) for p in range(phone_count)]
    return words


@dataclass(frozen=True)
class Vocabulary:
    """Word-string <-> label-id map; id 0 is reserved for blank."""

    words: tuple

    @classmethod
    def from_transcripts(cls, sessions) -> "Vocabulary":
        seen = sorted({w for s in sessions for u in s.utterances for w in u.transcript})
        return cls(words=tuple(seen))

    @property
    def size(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return self._index[word]
        except AttributeError:
            object.__setattr__(self, "_index", {w: i + 1 for i, w in enumerate(self.words)})
            return self._index[word]

    def word_of(self, label: int) -> str:
        if not 1 <= label <= len(self.words):
            raise ShapeError(f"label {label} outside vocabulary of size {len(self.words)}")
        return self.words[label - 1]

    def encode(self, transcript) -> list:
        return [self.id_of(w) for w in transcript]

    def decode(self, labels) -> list:
        return [self.word_of(int(l)) for l in labels]


# ---------------------------------------------------------------------------
# generation


def _word_phones(word: str, phone_count: int) -> list:
    if word.startswith("w"):
        p, q = word[1:].split("_")
        return [int(p), int(q)]
    if word.startswith("a"):
        return [phone_count, phone_count]
    return [phone_count + 1, phone_count + 1]


def _phone_centroids(cfg: GeneratorConfig) -> np.ndarray:
    rng = derive_rng(cfg.seed, "phones")
    return rng.normal(0.0, 1.0, size=(cfg.phone_count + 2, cfg.feature_dim))


def generate(cfg: GeneratorConfig) -> list:
    """Deterministic synthetic sessions; bit-identical for equal configs."""
    cfg.validate()
    centroids = _phone_centroids(cfg)
    sessions = []
    for s in range(cfg.num_sessions):
        session_id = f"s{s:04d}"
        rng = derive_rng(cfg.seed, "session", s)
        n = cfg.utterances_per_session

        middles = [
            [
                regular_word(int(rng.integers(cfg.phone_count)), int(rng.integers(cfg.phone_count)))
                for _ in range(cfg.middle_words)
            ]
            for _ in range(n)
        ]
        head_phone = [_word_phones(m[0], cfg.phone_count)[0] for m in middles]
        tail_phone = [_word_phones(m[-1], cfg.phone_count)[-1] for m in middles]

        transcripts = []
        flags = []
        for i in range(n):
            first_coupled = i > 0 and rng.random() < cfg.context_strength
            first = alpha_word(tail_phone[i - 1] if first_coupled else int(rng.integers(cfg.phone_count)))
            last_coupled = i < n - 1 and rng.random() < cfg.context_strength
            last = beta_word(head_phone[i + 1] if last_coupled else int(rng.integers(cfg.phone_count)))
            transcripts.append([first] + middles[i] + [last])
            flags.append((first_coupled, last_coupled))

        utterances = []
        start_ms = int(rng.integers(0, 1000))
        for i in range(n):
            phones = []
            for w in transcripts[i]:
                for p in _word_phones(w, cfg.phone_count):
                    dur = cfg.mean_phone_duration + int(rng.integers(0, 2))
                    phones.extend([p] * dur)
            if len(phones) % 2 == 1:
                phones.append(phones[-1])  # keep T even for the stride-2 subsampler
            labels = np.asarray(phones, dtype=np.int64)
            noise = rng.normal(0.0, 1.0, size=(labels.size, cfg.feature_dim))
            feats = centroids[labels] + cfg.emission_noise * noise
            # round-trip through float32 so feature files are lossless
            feats = feats.astype(np.float32).astype(np.float64)
            utterances.append(
                Utterance(
                    session_id=session_id,
                    utterance_id=f"{session_id}-u{i + 1:03d}",
                    index=i + 1,
                    start_ms=start_ms,
                    transcript=tuple(transcripts[i]),
                    features=feats,
                    phone_labels=labels,
                    context_flags=flags[i],
                )
            )
            start_ms += 1000 + int(rng.integers(0, 1000))
        sessions.append(Session(session_id=session_id, utterances=utterances))
    return sessions


def coupled_word_oracle(session: Session, i: int, phone_count: int) -> tuple:
    """Ground-truth edge words implied by neighbour phone labels.

    Returns (first_word, last_word); an entry is None at a session boundary.
    Uses only stored phone labels, scanning past the reserved edge phones.
    """

    def head(labels):
        regular = labels[labels < phone_count]
        return int(regular[0]) if regular.size else None

    def tail(labels):
        regular = labels[labels < phone_count]
        return int(regular[-1]) if regular.size else None

    first = last = None
    if i > 0:
        p = tail(session.utterances[i - 1].phone_labels)
        first = alpha_word(p) if p is not None else None
    if i < len(session.utterances) - 1:
        p = head(session.utterances[i + 1].phone_labels)
        last = beta_word(p) if p is not None else None
    return first, last


# ---------------------------------------------------------------------------
# file formats


def write_features(features: np.ndarray, path) -> None:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("features must be 2-D (frames x dim)")
    with open(path, "wb") as f:
        f.write(_FEATURE_MAGIC)
        f.write(struct.pack("<III", _FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:4] != _FEATURE_MAGIC:
        raise FormatError(f"{path}: bad feature magic")
    version, t, d = struct.unpack("<III", data[4:16])
    if version != _FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    expected = 16 + t * d * 4
    if len(data) != expected:
        raise FormatError(f"{path}: truncated feature file ({len(data)} != {expected} bytes)")
    return np.frombuffer(data[16:], dtype="<f4").astype(np.float64).reshape(t, d)


def _utterance_row(u: Utterance) -> dict:
    row = {
        "session_id": u.session_id,
        "utterance_id": u.utterance_id,
        "index": u.index,
        "start_ms": u.start_ms,
        "transcript": " ".join(u.transcript),
        "feature_file": u.feature_file,
    }
    if u.tokens is not None:
        row["tokens"] = [int(t) for t in u.tokens]
    if u.phone_labels is not None:
        row["phone_labels"] = [int(p) for p in u.phone_labels]
    return row


def write_manifest(sessions, path) -> None:
    """JSON-lines manifest; one row per utterance, sessions in given order."""
    with open(path, "w", encoding="utf-8") as f:
        for s in sessions:
            for u in s.utterances:
                f.write(json.dumps(_utterance_row(u), sort_keys=True) + "\n")


def read_manifest(path, load_features: bool = True) -> list:
    """Parse a manifest back into sessions, enforcing ordering invariants."""
    path = Path(path)
    by_session: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{line_no}: bad JSON ({e})") from e
            u = Utterance(
                session_id=row["session_id"],
                utterance_id=row["utterance_id"],
                index=int(row["index"]),
                start_ms=int(row["start_ms"]),
                transcript=tuple(row["transcript"].split()) if row["transcript"] else (),
                feature_file=row.get("feature_file"),
                tokens=np.asarray(row["tokens"], dtype=np.int64) if "tokens" in row else None,
                phone_labels=(
                    np.asarray(row["phone_labels"], dtype=np.int64) if "phone_labels" in row else None
                ),
            )
            if load_features and u.feature_file:
                u.features = read_features(path.parent / u.feature_file)
            by_session.setdefault(u.session_id, []).append(u)

    sessions = []
    for sid, utts in by_session.items():
        starts = [u.start_ms for u in utts]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise FormatError(f"{path}: session {sid} start_ms not strictly increasing")
        sessions.append(Session(session_id=sid, utterances=utts))
    return sessions


def save_corpus(sessions, out_dir) -> Path:
    """Write feature files plus a manifest.jsonl under ``out_dir``."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for s in sessions:
        for u in s.utterances:
            if u.features is not None:
                rel = f"features/{u.utterance_id}.ctxf"
                write_features(u.features, out_dir / rel)
                u.feature_file = rel
    manifest = out_dir / "manifest.jsonl"
    write_manifest(sessions, manifest)
    return manifest


def attach_tokens(session: Session, codebook: Codebook) -> None:
    """Quantize every utterance's features into token indices, in place."""
    for u in session.utterances:
        if u.features is None:
            raise ShapeError(f"{u.utterance_id}: no features to tokenize")
        u.tokens = quantize(u.features, codebook)


def subset_sessions(sessions, count: int) -> list:
    return sessions[:count]


def clone_without_tokens(sessions) -> list:
    out = []
    for s in sessions:
        out.append(
            Session(
                session_id=s.session_id,
                utterances=[replace(u, tokens=None) for u in s.utterances],
            )
        )
    return out
