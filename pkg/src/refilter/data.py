"""Data model for entity-typing runs: mention records, type vocabularies,
candidate sets and dataset splits, plus file I/O and a seeded synthetic
corpus generator.

File formats
------------
dataset     JSON object per line with fields ``id``, ``left``, ``mention``,
            ``right``, ``types`` (list of type surfaces).
vocabulary  one type surface per line; ids are assigned by line order.
candidates  header line ``K=<n>``, then one line per record:
            ``record_id<TAB>surface:score:source,...``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, VocabularyError

CANDIDATE_SOURCES = ("recall", "match", "mlm")


@dataclass(frozen=True)
class MentionRecord:
    """One typing instance: a mention span inside its context sentence."""

    id: str
    left_context: str
    mention: str
    right_context: str
    gold_types: frozenset[int]

    def __post_init__(self):
        if not self.mention:
            raise ValueError(f"record {self.id!r}: mention must be non-empty")

    def sentence(self) -> str:
        """Full context sentence with the mention in place."""
        parts = [p for p in (self.left_context, self.mention, self.right_context) if p]
        return " ".join(parts)


class TypeVocabulary:
    """The full type set: dense ids 0..N-1 mapped to unique surfaces."""

    def __init__(self, surfaces: Sequence[str]):
        if not surfaces:
            raise VocabularyError("type vocabulary must not be empty")
        self._surfaces = list(surfaces)
        self._ids: dict[str, int] = {}
        for i, s in enumerate(self._surfaces):
            if not s:
                raise VocabularyError(f"type id {i}: empty surface")
            if s in self._ids:
                raise VocabularyError(f"duplicate type surface {s!r}")
            self._ids[s] = i

    def __len__(self) -> int:
        return len(self._surfaces)

    @property
    def size(self) -> int:
        return len(self._surfaces)

    def surface_of(self, type_id: int) -> str:
        return self._surfaces[type_id]

    def id_of(self, surface: str) -> int:
        try:
            return self._ids[surface]
        except KeyError:
            raise VocabularyError(f"unknown type surface {surface!r}") from None

    def __contains__(self, surface: str) -> bool:
        return surface in self._ids

    def surfaces(self) -> list[str]:
        return list(self._surfaces)

    def __eq__(self, other) -> bool:
        return isinstance(other, TypeVocabulary) and other._surfaces == self._surfaces


@dataclass(frozen=True)
class CandidateEntry:
    type_id: int
    score: float
    source: str

    def __post_init__(self):
        if self.source not in CANDIDATE_SOURCES:
            raise ValueError(f"unknown candidate source {self.source!r}")


@dataclass(frozen=True)
class CandidateSet:
    """Ranked candidate types for one record, with stage provenance."""

    record_id: str
    entries: tuple[CandidateEntry, ...]

    def __post_init__(self):
        seen: set[int] = set()
        prev_recall_score: float | None = None
        for e in self.entries:
            if e.type_id in seen:
                raise ValueError(
                    f"candidate set {self.record_id!r}: duplicate type id {e.type_id}"
                )
            seen.add(e.type_id)
            if e.source == "recall":
                if prev_recall_score is not None and e.score > prev_recall_score:
                    raise ValueError(
                        f"candidate set {self.record_id!r}: recall entries not in "
                        "descending score order"
                    )
                prev_recall_score = e.score

    @property
    def k(self) -> int:
        return len(self.entries)

    def type_ids(self) -> list[int]:
        return [e.type_id for e in self.entries]

    def top(self, k: int) -> list[int]:
        if k > len(self.entries):
            raise ValueError(f"k={k} exceeds candidate set size {len(self.entries)}")
        return [e.type_id for e in self.entries[:k]]


@dataclass
class DatasetSplit:
    name: str
    records: list[MentionRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.name not in ("train", "dev", "test"):
            raise ValueError(f"split name must be train/dev/test, got {self.name!r}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def load_type_vocabulary(path: str | Path) -> TypeVocabulary:
    """Read a surface-per-line vocabulary file, ids assigned by line order."""
    surfaces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            surface = line.rstrip("\n")
            if not surface:
                raise ParseError(f"{path}: line {lineno}: empty type surface")
            surfaces.append(surface)
    if not surfaces:
        raise VocabularyError(f"{path}: empty type vocabulary")
    return TypeVocabulary(surfaces)


def save_type_vocabulary(path: str | Path, vocab: TypeVocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for surface in vocab.surfaces():
            fh.write(surface + "\n")


def load_dataset(path: str | Path, vocab: TypeVocabulary, name: str) -> DatasetSplit:
    """Load a JSONL dataset split, resolving gold type surfaces to ids.

    Raises ParseError naming the line on malformed input, VocabularyError on
    unresolvable type surfaces.
    """
    records = []
    ids_seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            for key in ("id", "left", "mention", "right", "types"):
                if key not in obj:
                    raise ParseError(f"{path}: line {lineno}: missing field {key!r}")
            if obj["id"] in ids_seen:
                raise ParseError(f"{path}: line {lineno}: duplicate record id {obj['id']!r}")
            ids_seen.add(obj["id"])
            try:
                gold = frozenset(vocab.id_of(s) for s in obj["types"])
            except VocabularyError as exc:
                raise VocabularyError(f"{path}: line {lineno}: {exc}") from None
            try:
                rec = MentionRecord(
                    id=obj["id"],
                    left_context=obj["left"],
                    mention=obj["mention"],
                    right_context=obj["right"],
                    gold_types=gold,
                )
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            records.append(rec)
    return DatasetSplit(name=name, records=records)


def save_dataset(path: str | Path, split: DatasetSplit, vocab: TypeVocabulary) -> None:
    """Write a split as JSONL; gold types stored as surfaces, sorted by id."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in split.records:
            obj = {
                "id": rec.id,
                "left": rec.left_context,
                "mention": rec.mention,
                "right": rec.right_context,
                "types": [vocab.surface_of(t) for t in sorted(rec.gold_types)],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def save_candidates(
    path: str | Path, sets: Sequence[CandidateSet], vocab: TypeVocabulary
) -> None:
    """Write candidate sets; all sets must share one K and have unique ids."""
    k = sets[0].k if sets else 0
    seen_records: set[str] = set()
    lines = [f"K={k}\n"]
    for cs in sets:
        if cs.record_id in seen_records:
            raise ValueError(f"duplicate record id {cs.record_id!r} in candidate sets")
        seen_records.add(cs.record_id)
        if cs.k != k:
            raise ValueError(
                f"candidate set {cs.record_id!r} has K={cs.k}, expected {k}"
            )
        cells = []
        for e in cs.entries:
            surface = vocab.surface_of(e.type_id)
            if any(ch in surface for ch in (",", ":", "\t", "\n")):
                raise ValueError(
                    f"type surface {surface!r} cannot be stored in the candidate format"
                )
            cells.append(f"{surface}:{e.score!r}:{e.source}")
        lines.append(f"{cs.record_id}\t{','.join(cells)}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def load_candidates(path: str | Path, vocab: TypeVocabulary) -> list[CandidateSet]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("K="):
            raise ParseError(f"{path}: line 1: expected 'K=<n>' header, got {header!r}")
        try:
            k = int(header[2:])
        except ValueError:
            raise ParseError(f"{path}: line 1: bad K value {header!r}") from None
        sets = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                record_id, payload = line.split("\t", 1)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: missing TAB separator") from None
            entries = []
            for cell in payload.split(",") if payload else []:
                try:
                    surface, score, source = cell.rsplit(":", 2)
                except ValueError:
                    raise ParseError(
                        f"{path}: line {lineno}: bad candidate cell {cell!r}"
                    ) from None
                entries.append(
                    CandidateEntry(vocab.id_of(surface), float(score), source)
                )
            try:
                cs = CandidateSet(record_id=record_id, entries=tuple(entries))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if cs.k != k:
                raise ParseError(
                    f"{path}: line {lineno}: set has {cs.k} entries, header says {k}"
                )
            sets.append(cs)
    return sets


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_CONSONANTS = "bcdfglmnprstvz"
_VOWELS = "aeiou"

# Function words sprinkled into synthetic contexts so that the noun heuristic
# downstream has something to discard.
_FUNCTION_WORDS = ("the", "of", "and", "a", "to", "in", "on", "with")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic corpus generator.

    Every type owns its surface plus up to two extra cue words; a record's
    context contains the cue words of each gold type with probability
    ``cue_strength`` (all cues of a type are inserted together, so the type
    is recoverable from the context exactly that often).
    """

    n_types: int = 200
    train_records: int = 2000
    dev_records: int = 500
    test_records: int = 500
    context_len_min: int = 6
    context_len_max: int = 12
    cue_strength: float = 0.9
    unseen_type_fraction: float = 0.3
    gold_min: int = 1
    gold_max: int = 4
    # Probability that a dev/test record carries one extra gold type drawn
    # from the types held out of the training gold sets.
    unseen_gold_prob: float = 0.08
    type_frequency_skew: float = 0.5

    def __post_init__(self):
        if self.n_types < 2:
            raise ConfigError(f"n_types must be >= 2, got {self.n_types}")
        for attr in ("train_records", "dev_records", "test_records"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"{attr} must be >= 1")
        if not 0.0 <= self.cue_strength <= 1.0:
            raise ConfigError("cue_strength must be in [0, 1]")
        if not 0.0 <= self.unseen_type_fraction < 1.0:
            raise ConfigError("unseen_type_fraction must be in [0, 1)")
        if not 1 <= self.gold_min <= self.gold_max:
            raise ConfigError("need 1 <= gold_min <= gold_max")
        if self.context_len_min < 1 or self.context_len_max < self.context_len_min:
            raise ConfigError("bad context length range")

    @property
    def n_unseen(self) -> int:
        return int(round(self.n_types * self.unseen_type_fraction))

    @property
    def expected_gold_mean(self) -> float:
        return (self.gold_min + self.gold_max) / 2.0


class _WordFactory:
    """Deterministic pseudo-word source with global uniqueness."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng
        self._used: set[str] = set(_FUNCTION_WORDS)

    def word(self, syllables: int = 3, capitalize: bool = False) -> str:
        while True:
            parts = []
            for _ in range(syllables):
                c = _CONSONANTS[self._rng.integers(len(_CONSONANTS))]
                v = _VOWELS[self._rng.integers(len(_VOWELS))]
                parts.append(c + v)
            w = "".join(parts)
            if w not in self._used:
                self._used.add(w)
                return w.capitalize() if capitalize else w


def generate_synthetic_corpus(
    spec: SyntheticSpec, seed: int
) -> tuple[TypeVocabulary, dict[str, DatasetSplit]]:
    """Build a deterministic corpus where gold types are signalled by cue words.

    Returns the type vocabulary and the three splits keyed by name. A fixed
    fraction of types never occurs in training gold sets, so they can only be
    surfaced downstream by lexical matching or prompt scoring.
    """
    rng = np.random.default_rng([seed, 0xC0])
    words = _WordFactory(rng)

    surfaces = [words.word(3) for _ in range(spec.n_types)]
    vocab = TypeVocabulary(surfaces)
    cues: list[list[str]] = []
    for tid in range(spec.n_types):
        extra = int(rng.integers(0, 3))  # 0..2 extra cues -> 1..3 cues per type
        cues.append([surfaces[tid]] + [words.word(2) for _ in range(extra)])

    unseen = set(
        int(t) for t in rng.choice(spec.n_types, size=spec.n_unseen, replace=False)
    )
    seen = np.array(sorted(set(range(spec.n_types)) - unseen), dtype=np.int64)
    ranks = np.arange(1, len(seen) + 1, dtype=np.float64)
    weights = ranks ** (-spec.type_frequency_skew)
    weights /= weights.sum()

    mention_pool = [words.word(2, capitalize=True) for _ in range(80)]
    filler_pool = [words.word(2) for _ in range(250)]

    def make_record(rec_id: str, allow_unseen: bool) -> MentionRecord:
        g = int(rng.integers(spec.gold_min, spec.gold_max + 1))
        g = min(g, len(seen))
        gold = set(int(t) for t in rng.choice(seen, size=g, replace=False, p=weights))
        if allow_unseen and unseen and rng.random() < spec.unseen_gold_prob:
            gold.add(int(rng.choice(sorted(unseen))))

        n_fill = int(rng.integers(spec.context_len_min, spec.context_len_max + 1))
        tokens: list[str] = []
        for _ in range(n_fill):
            if rng.random() < 0.25:
                tokens.append(_FUNCTION_WORDS[rng.integers(len(_FUNCTION_WORDS))])
            else:
                tokens.append(filler_pool[rng.integers(len(filler_pool))])
        for tid in sorted(gold):
            if rng.random() < spec.cue_strength:
                for cue in cues[tid]:
                    pos = int(rng.integers(0, len(tokens) + 1))
                    tokens.insert(pos, cue)

        n_mention = 1 + int(rng.random() < 0.3)
        mention = " ".join(
            mention_pool[rng.integers(len(mention_pool))] for _ in range(n_mention)
        )
        split_at = int(rng.integers(0, len(tokens) + 1))
        return MentionRecord(
            id=rec_id,
            left_context=" ".join(tokens[:split_at]),
            mention=mention,
            right_context=" ".join(tokens[split_at:]),
            gold_types=frozenset(gold),
        )

    splits: dict[str, DatasetSplit] = {}
    for name, count in (
        ("train", spec.train_records),
        ("dev", spec.dev_records),
        ("test", spec.test_records),
    ):
        records = [
            make_record(f"{name}-{i:05d}", allow_unseen=(name != "train"))
            for i in range(count)
        ]
        splits[name] = DatasetSplit(name=name, records=records)
    return vocab, splits


def corpus_texts(splits: Iterable[DatasetSplit]) -> list[str]:
    """All sentence texts of the given splits, in split/record order."""
    out = []
    for split in splits:
        for rec in split.records:
            out.append(rec.sentence())
    return out
