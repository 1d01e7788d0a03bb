"""Deterministic sub-word tokenizer and embedding tables.

The tokenizer is trained by greedy frequency merges over a closed corpus:
start from single characters, repeatedly merge the most frequent adjacent
pair. Inference segments text longest-match-first, with the single-character
alphabet as fallback, so any string over the training alphabet tokenizes.

Whole-type tokens can be registered on top of the base vocabulary; each new
token id is appended after the base pieces and its static embedding row is
initialized to the mean of the type surface's sub-token rows.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import TypeVocabulary
from .errors import ConfigError, ParseError

SPECIAL_PIECES = ("[CLS]", "[SEP]", "[MASK]", "[PAD]")
CLS, SEP, MASK, PAD = 0, 1, 2, 3


@dataclass
class SubwordVocabulary:
    """Ordered piece list; ids 0..3 are the specials, then the alphabet,
    then merged pieces in merge order."""

    pieces: list[str]
    _piece_ids: dict[str, int] = field(init=False, repr=False)
    _max_piece_len: int = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.pieces[:4]) != SPECIAL_PIECES:
            raise ValueError("first four pieces must be the special tokens")
        self._piece_ids = {}
        for i, p in enumerate(self.pieces):
            if p in self._piece_ids:
                raise ValueError(f"duplicate piece {p!r}")
            self._piece_ids[p] = i
        self._max_piece_len = max(
            (len(p) for p in self.pieces[4:]), default=1
        )

    @property
    def size(self) -> int:
        return len(self.pieces)

    @property
    def cls_id(self) -> int:
        return CLS

    @property
    def sep_id(self) -> int:
        return SEP

    @property
    def mask_id(self) -> int:
        return MASK

    @property
    def pad_id(self) -> int:
        return PAD

    def id_of(self, piece: str) -> int:
        return self._piece_ids[piece]

    def piece_of(self, piece_id: int) -> str:
        return self.pieces[piece_id]

    def __contains__(self, piece: str) -> bool:
        return piece in self._piece_ids

    def tokenize(self, text: str) -> list[int]:
        """Longest-match-first segmentation. Deterministic; raises on
        characters outside the trained alphabet."""
        ids: list[int] = []
        i = 0
        n = len(text)
        while i < n:
            end = min(n, i + self._max_piece_len)
            piece_id = -1
            for j in range(end, i, -1):
                cand = self._piece_ids.get(text[i:j])
                if cand is not None and cand >= 4:
                    piece_id = cand
                    i = j
                    break
            if piece_id < 0:
                raise ValueError(
                    f"character {text[i]!r} is outside the tokenizer alphabet"
                )
            ids.append(piece_id)
        return ids

    def detokenize(self, ids: list[int]) -> str:
        out = []
        for i in ids:
            if i < 4:
                raise ValueError(f"cannot detokenize special token id {i}")
            out.append(self.pieces[i])
        return "".join(out)


def train_tokenizer(
    corpus: list[str], target_size: int, extra_alphabet: str = ""
) -> SubwordVocabulary:
    """Learn a merge vocabulary of at most ``target_size`` pieces.

    ``corpus`` is a list of texts; merges are learned within whitespace
    words. The space character is always part of the alphabet so full
    sentences round-trip. Ties between equally frequent pairs break
    lexicographically, making training deterministic given corpus order.
    """
    if not corpus:
        raise ValueError("tokenizer corpus must not be empty")
    word_freq: Counter[str] = Counter()
    for text in corpus:
        for word in text.split(" "):
            if word:
                word_freq[word] += 1

    alphabet = sorted(set("".join(word_freq)) | set(extra_alphabet) | {" "})
    min_size = len(SPECIAL_PIECES) + len(alphabet)
    if target_size < min_size:
        raise ConfigError(
            f"target size {target_size} is below alphabet+specials size {min_size}"
        )

    pieces = list(SPECIAL_PIECES) + alphabet
    # Word -> current segmentation; preserve first-seen order for determinism.
    segmentations: dict[str, list[str]] = {w: list(w) for w in word_freq}

    while len(pieces) < target_size:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for word, seg in segmentations.items():
            f = word_freq[word]
            for a, b in zip(seg, seg[1:]):
                pair_freq[(a, b)] += f
        if not pair_freq:
            break
        best_pair, best_count = min(
            pair_freq.items(), key=lambda kv: (-kv[1], kv[0])
        )
        if best_count < 2:
            break
        merged = best_pair[0] + best_pair[1]
        pieces.append(merged)
        for word, seg in segmentations.items():
            j = 0
            out = []
            while j < len(seg):
                if (
                    j + 1 < len(seg)
                    and seg[j] == best_pair[0]
                    and seg[j + 1] == best_pair[1]
                ):
                    out.append(merged)
                    j += 2
                else:
                    out.append(seg[j])
                    j += 1
            segmentations[word] = out
    return SubwordVocabulary(pieces)


def save_tokenizer(path, vocab: SubwordVocabulary) -> None:
    """Piece-per-line file; pieces are JSON-escaped so whitespace survives."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"refilter-tokenizer v1 specials={len(SPECIAL_PIECES)}\n")
        for piece in vocab.pieces:
            fh.write(json.dumps(piece, ensure_ascii=False) + "\n")


def load_tokenizer(path) -> SubwordVocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("refilter-tokenizer v1"):
            raise ParseError(f"{path}: not a tokenizer file (header {header!r})")
        pieces = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                pieces.append(json.loads(line))
            except json.JSONDecodeError:
                raise ParseError(f"{path}: line {lineno}: bad piece encoding") from None
    return SubwordVocabulary(pieces)


# ---------------------------------------------------------------------------
# Embeddings and type-token registration
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    """Static token embeddings plus learned absolute position embeddings."""

    token: np.ndarray  # (V, D) float64
    position: np.ndarray  # (P_max, D) float64
    base_size: int
    registered: bool = False

    @property
    def width(self) -> int:
        return self.token.shape[1]


def create_embedding_table(
    vocab_size: int, max_positions: int, width: int, rng: np.random.Generator
) -> EmbeddingTable:
    token = rng.normal(0.0, 0.02, size=(vocab_size, width))
    position = rng.normal(0.0, 0.02, size=(max_positions, width))
    return EmbeddingTable(token=token, position=position, base_size=vocab_size)


@dataclass(frozen=True)
class TypeTokenRegistry:
    """Bijective map from type id to its registered whole-type token id."""

    base_size: int
    n_types: int

    def token_of(self, type_id: int) -> int:
        if not 0 <= type_id < self.n_types:
            raise ValueError(f"type id {type_id} out of range")
        return self.base_size + type_id

    def type_of(self, token_id: int) -> int:
        tid = token_id - self.base_size
        if not 0 <= tid < self.n_types:
            raise ValueError(f"token id {token_id} is not a registered type token")
        return tid


def register_type_tokens(
    type_vocab: TypeVocabulary,
    table: EmbeddingTable,
    subwords: SubwordVocabulary,
) -> TypeTokenRegistry:
    """Append one token per type; each new row is the arithmetic mean of the
    type surface's sub-token rows at call time. Calling twice is an error."""
    if table.registered:
        raise ValueError("type tokens already registered on this table")
    rows = []
    for tid in range(len(type_vocab)):
        piece_ids = subwords.tokenize(type_vocab.surface_of(tid))
        rows.append(table.token[piece_ids].mean(axis=0))
    table.token = np.vstack([table.token] + [r[None, :] for r in rows])
    table.registered = True
    return TypeTokenRegistry(base_size=table.base_size, n_types=len(type_vocab))
