"""Candidate expansion: lexical exact match plus prompt-based scoring with a
masked-token scorer.

The tail of a recalled candidate list is replaced by (1) types whose
normalized surface occurs in the context or mention, then (2) types ranked
by the average log-probability their sub-tokens receive at mask positions in
a cloze prompt (``<sentence> [SEP] <mention> such as [MASK]*l [SEP]``). Both
routes work for types never seen in training.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .assembly import sentence_token_ids
from .data import CandidateEntry, CandidateSet, MentionRecord, TypeVocabulary
from .encoder import (
    EncoderConfig,
    InputLayout,
    ParameterSet,
    PassCounter,
    QuadrantFlags,
    add_linear_head,
    encode_backward,
    forward_full,
    init_encoder_params,
)
from .errors import ConfigError, NumericalError
from .losses import log_softmax
from .optim import Adam
from .tokenizer import SubwordVocabulary

STOPWORDS = frozenset(
    """a an and are as at be been but by for from had has have he her his i in
    is it its my of on or our she that the their they this to was we were
    which who will with you your""".split()
)

_STRIP_CHARS = "\"'.,;:!?()[]"


def normalize_token(token: str) -> str:
    """Lowercase, strip edge punctuation, undo common plural suffixes.
    Returns '' for non-alphabetic tokens."""
    t = token.lower().strip(_STRIP_CHARS)
    if not t.isalpha():
        return ""
    if t.endswith("ies") and len(t) > 4:
        return t[:-3] + "y"
    for suffix in ("ches", "shes", "sses", "xes", "zes"):
        if t.endswith(suffix):
            return t[:-2]
    if t.endswith("s") and not t.endswith("ss") and len(t) > 3:
        return t[:-1]
    return t


def _looks_verbal(t: str) -> bool:
    return len(t) > 4 and (t.endswith("ing") or t.endswith("ed"))


def record_tokens(record: MentionRecord) -> list[str]:
    return record.sentence().split()


def extract_noun_candidates(record: MentionRecord) -> set[str]:
    """Rule-based noun set over context and mention: normalized tokens minus
    stopwords and verb-shaped tokens."""
    out = set()
    for token in record_tokens(record):
        t = normalize_token(token)
        if not t or t in STOPWORDS or _looks_verbal(t):
            continue
        out.add(t)
    return out


def normalize_surface(surface: str) -> list[str]:
    words = []
    for w in surface.split():
        t = normalize_token(w)
        words.append(t if t else w.lower())
    return words


def exact_match_candidates(
    record: MentionRecord, type_vocab: TypeVocabulary
) -> list[int]:
    """Type ids whose normalized surface occurs in the record, ordered by
    first occurrence position, then type id. Multi-word surfaces must occur
    contiguously."""
    stream = [normalize_token(t) or t.lower() for t in record_tokens(record)]
    nouns = extract_noun_candidates(record)
    hits: list[tuple[int, int]] = []
    for tid in range(len(type_vocab)):
        words = normalize_surface(type_vocab.surface_of(tid))
        if len(words) == 1:
            if words[0] in nouns:
                hits.append((stream.index(words[0]), tid))
        else:
            for start in range(len(stream) - len(words) + 1):
                if stream[start : start + len(words)] == words:
                    hits.append((start, tid))
                    break
    hits.sort()
    return [tid for _, tid in hits]


# ---------------------------------------------------------------------------
# Masked scorers
# ---------------------------------------------------------------------------


class MaskedScorer:
    """Scoring capability over contiguous mask positions.

    ``position_log_probs`` returns one normalized log-probability row per
    mask position over the whole piece vocabulary; ``fill_log_probs`` looks
    up specific fill pieces and is the only entry point remote scorers need
    to implement.
    """

    def position_log_probs(self, token_ids, mask_positions) -> np.ndarray:
        raise NotImplementedError

    def fill_log_probs(self, token_ids, mask_positions, fills: np.ndarray) -> np.ndarray:
        """fills: (n_queries, n_masks) piece ids; returns matching log-probs."""
        dist = self.position_log_probs(token_ids, mask_positions)
        fills = np.asarray(fills, dtype=np.int64)
        cols = np.arange(len(mask_positions))
        return dist[cols[None, :], fills]


class UnigramScorer(MaskedScorer):
    """Position-independent scorer from smoothed corpus piece frequencies."""

    def __init__(self, log_probs: np.ndarray):
        self.log_p = np.asarray(log_probs, dtype=np.float64)

    @classmethod
    def from_corpus(
        cls, texts, subwords: SubwordVocabulary, smoothing: float = 1.0
    ) -> "UnigramScorer":
        counts = np.zeros(subwords.size)
        for text in texts:
            for pid in subwords.tokenize(text):
                counts[pid] += 1
        probs = (counts + smoothing) / (counts.sum() + smoothing * subwords.size)
        return cls(np.log(probs))

    @classmethod
    def uniform(cls, vocab_size: int) -> "UnigramScorer":
        return cls(np.full(vocab_size, -np.log(vocab_size)))

    def position_log_probs(self, token_ids, mask_positions) -> np.ndarray:
        return np.tile(self.log_p, (len(mask_positions), 1))


class EncoderMaskedScorer(MaskedScorer):
    """The project encoder with a masked-token prediction head."""

    def __init__(
        self,
        params: ParameterSet,
        enc_config: EncoderConfig,
        subwords: SubwordVocabulary,
        counter: PassCounter | None = None,
    ):
        self.params = params
        self.enc_config = enc_config
        self.subwords = subwords
        self.counter = counter if counter is not None else PassCounter()

    def position_log_probs(self, token_ids, mask_positions) -> np.ndarray:
        tokens = np.asarray(token_ids, dtype=np.int64)
        layout = InputLayout(sentence_len=len(tokens), n_candidates=0)
        hiddens, _ = forward_full(
            tokens, layout, QuadrantFlags.all_on(), self.params, self.enc_config,
            counter=self.counter,
        )
        h = hiddens[-1][list(mask_positions)]
        logits = h @ self.params["head.mlm.w"] + self.params["head.mlm.b"]
        return log_softmax(logits, axis=-1)


def train_masked_scorer(
    texts: list[str],
    subwords: SubwordVocabulary,
    enc_config: EncoderConfig,
    *,
    epochs: int = 2,
    lr: float = 3e-3,
    batch_size: int = 16,
    mask_rate: float = 0.15,
    seed: int = 0,
) -> EncoderMaskedScorer:
    """Train the encoder on a masked-token objective over the given texts."""
    rng = np.random.default_rng([seed, 0x21])
    params = init_encoder_params(enc_config, subwords.size, rng)
    add_linear_head(params, "mlm", enc_config.d_model, subwords.size, rng)
    opt = Adam(params, lr=lr)
    scorer = EncoderMaskedScorer(params, enc_config, subwords)

    encoded = []
    for text in texts:
        ids = subwords.tokenize(text)[: enc_config.max_positions - 2]
        if ids:
            encoded.append([subwords.cls_id] + ids + [subwords.sep_id])

    for _ in range(epochs):
        order = rng.permutation(len(encoded))
        for start in range(0, len(order), batch_size):
            acc: dict[str, np.ndarray] = {}
            batch = order[start : start + batch_size]
            for idx in batch:
                ids = list(encoded[idx])
                inner = len(ids) - 2
                n_mask = max(1, int(round(mask_rate * inner)))
                positions = 1 + rng.choice(inner, size=n_mask, replace=False)
                positions = np.sort(positions)
                targets = [ids[p] for p in positions]
                masked = list(ids)
                for p in positions:
                    masked[p] = subwords.mask_id
                loss, grads = _mlm_loss_grads(
                    scorer, np.asarray(masked), positions, targets
                )
                if not np.isfinite(loss):
                    raise NumericalError("non-finite masked-token loss")
                for name in sorted(grads):
                    if name in acc:
                        acc[name] += grads[name]
                    else:
                        acc[name] = grads[name]
            opt.step({k: v / len(batch) for k, v in acc.items()})
    return scorer


def _mlm_loss_grads(scorer, tokens, positions, targets):
    layout = InputLayout(sentence_len=len(tokens), n_candidates=0)
    hiddens, cache = forward_full(
        tokens, layout, QuadrantFlags.all_on(), scorer.params, scorer.enc_config
    )
    h = hiddens[-1][positions]
    logits = h @ scorer.params["head.mlm.w"] + scorer.params["head.mlm.b"]
    logp = log_softmax(logits, axis=-1)
    n = len(positions)
    loss = -float(np.mean([logp[i, t] for i, t in enumerate(targets)]))
    d_logits = np.exp(logp)
    for i, t in enumerate(targets):
        d_logits[i, t] -= 1.0
    d_logits /= n
    grads = {
        "head.mlm.w": h.T @ d_logits,
        "head.mlm.b": d_logits.sum(axis=0),
    }
    d_hidden = np.zeros_like(hiddens[-1])
    d_hidden[positions] = d_logits @ scorer.params["head.mlm.w"].T
    grads.update(encode_backward(d_hidden, cache, scorer.params, scorer.enc_config))
    return loss, grads


# ---------------------------------------------------------------------------
# Prompt scoring and expansion
# ---------------------------------------------------------------------------


@dataclass
class ExpandConfig:
    mlm_additions: int = 8
    replace_tail: int = 8
    template: str = "such as"
    max_type_pieces: int = 4
    scorer: str = "unigram"  # unigram | encoder | external
    scorer_address: str = ""
    scorer_epochs: int = 2
    scorer_lr: float = 3e-3

    def __post_init__(self):
        if self.replace_tail < 0:
            raise ConfigError("replace_tail must be >= 0")
        if not 0 <= self.mlm_additions <= self.replace_tail:
            raise ConfigError("need 0 <= mlm_additions <= replace_tail")
        if self.max_type_pieces < 1:
            raise ConfigError("max_type_pieces must be >= 1")
        if self.scorer not in ("unigram", "encoder", "external"):
            raise ConfigError(f"unknown scorer kind {self.scorer!r}")


def build_mlm_prompt(
    record: MentionRecord,
    subwords: SubwordVocabulary,
    template: str,
    n_masks: int,
    max_positions: int,
) -> tuple[np.ndarray, list[int]]:
    """Cloze input: sentence region, then mention + template + masks."""
    mention = subwords.tokenize(record.mention)
    template_ids = subwords.tokenize(" " + template + " ")
    suffix_len = len(mention) + len(template_ids) + n_masks + 1
    ids, _ = sentence_token_ids(record, subwords, max_positions - suffix_len)
    ids = ids + mention + template_ids
    mask_start = len(ids)
    ids = ids + [subwords.mask_id] * n_masks + [subwords.sep_id]
    return np.asarray(ids, dtype=np.int64), list(range(mask_start, mask_start + n_masks))


def mlm_score_type(
    record: MentionRecord,
    type_id: int,
    scorer: MaskedScorer,
    subwords: SubwordVocabulary,
    type_vocab: TypeVocabulary,
    template: str = "such as",
    max_type_pieces: int = 4,
    max_positions: int = 256,
) -> float | None:
    """Average log-probability of the type's sub-tokens at the mask
    positions; None when the surface exceeds the piece budget."""
    pieces = subwords.tokenize(type_vocab.surface_of(type_id))
    if len(pieces) > max_type_pieces:
        return None
    tokens, positions = build_mlm_prompt(
        record, subwords, template, len(pieces), max_positions
    )
    fills = np.asarray([pieces], dtype=np.int64)
    logp = scorer.fill_log_probs(tokens, positions, fills)
    return float(logp[0].sum() / len(pieces))


def rank_types_by_mlm(
    record: MentionRecord,
    type_vocab: TypeVocabulary,
    subwords: SubwordVocabulary,
    scorer: MaskedScorer,
    *,
    template: str = "such as",
    max_type_pieces: int = 4,
    max_positions: int = 256,
    exclude: set[int] | None = None,
) -> list[tuple[int, float]]:
    """All scoreable types ranked by prompt score (desc), ties by id.
    Batched by sub-token length: one scorer call per length."""
    exclude = exclude or set()
    by_length: dict[int, list[tuple[int, list[int]]]] = {}
    for tid in range(len(type_vocab)):
        if tid in exclude:
            continue
        pieces = subwords.tokenize(type_vocab.surface_of(tid))
        if 1 <= len(pieces) <= max_type_pieces:
            by_length.setdefault(len(pieces), []).append((tid, pieces))

    scored: list[tuple[int, float]] = []
    for length in sorted(by_length):
        group = by_length[length]
        tokens, positions = build_mlm_prompt(
            record, subwords, template, length, max_positions
        )
        fills = np.asarray([pieces for _, pieces in group], dtype=np.int64)
        logp = scorer.fill_log_probs(tokens, positions, fills)
        means = logp.sum(axis=1) / length
        scored.extend((tid, float(m)) for (tid, _), m in zip(group, means))
    scored.sort(key=lambda ts: (-ts[1], ts[0]))
    return scored


def expand_candidates(
    base: CandidateSet,
    record: MentionRecord,
    type_vocab: TypeVocabulary,
    subwords: SubwordVocabulary,
    scorer: MaskedScorer,
    config: ExpandConfig,
    max_positions: int = 256,
) -> CandidateSet:
    """Replace the recall tail with exact-match types, then prompt-ranked
    types; displaced recall entries fill any remaining room. Output keeps
    exactly K unique entries and preserves the kept head in order."""
    k = base.k
    if config.replace_tail > k:
        raise ConfigError(f"replace_tail={config.replace_tail} exceeds K={k}")
    kept = list(base.entries[: k - config.replace_tail])
    present = {e.type_id for e in kept}
    tail: list[CandidateEntry] = []

    for tid in exact_match_candidates(record, type_vocab):
        if len(tail) >= config.replace_tail:
            break
        if tid not in present:
            tail.append(CandidateEntry(tid, 0.0, "match"))
            present.add(tid)

    budget = min(config.mlm_additions, config.replace_tail - len(tail))
    if budget > 0:
        ranked = rank_types_by_mlm(
            record, type_vocab, subwords, scorer,
            template=config.template,
            max_type_pieces=config.max_type_pieces,
            max_positions=max_positions,
            exclude=present,
        )
        for tid, score in ranked[:budget]:
            tail.append(CandidateEntry(tid, score, "mlm"))
            present.add(tid)

    for entry in base.entries[k - config.replace_tail :]:
        if len(tail) >= config.replace_tail:
            break
        if entry.type_id not in present:
            tail.append(entry)
            present.add(entry.type_id)

    return CandidateSet(record_id=base.record_id, entries=tuple(kept + tail))
