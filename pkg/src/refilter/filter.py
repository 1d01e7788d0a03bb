"""Final candidate scoring: multi-candidate cross-encoders that score all K
candidates in one forward pass (single-token or fixed-block candidate
encodings, with or without cross-candidate attention) and the one-pass-per-
candidate vanilla cross-encoder baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .assembly import sentence_token_ids
from .data import CandidateSet, DatasetSplit, MentionRecord, TypeVocabulary
from .encoder import (
    EncoderConfig,
    InputLayout,
    ParameterSet,
    PassCounter,
    QuadrantFlags,
    add_linear_head,
    encode_backward,
    forward_full,
    forward_structured,
    init_encoder_params,
)
from .errors import CapacityError, ConfigError, NumericalError
from .losses import bce_with_logits, margin_ranking_loss, sigmoid
from .optim import Adam
from .tokenizer import SubwordVocabulary, TypeTokenRegistry
from .evalbench import macro_prf, tune_threshold

VARIANTS = ("mcce_s", "mcce_b", "vanilla_ce")


@dataclass
class FilterConfig:
    variant: str = "mcce_s"
    structured: bool = True  # use the reduced no-cross-candidate computation
    quadrants: QuadrantFlags | None = None  # ablation flags for the full path
    block_size: int = 1
    n_candidates: int = 32
    threshold: float = 0.5
    margin: float = 0.1
    force_top1: bool = True
    pos_weight: float = 1.0
    full_vocab: bool = False
    lr: float = 2e-3
    epochs: int = 6
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown filter variant {self.variant!r}")
        if self.variant == "mcce_s" and self.block_size != 1:
            raise ConfigError("single-token candidates require block_size=1")
        if self.block_size < 1 or self.n_candidates < 1:
            raise ConfigError("bad block_size / n_candidates")
        if self.structured and self.quadrants is not None:
            if self.quadrants != QuadrantFlags.no_c2c():
                raise ConfigError(
                    "the structured path realizes exactly the no-C2C pattern; "
                    "set structured=False for other quadrant ablations"
                )
        if not 0.0 <= self.threshold < 1.0:
            raise ConfigError("threshold must be in [0, 1)")

    def effective_flags(self) -> QuadrantFlags:
        if self.quadrants is not None:
            return self.quadrants
        return QuadrantFlags.no_c2c() if self.structured else QuadrantFlags.all_on()


@dataclass
class AssembledInput:
    token_ids: np.ndarray
    layout: InputLayout
    candidate_ids: tuple[int, ...]
    truncated: bool
    truncated_blocks: int = 0

    @property
    def representative_indices(self) -> tuple[int, ...]:
        return self.layout.representative_indices


def assemble_mcce_input(
    record: MentionRecord,
    candidate_ids,
    subwords: SubwordVocabulary,
    type_vocab: TypeVocabulary,
    enc_config: EncoderConfig,
    block_size: int,
    registry: TypeTokenRegistry | None = None,
) -> AssembledInput:
    """Sentence region followed by one slot (block_size=1, registered type
    tokens) or one fixed block of sub-tokens per candidate. Blocks are PAD
    padded and truncated to the block size; the representative position of a
    candidate is the first index of its slot/block."""
    candidate_ids = tuple(int(t) for t in candidate_ids)
    k = len(candidate_ids)
    cand_len = k * block_size
    budget = enc_config.max_positions - cand_len
    min_sentence = 3 + 2 * len(subwords.tokenize(record.mention))
    if budget < min_sentence:
        raise CapacityError(
            f"{k} candidates x block {block_size} leave {budget} positions, "
            f"need at least {min_sentence} for the sentence"
        )
    sentence, truncated = sentence_token_ids(record, subwords, budget)

    cand_tokens: list[int] = []
    block_lengths: list[int] = []
    truncated_blocks = 0
    if block_size == 1:
        if registry is None:
            raise ConfigError("single-token candidates require a type-token registry")
        for tid in candidate_ids:
            cand_tokens.append(registry.token_of(tid))
            block_lengths.append(1)
    else:
        for tid in candidate_ids:
            pieces = subwords.tokenize(type_vocab.surface_of(tid))
            if len(pieces) > block_size:
                pieces = pieces[:block_size]
                truncated_blocks += 1
            block_lengths.append(len(pieces))
            cand_tokens.extend(pieces + [subwords.pad_id] * (block_size - len(pieces)))

    layout = InputLayout(
        sentence_len=len(sentence),
        n_candidates=k,
        block_size=block_size,
        block_lengths=tuple(block_lengths),
    )
    tokens = np.asarray(sentence + cand_tokens, dtype=np.int64)
    return AssembledInput(tokens, layout, candidate_ids, truncated, truncated_blocks)


class McceModel:
    """Encoder plus a shared linear head over candidate representatives;
    all K candidate scores come from a single forward pass."""

    def __init__(
        self,
        params: ParameterSet,
        enc_config: EncoderConfig,
        config: FilterConfig,
        subwords: SubwordVocabulary,
        type_vocab: TypeVocabulary,
        registry: TypeTokenRegistry | None = None,
        counter: PassCounter | None = None,
    ):
        if config.variant == "mcce_s" and registry is None:
            raise ConfigError("mcce_s needs a type-token registry")
        self.params = params
        self.enc_config = enc_config
        self.config = config
        self.subwords = subwords
        self.type_vocab = type_vocab
        self.registry = registry
        self.counter = counter if counter is not None else PassCounter()

    def assemble(self, record: MentionRecord, candidate_ids) -> AssembledInput:
        return assemble_mcce_input(
            record, candidate_ids, self.subwords, self.type_vocab,
            self.enc_config, self.config.block_size, self.registry,
        )

    def forward(self, assembled: AssembledInput) -> np.ndarray:
        scores, _, _ = self._forward_cached(assembled)
        return scores

    def _forward_cached(self, assembled: AssembledInput):
        if self.config.structured:
            hiddens, cache = forward_structured(
                assembled.token_ids, assembled.layout, self.params,
                self.enc_config, counter=self.counter,
            )
        else:
            hiddens, cache = forward_full(
                assembled.token_ids, assembled.layout, self.config.effective_flags(),
                self.params, self.enc_config, counter=self.counter,
            )
        reps = list(assembled.representative_indices)
        h = hiddens[-1][reps]
        scores = (h @ self.params["head.score.w"] + self.params["head.score.b"]).ravel()
        return scores, h, (hiddens, cache, reps)

    def score_candidates(self, record: MentionRecord, candidate_ids) -> np.ndarray:
        return self.forward(self.assemble(record, candidate_ids))

    def loss_and_grads(self, record, candidate_ids, gold: set[int]):
        assembled = self.assemble(record, candidate_ids)
        scores, h, (hiddens, cache, reps) = self._forward_cached(assembled)
        labels = np.array([1.0 if t in gold else 0.0 for t in candidate_ids])
        loss, d_scores = bce_with_logits(scores, labels, self.config.pos_weight)
        grads = {
            "head.score.w": h.T @ d_scores[:, None],
            "head.score.b": np.array([d_scores.sum()]),
        }
        d_hidden = np.zeros_like(hiddens[-1])
        d_hidden[reps] = d_scores[:, None] * self.params["head.score.w"].T
        grads.update(encode_backward(d_hidden, cache, self.params, self.enc_config))
        return loss, grads

    def predict(self, record: MentionRecord, candidate_ids) -> set[int]:
        scores = self.score_candidates(record, candidate_ids)
        return predict_types(scores, candidate_ids, self.config.threshold,
                             self.config.force_top1)


class CeModel:
    """One forward pass per (record, type): sentence plus the raw type
    surface, scored from the [CLS] hidden state."""

    def __init__(
        self,
        params: ParameterSet,
        enc_config: EncoderConfig,
        config: FilterConfig,
        subwords: SubwordVocabulary,
        type_vocab: TypeVocabulary,
        counter: PassCounter | None = None,
    ):
        self.params = params
        self.enc_config = enc_config
        self.config = config
        self.subwords = subwords
        self.type_vocab = type_vocab
        self.counter = counter if counter is not None else PassCounter()

    def assemble(self, record: MentionRecord, type_id: int):
        pieces = self.subwords.tokenize(self.type_vocab.surface_of(type_id))
        budget = self.enc_config.max_positions - len(pieces)
        sentence, truncated = sentence_token_ids(record, self.subwords, budget)
        tokens = np.asarray(sentence + pieces, dtype=np.int64)
        layout = InputLayout(sentence_len=len(tokens), n_candidates=0)
        return tokens, layout, truncated

    def forward(self, record: MentionRecord, type_id: int) -> float:
        score, _ = self._forward_cached(record, type_id)
        return score

    def _forward_cached(self, record, type_id):
        tokens, layout, _ = self.assemble(record, type_id)
        hiddens, cache = forward_full(
            tokens, layout, QuadrantFlags.all_on(), self.params, self.enc_config,
            counter=self.counter,
        )
        h_cls = hiddens[-1][0]
        score = float(h_cls @ self.params["head.score.w"][:, 0]
                      + self.params["head.score.b"][0])
        return score, (hiddens, cache, h_cls)

    def score_candidates(self, record: MentionRecord, candidate_ids) -> np.ndarray:
        return np.array([self.forward(record, t) for t in candidate_ids])

    def pair_loss_and_grads(self, record, pos_id: int, neg_id: int):
        """Margin ranking loss on one sampled (positive, negative) pair."""
        s_pos, ctx_pos = self._forward_cached(record, pos_id)
        s_neg, ctx_neg = self._forward_cached(record, neg_id)
        loss, d_pos, d_neg = margin_ranking_loss(s_pos, s_neg, self.config.margin)
        grads: dict[str, np.ndarray] = {}
        if loss > 0.0:
            for d_score, (hiddens, cache, h_cls) in ((d_pos, ctx_pos), (d_neg, ctx_neg)):
                g = {
                    "head.score.w": np.outer(h_cls, [d_score]),
                    "head.score.b": np.array([d_score]),
                }
                d_hidden = np.zeros_like(hiddens[-1])
                d_hidden[0] = d_score * self.params["head.score.w"][:, 0]
                g.update(encode_backward(d_hidden, cache, self.params, self.enc_config))
                for name, val in g.items():
                    if name in grads:
                        grads[name] += val
                    else:
                        grads[name] = val
        return loss, grads

    def predict(self, record: MentionRecord, candidate_ids) -> set[int]:
        scores = self.score_candidates(record, candidate_ids)
        return predict_types(scores, candidate_ids, self.config.threshold,
                             self.config.force_top1)


def create_filter_model(
    enc_config: EncoderConfig,
    config: FilterConfig,
    subwords: SubwordVocabulary,
    type_vocab: TypeVocabulary,
    seed: int,
    registry_embeddings=None,
):
    """Fresh model for the configured variant. For single-token candidates
    the embedding table is extended with registered type tokens (mean of the
    surface's sub-token rows)."""
    from .tokenizer import EmbeddingTable, create_embedding_table, register_type_tokens

    rng = np.random.default_rng([seed, 0x31])
    registry = None
    if config.variant == "mcce_s":
        table = create_embedding_table(
            subwords.size, enc_config.max_positions, enc_config.d_model, rng
        )
        registry = register_type_tokens(type_vocab, table, subwords)
        params = init_encoder_params(
            enc_config, table.token.shape[0], rng,
            token_embeddings=table.token, position_embeddings=table.position,
        )
    else:
        params = init_encoder_params(enc_config, subwords.size, rng)
    add_linear_head(params, "score", enc_config.d_model, 1, zero_init=True)

    if config.variant == "vanilla_ce":
        return CeModel(params, enc_config, config, subwords, type_vocab)
    cfg = config
    if config.variant == "mcce_b" and config.block_size == 1:
        cfg = replace(config, block_size=4)
    return McceModel(params, enc_config, cfg, subwords, type_vocab, registry)


def predict_types(
    scores: np.ndarray, candidate_ids, threshold: float, force_top1: bool = True
) -> set[int]:
    """Candidates whose sigmoid probability strictly exceeds the threshold;
    optionally fall back to the single best candidate (ties: lower id)."""
    probs = sigmoid(np.asarray(scores, dtype=np.float64))
    return predict_from_probabilities(
        list(zip(candidate_ids, probs)), threshold, force_top1
    )


def predict_from_probabilities(
    pairs: list[tuple[int, float]], threshold: float, force_top1: bool = True
) -> set[int]:
    chosen = {int(tid) for tid, p in pairs if p > threshold}
    if not chosen and force_top1 and pairs:
        ids = [tid for tid, _ in pairs]
        probs = np.array([p for _, p in pairs])
        order = np.lexsort((ids, -probs))
        chosen = {int(ids[order[0]])}
    return chosen


def full_vocab_candidates(type_vocab: TypeVocabulary) -> list[int]:
    return list(range(len(type_vocab)))


def full_vocab_filter_mode(
    record: MentionRecord, type_vocab: TypeVocabulary, model
) -> set[int]:
    """Prediction over the entire vocabulary in id order, skipping candidate
    generation; capacity errors surface from assembly."""
    return model.predict(record, full_vocab_candidates(type_vocab))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def mcce_train_step(
    model: McceModel,
    items: list[tuple[MentionRecord, CandidateSet]],
    rng: np.random.Generator,
    opt: Adam,
) -> float:
    """One optimizer step: candidate order freshly shuffled per item, BCE
    over the K candidate scores. Gold types outside the candidate set simply
    contribute no positive label."""
    acc: dict[str, np.ndarray] = {}
    total = 0.0
    for record, cands in items:
        perm = rng.permutation(cands.k)
        ids = [cands.type_ids()[i] for i in perm]
        loss, grads = model.loss_and_grads(record, ids, set(record.gold_types))
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite filter loss on record {record.id!r}")
        total += loss
        for name in sorted(grads):
            if name in acc:
                acc[name] += grads[name]
            else:
                acc[name] = grads[name]
    opt.step({k: v / len(items) for k, v in acc.items()})
    return total / len(items)


def ce_train_step(
    model: CeModel,
    items: list[tuple[MentionRecord, CandidateSet]],
    rng: np.random.Generator,
    opt: Adam,
) -> tuple[float, int]:
    """One optimizer step of pairwise ranking: one positive and one negative
    sampled per item from its candidate set. Items lacking either side are
    skipped and counted. Returns (mean loss, n_skipped)."""
    acc: dict[str, np.ndarray] = {}
    losses = []
    skipped = 0
    for record, cands in items:
        pos = [t for t in cands.type_ids() if t in record.gold_types]
        neg = [t for t in cands.type_ids() if t not in record.gold_types]
        if not pos or not neg:
            skipped += 1
            continue
        pos_id = pos[int(rng.integers(len(pos)))]
        neg_id = neg[int(rng.integers(len(neg)))]
        loss, grads = model.pair_loss_and_grads(record, pos_id, neg_id)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite ranking loss on record {record.id!r}")
        losses.append(loss)
        for name in sorted(grads):
            if name in acc:
                acc[name] += grads[name]
            else:
                acc[name] = grads[name]
    if not losses:
        return float("nan"), skipped
    opt.step({k: v / len(losses) for k, v in acc.items()})
    return float(np.mean(losses)), skipped


def candidate_probabilities(model, split: DatasetSplit, cands_by_record) -> dict:
    """Per-record (type id, probability) pairs over each candidate set."""
    out = {}
    for rec in split.records:
        ids = cands_by_record[rec.id].type_ids()
        scores = model.score_candidates(rec, ids)
        out[rec.id] = list(zip(ids, sigmoid(scores)))
    return out


def train_filter(
    train_split: DatasetSplit,
    train_cands: list[CandidateSet],
    dev_split: DatasetSplit,
    dev_cands: list[CandidateSet],
    subwords: SubwordVocabulary,
    type_vocab: TypeVocabulary,
    enc_config: EncoderConfig,
    config: FilterConfig,
    log=None,
):
    """Train the configured filter variant; select the epoch with the best
    dev macro-F1 at a dev-tuned threshold. Returns (model, threshold)."""
    model = create_filter_model(enc_config, config, subwords, type_vocab, config.seed)
    opt = Adam(model.params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 0x32])

    train_by_id = {cs.record_id: cs for cs in train_cands}
    dev_by_id = {cs.record_id: cs for cs in dev_cands}
    items = [(rec, train_by_id[rec.id]) for rec in train_split.records]
    dev_golds = {r.id: set(r.gold_types) for r in dev_split.records}

    best = (-1.0, config.threshold)
    best_params = {k: v.copy() for k, v in model.params.items()}
    for epoch in range(config.epochs):
        order = rng.permutation(len(items))
        epoch_loss = 0.0
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            batch = [items[i] for i in order[start : start + config.batch_size]]
            if isinstance(model, CeModel):
                loss, _ = ce_train_step(model, batch, rng, opt)
            else:
                loss = mcce_train_step(model, batch, rng, opt)
            if np.isfinite(loss):
                epoch_loss += loss
                n_steps += 1
        probs = candidate_probabilities(model, dev_split, dev_by_id)
        tau = tune_threshold(probs, dev_golds)
        preds = {
            rid: predict_from_probabilities(pairs, tau, config.force_top1)
            for rid, pairs in probs.items()
        }
        f1 = macro_prf(preds, dev_golds).f1
        if log:
            log(
                f"epoch {epoch}: loss {epoch_loss / max(n_steps, 1):.4f} "
                f"dev F1 {f1:.4f} (threshold {tau:.4f})"
            )
        if f1 > best[0]:
            best = (f1, tau)
            best_params = {k: v.copy() for k, v in model.params.items()}
    model.params = best_params
    model.config = replace(model.config, threshold=best[1])
    return model, best[1]
