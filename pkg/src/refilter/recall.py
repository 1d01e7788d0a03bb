"""Candidate recall: a multi-label classifier over the full type set, plus a
BM25 lexical baseline.

The classifier scores all N types in one encoder pass from the first
([CLS]) hidden state and is trained with positive-weighted binary
cross-entropy; model selection maximizes dev recall at the configured
candidate count, not F1.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .assembly import sentence_token_ids
from .data import CandidateEntry, CandidateSet, DatasetSplit, MentionRecord, TypeVocabulary
from .encoder import (
    EncoderConfig,
    InputLayout,
    ParameterSet,
    PassCounter,
    QuadrantFlags,
    encode_backward,
    forward_full,
    init_encoder_params,
)
from .encoder.model import activation_backward, activation_forward
from .errors import ConfigError, NumericalError
from .losses import bce_with_logits
from .optim import Adam
from .tokenizer import SubwordVocabulary


@dataclass
class RecallConfig:
    top_k: int = 32
    pos_weight: float = 4.0
    threshold: float = 0.5
    head_hidden: int = 128
    lr: float = 3e-3
    epochs: int = 8
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.pos_weight <= 0:
            raise ConfigError("pos_weight must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must be in (0, 1)")
        if self.head_hidden < 1:
            raise ConfigError("head_hidden must be >= 1")


def mlc_loss(scores: np.ndarray, gold_ids, pos_weight: float) -> float:
    """Positive-weighted BCE over all type scores; log(2) at zero scores."""
    loss, _ = _mlc_loss_grad(scores, gold_ids, pos_weight)
    return loss


def _mlc_loss_grad(scores, gold_ids, pos_weight):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.zeros(scores.size)
    for g in gold_ids:
        if not 0 <= g < scores.size:
            raise IndexError(f"gold type id {g} outside score vector of size {scores.size}")
        labels[g] = 1.0
    return bce_with_logits(scores, labels, pos_weight)


def topk_ids(scores: np.ndarray, k: int) -> list[int]:
    """Top-k type ids by score, descending; ties broken by ascending id."""
    n = scores.size
    if k > n:
        raise ConfigError(f"top_k={k} exceeds vocabulary size {n}")
    order = np.lexsort((np.arange(n), -scores))
    return [int(i) for i in order[:k]]


class MlcModel:
    """Encoder + N-way scoring head over the sentence region."""

    def __init__(
        self,
        params: ParameterSet,
        enc_config: EncoderConfig,
        subwords: SubwordVocabulary,
        n_types: int,
        counter: PassCounter | None = None,
    ):
        self.params = params
        self.enc_config = enc_config
        self.subwords = subwords
        self.n_types = n_types
        self.counter = counter if counter is not None else PassCounter()

    @classmethod
    def create(
        cls,
        enc_config: EncoderConfig,
        subwords: SubwordVocabulary,
        n_types: int,
        seed: int,
        head_hidden: int = 128,
    ) -> "MlcModel":
        rng = np.random.default_rng([seed, 0x11])
        params = init_encoder_params(enc_config, subwords.size, rng)
        # Two-layer scoring head; zero-init output so initial scores are 0.
        d = enc_config.d_model
        params["head.mlc.w1"] = rng.normal(0.0, d**-0.5, size=(d, head_hidden))
        params["head.mlc.b1"] = np.zeros(head_hidden)
        params["head.mlc.w2"] = np.zeros((head_hidden, n_types))
        params["head.mlc.b2"] = np.zeros(n_types)
        return cls(params, enc_config, subwords, n_types)

    def assemble(self, record: MentionRecord):
        ids, truncated = sentence_token_ids(
            record, self.subwords, self.enc_config.max_positions
        )
        layout = InputLayout(sentence_len=len(ids), n_candidates=0)
        return np.asarray(ids, dtype=np.int64), layout, truncated

    def _forward_cached(self, record, assembled=None):
        if assembled is None:
            tokens, layout, truncated = self.assemble(record)
        else:
            tokens, layout, truncated = assembled
        hiddens, cache = forward_full(
            tokens, layout, QuadrantFlags.all_on(), self.params, self.enc_config,
            counter=self.counter,
        )
        h_cls = hiddens[-1][0]
        z1 = h_cls @ self.params["head.mlc.w1"] + self.params["head.mlc.b1"]
        a1, act_cache = activation_forward(z1)
        scores = a1 @ self.params["head.mlc.w2"] + self.params["head.mlc.b2"]
        head_cache = (h_cls, z1, act_cache, a1)
        return scores, truncated, hiddens, cache, head_cache

    def forward(self, record: MentionRecord) -> tuple[np.ndarray, bool]:
        """All N type scores from one encoder pass. Returns (scores, truncated)."""
        scores, truncated, _, _, _ = self._forward_cached(record)
        return scores, truncated

    def loss_and_grads(self, record, gold_ids, pos_weight, assembled=None):
        scores, _, hiddens, cache, head_cache = self._forward_cached(record, assembled)
        loss, d_scores = _mlc_loss_grad(scores, gold_ids, pos_weight)
        h_cls, z1, act_cache, a1 = head_cache
        grads = {
            "head.mlc.w2": np.outer(a1, d_scores),
            "head.mlc.b2": d_scores,
        }
        da1 = self.params["head.mlc.w2"] @ d_scores
        dz1 = activation_backward(da1, act_cache)
        grads["head.mlc.w1"] = np.outer(h_cls, dz1)
        grads["head.mlc.b1"] = dz1
        d_hidden = np.zeros_like(hiddens[-1])
        d_hidden[0] = self.params["head.mlc.w1"] @ dz1
        grads.update(encode_backward(d_hidden, cache, self.params, self.enc_config))
        return loss, grads

    def recall_topk(self, record: MentionRecord, k: int) -> CandidateSet:
        scores, _ = self.forward(record)
        ids = topk_ids(scores, k)
        entries = tuple(
            CandidateEntry(i, float(scores[i]), "recall") for i in ids
        )
        return CandidateSet(record_id=record.id, entries=entries)


def train_mlc(
    train_split: DatasetSplit,
    dev_split: DatasetSplit,
    subwords: SubwordVocabulary,
    type_vocab: TypeVocabulary,
    enc_config: EncoderConfig,
    config: RecallConfig,
    log=None,
) -> MlcModel:
    """Adam training of the classifier; keeps the epoch checkpoint with the
    best dev recall@top_k. Deterministic under the config seed."""
    if not len(train_split) or not len(dev_split):
        raise ConfigError("train and dev splits must be non-empty")
    for rec in train_split:
        if not rec.gold_types:
            raise ConfigError(f"training record {rec.id!r} has no gold types")
    if config.top_k > len(type_vocab):
        raise ConfigError("top_k exceeds the type vocabulary size")

    model = MlcModel.create(
        enc_config, subwords, len(type_vocab), config.seed, config.head_hidden
    )
    opt = Adam(model.params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 0x12])
    assembled = [model.assemble(r) for r in train_split.records]
    dev_golds = {r.id: set(r.gold_types) for r in dev_split.records}

    best_params = {k: v.copy() for k, v in model.params.items()}
    best_recall = _dev_recall(model, dev_split, dev_golds, config.top_k)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_split.records))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            acc: dict[str, np.ndarray] = {}
            for idx in batch:
                rec = train_split.records[idx]
                loss, grads = model.loss_and_grads(
                    rec, rec.gold_types, config.pos_weight, assembled[idx]
                )
                if not np.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, record {rec.id!r}"
                    )
                total += loss
                for name in sorted(grads):
                    if name in acc:
                        acc[name] += grads[name]
                    else:
                        acc[name] = grads[name]
            scale = 1.0 / len(batch)
            opt.step({k: v * scale for k, v in acc.items()})
        dev_recall = _dev_recall(model, dev_split, dev_golds, config.top_k)
        if log:
            log(
                f"epoch {epoch}: train loss {total / len(order):.4f} "
                f"dev recall@{config.top_k} {dev_recall:.4f}"
            )
        if dev_recall > best_recall:
            best_recall = dev_recall
            best_params = {k: v.copy() for k, v in model.params.items()}
    model.params = best_params
    opt.params = best_params
    return model


def _dev_recall(model, dev_split, dev_golds, k):
    total = 0.0
    for rec in dev_split.records:
        cs = model.recall_topk(rec, k)
        gold = dev_golds[rec.id]
        total += len(gold & set(cs.type_ids())) / len(gold)
    return total / len(dev_split.records)


def mean_epoch_loss(model: MlcModel, split: DatasetSplit, pos_weight: float) -> float:
    losses = [
        mlc_loss(model.forward(rec)[0], rec.gold_types, pos_weight)
        for rec in split.records
    ]
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# BM25 baseline
# ---------------------------------------------------------------------------


class Bm25Index:
    """Okapi BM25 over type surfaces, each surface one document of sub-word
    pieces. idf = ln(1 + (N - df + 0.5) / (df + 0.5)), which never goes
    negative."""

    def __init__(
        self,
        type_vocab: TypeVocabulary,
        subwords: SubwordVocabulary,
        k1: float = 1.2,
        b: float = 0.75,
    ):
        self.k1 = k1
        self.b = b
        self.n_docs = len(type_vocab)
        self._tf = []
        self._doc_len = []
        df: Counter[int] = Counter()
        for tid in range(self.n_docs):
            pieces = subwords.tokenize(type_vocab.surface_of(tid))
            tf = Counter(pieces)
            self._tf.append(tf)
            self._doc_len.append(len(pieces))
            for term in tf:
                df[term] += 1
        self.avg_len = float(np.mean(self._doc_len))
        self._idf = {
            t: float(np.log(1.0 + (self.n_docs - n + 0.5) / (n + 0.5)))
            for t, n in df.items()
        }

    def scores(self, query_ids) -> np.ndarray:
        out = np.zeros(self.n_docs)
        for i, tf in enumerate(self._tf):
            norm = self.k1 * (1.0 - self.b + self.b * self._doc_len[i] / self.avg_len)
            s = 0.0
            for term in query_ids:
                f = tf.get(term)
                if f:
                    s += self._idf[term] * f * (self.k1 + 1.0) / (f + norm)
            out[i] = s
        return out


def bm25_topk(
    record: MentionRecord,
    index: Bm25Index,
    subwords: SubwordVocabulary,
    k: int,
) -> CandidateSet:
    query = subwords.tokenize(record.sentence())
    scores = index.scores(query)
    ids = topk_ids(scores, k)
    entries = tuple(CandidateEntry(i, float(scores[i]), "recall") for i in ids)
    return CandidateSet(record_id=record.id, entries=entries)
