"""Encoder hyperparameters and the sentence/candidate input layout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    ffn_dim: int = 64
    max_positions: int = 256
    dropout: float = 0.0
    block_size: int = 1
    activation: str = "gelu"
    # When on, candidate slots share position ids (one id per in-block
    # offset), so candidate order carries no positional information and
    # scores are exactly permutation-equivariant.
    shared_candidate_positions: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class QuadrantFlags:
    """Which of the four sentence/candidate attention regions are enabled."""

    s2s: bool = True
    s2c: bool = True
    c2s: bool = True
    c2c: bool = True

    @classmethod
    def all_on(cls) -> "QuadrantFlags":
        return cls()

    @classmethod
    def no_c2c(cls) -> "QuadrantFlags":
        return cls(s2s=True, s2c=True, c2s=True, c2c=False)


@dataclass(frozen=True)
class InputLayout:
    """Segmentation of an assembled token sequence.

    Positions [0, sentence_len) are the sentence region; candidate j occupies
    the block [sentence_len + j*block_size, sentence_len + (j+1)*block_size).
    ``block_lengths[j]`` counts the real (non-PAD) sub-tokens in block j; its
    representative position is the first index of the block.
    """

    sentence_len: int
    n_candidates: int
    block_size: int = 1
    block_lengths: tuple[int, ...] = ()

    def __post_init__(self):
        if self.sentence_len < 1:
            raise ConfigError("sentence_len must be >= 1")
        if self.n_candidates < 0 or self.block_size < 1:
            raise ConfigError("bad candidate region shape")
        if not self.block_lengths:
            object.__setattr__(
                self, "block_lengths", (self.block_size,) * self.n_candidates
            )
        if len(self.block_lengths) != self.n_candidates:
            raise ConfigError("block_lengths must have one entry per candidate")
        for bl in self.block_lengths:
            if not 1 <= bl <= self.block_size:
                raise ConfigError(f"block length {bl} outside [1, {self.block_size}]")

    @property
    def candidate_len(self) -> int:
        return self.n_candidates * self.block_size

    @property
    def total_len(self) -> int:
        return self.sentence_len + self.candidate_len

    @property
    def representative_indices(self) -> tuple[int, ...]:
        return tuple(
            self.sentence_len + j * self.block_size for j in range(self.n_candidates)
        )

    def position_ids(self, config: EncoderConfig) -> np.ndarray:
        """Absolute position ids per token under the configured sharing rule."""
        if self.total_len > config.max_positions:
            raise ConfigError(
                f"sequence length {self.total_len} exceeds max_positions "
                f"{config.max_positions}"
            )
        if config.shared_candidate_positions:
            sent = np.arange(self.sentence_len, dtype=np.int64)
            offsets = np.tile(
                np.arange(self.block_size, dtype=np.int64), self.n_candidates
            )
            return np.concatenate([sent, self.sentence_len + offsets])
        return np.arange(self.total_len, dtype=np.int64)

    def key_validity(self) -> np.ndarray:
        """Boolean vector: True where the position holds a real token
        (sentence tokens and in-block positions below the block length)."""
        valid = np.ones(self.total_len, dtype=bool)
        for j, bl in enumerate(self.block_lengths):
            start = self.sentence_len + j * self.block_size
            valid[start + bl : start + self.block_size] = False
        return valid
