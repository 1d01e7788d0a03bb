"""Quadrant attention masks over the sentence/candidate layout."""

from __future__ import annotations

import numpy as np

from .config import InputLayout, QuadrantFlags


def build_quadrant_mask(layout: InputLayout, flags: QuadrantFlags) -> np.ndarray:
    """Boolean (L, L) matrix: entry (q, k) is True when query q may attend
    to key k under the region flags.

    With c2c off, entries inside one candidate's own slot/block stay allowed:
    that block-diagonal pattern is exactly what the reduced attention path
    computes, so this mask is its oracle.
    """
    ls = layout.sentence_len
    total = layout.total_len
    mask = np.zeros((total, total), dtype=bool)
    mask[:ls, :ls] = flags.s2s
    mask[:ls, ls:] = flags.s2c
    mask[ls:, :ls] = flags.c2s
    mask[ls:, ls:] = flags.c2c
    if not flags.c2c:
        b = layout.block_size
        for j in range(layout.n_candidates):
            start = ls + j * b
            mask[start : start + b, start : start + b] = True
    return mask


def attention_mask(layout: InputLayout, flags: QuadrantFlags) -> np.ndarray:
    """Quadrant mask with PAD positions additionally removed as keys."""
    mask = build_quadrant_mask(layout, flags)
    return mask & layout.key_validity()[None, :]
