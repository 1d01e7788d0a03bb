"""Token sequence builders for the scoring models.

All model inputs start with the same sentence region:

    [CLS] <context-with-mention> [SEP] <mention> [SEP]

When the sequence would exceed the position budget, context tokens are
dropped from the outer ends (longest side first), keeping the mention and
everything after the first [SEP] intact.
"""

from __future__ import annotations

from .data import MentionRecord
from .errors import CapacityError
from .tokenizer import SubwordVocabulary


def sentence_token_ids(
    record: MentionRecord, vocab: SubwordVocabulary, budget: int
) -> tuple[list[int], bool]:
    """Sentence region ids within ``budget`` positions. Returns (ids, truncated)."""
    left = vocab.tokenize(record.left_context)
    mention = vocab.tokenize(record.mention)
    right = vocab.tokenize(record.right_context)
    fixed = 3 + 2 * len(mention)  # CLS, two SEPs, mention twice
    if fixed > budget:
        raise CapacityError(
            f"record {record.id!r}: mention alone needs {fixed} positions, "
            f"budget is {budget}"
        )
    truncated = False
    while fixed + len(left) + len(right) > budget:
        truncated = True
        if len(left) >= len(right) and left:
            left = left[1:]
        elif right:
            right = right[:-1]
        else:
            left = left[1:]
    ids = (
        [vocab.cls_id]
        + left
        + mention
        + right
        + [vocab.sep_id]
        + mention
        + [vocab.sep_id]
    )
    return ids, truncated
