"""Constrained beam-search decoding over the item-token lattice.

The decoder may emit only an item token at step one and end-of-sequence
afterwards.  Scores are log-probabilities renormalized over the allowed
token set at each step, so a forced step (singleton set) contributes
exactly zero and the ranking over items is decided by the single free
step; beam width >= k therefore returns the exact top-k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError
from .model import ModelState, make_batch
from .prompts import BOS_ID, EOS_ID, Vocabulary
from .records import CompiledSample

ITEM_PREFIX = "item_"


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 20
    k: int = 10
    max_target_len: int = 2

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k", f"must be >= 1, got {self.k}")
        if self.beam_width < self.k:
            raise ConfigError(
                "beam_width", f"must be >= k, got beam_width={self.beam_width} k={self.k}"
            )
        if self.max_target_len < 2:
            raise ConfigError("max_target_len", f"must be >= 2, got {self.max_target_len}")


def _select_top(sequences, scores, tie_keys, limit):
    # Primary: score descending; secondary: item token ascending.
    order = np.lexsort((np.asarray(tie_keys), -np.asarray(scores)))[:limit]
    return [sequences[i] for i in order], [scores[i] for i in order]


def beam_search(
    state: ModelState,
    sample: CompiledSample,
    cfg: BeamConfig,
    vocab: Vocabulary,
    use_tree_mask: bool = True,
    mask_cross: bool = False,
) -> list[tuple[str, float]]:
    """Rank items for one compiled sample; returns top-k (item, score).

    Deterministic for a frozen model: ties in total log-probability break
    by ascending item id.  Duplicates are impossible since each beam is
    keyed by its step-one item token.
    """
    item_ids = vocab.item_token_ids()
    if not item_ids:
        raise ValueError("vocabulary contains no item tokens")

    model = state.model
    model.eval()
    batch = make_batch([sample], use_tree_mask=use_tree_mask, mask_cross=mask_cross)
    dtype = next(model.parameters()).dtype
    batch = batch.to(dtype)

    with torch.no_grad():
        memory = model.encode(batch.enc_ids, batch.enc_mask)
        beams: list[list[int]] = [[]]
        scores: list[float] = [0.0]
        for step in range(cfg.max_target_len):
            allowed = item_ids if step == 0 else [EOS_ID]
            if len(allowed) == 1:
                # Forced step: renormalized log-prob over a singleton set is 0.
                beams = [seq + allowed for seq in beams]
                continue
            allowed_t = torch.tensor(allowed, dtype=torch.long)
            cand_seqs, cand_scores, cand_ties = [], [], []
            for seq, score in zip(beams, scores):
                dec_ids = torch.tensor([[BOS_ID] + seq], dtype=torch.long)
                logits = model.decode(dec_ids, memory, batch.cross_mask)[0, -1]
                restricted = logits[allowed_t]
                log_probs = restricted - torch.logsumexp(restricted, dim=0)
                for tok, lp in zip(allowed, log_probs.tolist()):
                    cand_seqs.append(seq + [tok])
                    cand_scores.append(score + lp)
                    cand_ties.append(vocab.token_of(tok))
            beams, scores = _select_top(cand_seqs, cand_scores, cand_ties, cfg.beam_width)

    # Beams come out of _select_top already ordered by (score desc, item asc);
    # forced steps preserve that order.
    results = []
    for seq, score in zip(beams[: cfg.k], scores[: cfg.k]):
        token = vocab.token_of(seq[0])
        results.append((token[len(ITEM_PREFIX) :], float(score)))
    return results
