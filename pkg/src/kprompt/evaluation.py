"""Full-ranking leave-one-out evaluation: HR@k and NDCG@k.

Single-ground-truth form: the ideal DCG is 1, so NDCG for a hit at
1-based rank r is 1/log2(r+1).  Users are weighted equally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .generate import BeamConfig, beam_search
from .model import ModelState
from .prompts import Vocabulary
from .records import CompiledSample


def ndcg_hr(rank: int | None, k: int) -> tuple[float, float]:
    """(hit, gain) for a target at 1-based `rank`; None means not retrieved."""
    if rank is None:
        return 0.0, 0.0
    if rank <= 0:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank <= k:
        return 1.0, 1.0 / math.log2(rank + 1)
    return 0.0, 0.0


def rank_of(ranked_items: list[str], target: str) -> int | None:
    for idx, item in enumerate(ranked_items):
        if item == target:
            return idx + 1
    return None


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    user_count: int
    fingerprint: dict = field(default_factory=dict)
    ks: tuple[int, ...] = (5, 10)

    def validate(self) -> None:
        ordered = sorted(self.ks)
        for k in ordered:
            hr = self.metrics[f"HR@{k}"]
            ndcg = self.metrics[f"NDCG@{k}"]
            if not 0.0 <= hr <= 1.0:
                raise ValueError(f"HR@{k}={hr} out of [0, 1]")
            if ndcg < 0.0 or ndcg > hr + 1e-12:
                raise ValueError(f"NDCG@{k}={ndcg} exceeds HR@{k}={hr}")
        for small, large in zip(ordered, ordered[1:]):
            if self.metrics[f"HR@{small}"] > self.metrics[f"HR@{large}"] + 1e-12:
                raise ValueError(f"HR@{small} > HR@{large}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "metrics": self.metrics,
                "user_count": self.user_count,
                "ks": list(self.ks),
                "fingerprint": self.fingerprint,
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, raw: str) -> "MetricsReport":
        payload = json.loads(raw)
        return cls(
            metrics=payload["metrics"],
            user_count=payload["user_count"],
            fingerprint=payload.get("fingerprint", {}),
            ks=tuple(payload.get("ks", (5, 10))),
        )


def _aggregate(per_user_ranks: list[int | None], ks, user_count: int) -> dict[str, float]:
    metrics: dict[str, float] = {}
    for k in ks:
        hits = []
        gains = []
        for rank in per_user_ranks:
            hr, ndcg = ndcg_hr(rank, k)
            hits.append(hr)
            gains.append(ndcg)
        metrics[f"HR@{k}"] = sum(hits) / user_count
        metrics[f"NDCG@{k}"] = sum(gains) / user_count
    return metrics


def evaluate_split(
    state: ModelState,
    samples: list[CompiledSample],
    cfg: BeamConfig,
    vocab: Vocabulary,
    ks: tuple[int, ...] = (5, 10),
    use_tree_mask: bool = True,
    mask_cross: bool = False,
    exclude_seen: bool = False,
    fingerprint: dict | None = None,
    topk_path=None,
) -> MetricsReport:
    """Rank every user's target over the whole catalog and average metrics.

    With `exclude_seen`, items from the user's history are dropped from
    the ranking before computing the target's position.  Per-user top-k
    lists are optionally persisted as JSONL; recomputing metrics from
    that file reproduces this report exactly.
    """
    if not samples:
        raise ValueError("evaluation split is empty")
    list_len = max(cfg.k, max(ks))
    extra = max(len(s.history) for s in samples) if exclude_seen else 0
    width = max(cfg.beam_width, list_len + extra)
    search_cfg = BeamConfig(beam_width=width, k=width, max_target_len=cfg.max_target_len)

    rows = []
    ranks: list[int | None] = []
    for sample in samples:
        if sample.mask is None:
            raise ValueError(f"sample for user {sample.user!r} has no compiled mask")
        ranked = beam_search(
            state, sample, search_cfg, vocab, use_tree_mask=use_tree_mask, mask_cross=mask_cross
        )
        if exclude_seen:
            seen = set(sample.history)
            ranked = [(item, score) for item, score in ranked if item not in seen]
        ranked = ranked[:list_len]
        ranks.append(rank_of([item for item, _ in ranked], sample.target_item))
        rows.append({"user": sample.user, "target": sample.target_item, "topk": ranked})

    if topk_path is not None:
        with open(topk_path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    report = MetricsReport(
        metrics=_aggregate(ranks, ks, len(samples)),
        user_count=len(samples),
        fingerprint=fingerprint or {},
        ks=tuple(ks),
    )
    report.validate()
    return report


def report_from_topk(path, ks: tuple[int, ...] = (5, 10), fingerprint: dict | None = None) -> MetricsReport:
    """Recompute a MetricsReport from a persisted per-user top-k JSONL file."""
    ranks: list[int | None] = []
    count = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            count += 1
            ranks.append(rank_of([item for item, _ in row["topk"]], row["target"]))
    report = MetricsReport(
        metrics=_aggregate(ranks, ks, count),
        user_count=count,
        fingerprint=fingerprint or {},
        ks=tuple(ks),
    )
    report.validate()
    return report
