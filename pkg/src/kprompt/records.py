"""Compiled-sample records: the on-disk contract between compile and train/eval.

One JSONL record per (user, split point): fused token ids, the node
table, the bit-packed attention mask, and the target item.  Masks are
training-step-invariant, so they are built once at compile time and
cached here.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

from .ktree import KnowledgeTree
from .maskgen import MaskMatrix
from .prompts import EOS_ID


@dataclass(frozen=True)
class NodeRow:
    node_id: int
    kind: str
    parent: int | None
    span: tuple[int, int]


@dataclass
class CompiledSample:
    user: str
    split: str
    history: list[str]
    target_item: str
    target_token_id: int
    template_id: int
    hops: int
    degree: int
    token_ids: list[int]
    mask_token_index: int
    nodes: list[NodeRow]
    mask: MaskMatrix

    def target_ids(self) -> list[int]:
        return [self.target_token_id, EOS_ID]

    def to_json(self) -> str:
        payload = {
            "user": self.user,
            "split": self.split,
            "history": self.history,
            "target": self.target_item,
            "target_token_id": self.target_token_id,
            "template_id": self.template_id,
            "hops": self.hops,
            "degree": self.degree,
            "token_ids": self.token_ids,
            "mask_token_index": self.mask_token_index,
            "nodes": [[n.node_id, n.kind, n.parent, n.span[0], n.span[1]] for n in self.nodes],
            "mask": base64.b64encode(self.mask.to_bytes()).decode("ascii"),
        }
        return json.dumps(payload, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CompiledSample":
        payload = json.loads(line)
        return cls(
            user=payload["user"],
            split=payload["split"],
            history=list(payload["history"]),
            target_item=payload["target"],
            target_token_id=payload["target_token_id"],
            template_id=payload["template_id"],
            hops=payload["hops"],
            degree=payload["degree"],
            token_ids=list(payload["token_ids"]),
            mask_token_index=payload["mask_token_index"],
            nodes=[
                NodeRow(node_id=i, kind=k, parent=p, span=(s, e))
                for i, k, p, s, e in payload["nodes"]
            ],
            mask=MaskMatrix.from_bytes(base64.b64decode(payload["mask"])),
        )


def node_table(tree: KnowledgeTree) -> list[NodeRow]:
    return [
        NodeRow(node_id=n.node_id, kind=n.kind.value, parent=n.parent, span=n.token_span)
        for n in tree.nodes
    ]


def write_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(sample.to_json() + "\n")


def read_jsonl(path) -> list[CompiledSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                samples.append(CompiledSample.from_json(line))
    return samples
