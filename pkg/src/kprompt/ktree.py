"""Knowledge-tree construction and level-order linearization.

The tree roots at the cloze prompt, puts one node per history-item
mention at depth 1, and hangs hop-k triple prompts at depth k+1.  A
breadth-first walk over the triple-prompt nodes yields the knowledge
prompt text, which is fused with the cloze prompt into one token
sequence.  Every fused token is owned by exactly one node; the owner
array is what the attention mask is generated from.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .corpus import KnowledgeGraph, neighbors
from .prompts import PromptText, TokenSeq, Vocabulary, fuse_prompt, render_triple, tokenize

MAX_HOPS = 3  # input-length budget keeps knowledge prompts within three hops


class NodeKind(str, Enum):
    ROOT = "root"
    ITEM = "item"
    TRIPLE = "triple"


@dataclass
class KTreeNode:
    node_id: int
    kind: NodeKind
    parent: int | None
    depth: int
    token_span: tuple[int, int] = (0, 0)
    children: list[int] = field(default_factory=list)
    entity: str | None = None
    item: str | None = None
    triple: tuple[str, str, str] | None = None
    text: str | None = None


@dataclass
class KnowledgeTree:
    nodes: list[KTreeNode]
    hops: int
    degree: int
    token_owner: list[int]
    mask_token_index: int

    @property
    def root(self) -> KTreeNode:
        return self.nodes[0]

    def triple_nodes(self) -> list[KTreeNode]:
        return [n for n in self.nodes if n.kind is NodeKind.TRIPLE]


def subgraph_prompts(
    kg: KnowledgeGraph, entity: str, hops: int, degree: int
) -> list[tuple[int, tuple[str, str, str], str]]:
    """Breadth-first (depth, triple, rendered text) enumeration around an entity.

    Expansion is capped at `degree` tail entities per head.  An entity
    already on the path from the subtree root is not expanded again, so
    cycles surface as back-edge prompts but never recurse.
    """
    if hops < 1:
        raise ValueError(f"hops must be >= 1, got {hops}")
    out: list[tuple[int, tuple[str, str, str], str]] = []
    queue: deque[tuple[int, str, tuple[str, ...]]] = deque([(0, entity, (entity,))])
    while queue:
        depth, head, path = queue.popleft()
        if depth >= hops:
            continue
        for relation, tail in neighbors(kg, head, degree):
            text = render_triple(kg.templates[relation], kg.name_of(head), kg.name_of(tail)).text
            out.append((depth + 1, (head, relation, tail), text))
            if tail not in path:
                queue.append((depth + 1, tail, path + (tail,)))
    return out


def build_tree(
    mpp: PromptText,
    mpp_tokens: TokenSeq,
    kg: KnowledgeGraph,
    history: list[str],
    hops: int,
    degree: int,
    vocab: Vocabulary,
    max_input_tokens: int = 512,
) -> tuple[KnowledgeTree, TokenSeq]:
    """Build the knowledge tree and the fused token sequence.

    Item nodes reuse their mention span inside the cloze prompt rather
    than repeating the entity name, so a triple prompt's parent tokens
    are the item mention itself.  The root owns every token not claimed
    by an item mention or a triple prompt, including the [SPE] anchors.
    """
    if not 0 <= hops <= MAX_HOPS:
        raise ValueError(f"hops must be in 0..{MAX_HOPS}, got {hops}")
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    if [item for item, _, _ in mpp.item_spans] != list(history):
        raise ValueError("item mentions in the rendered prompt do not match the history")
    if mpp.mask_span is None:
        raise ValueError("prompt has no mask span")

    root = KTreeNode(node_id=0, kind=NodeKind.ROOT, parent=None, depth=0)
    nodes = [root]
    queue: deque[tuple[int, str, tuple[str, ...]]] = deque()
    for item, _, _ in mpp.item_spans:
        entity = kg.entity_for_item(item)
        node = KTreeNode(
            node_id=len(nodes), kind=NodeKind.ITEM, parent=0, depth=1, entity=entity, item=item
        )
        root.children.append(node.node_id)
        nodes.append(node)
        queue.append((node.node_id, entity, (entity,)))

    while queue:
        parent_id, head, path = queue.popleft()
        parent = nodes[parent_id]
        if parent.depth > hops:  # children would exceed hop budget
            continue
        for relation, tail in neighbors(kg, head, degree):
            text = render_triple(kg.templates[relation], kg.name_of(head), kg.name_of(tail)).text
            node = KTreeNode(
                node_id=len(nodes),
                kind=NodeKind.TRIPLE,
                parent=parent_id,
                depth=parent.depth + 1,
                entity=tail,
                triple=(head, relation, tail),
                text=text,
            )
            parent.children.append(node.node_id)
            nodes.append(node)
            if tail not in path:
                queue.append((node.node_id, tail, path + (tail,)))

    # Creation order above is breadth-first, so joining texts in node
    # order linearizes the tree level by level.
    triple_nodes = [n for n in nodes if n.kind is NodeKind.TRIPLE]
    kp_char_spans = []
    pos = 0
    parts = []
    for node in triple_nodes:
        if parts:
            pos += 1  # joining space
        parts.append(node.text)
        kp_char_spans.append((pos, pos + len(node.text)))
        pos += len(node.text)
    kp_text = " ".join(parts)
    kp_tokens = tokenize(kp_text, vocab)

    fused = fuse_prompt(mpp_tokens, kp_tokens, max_input_tokens)
    mpp_token_offset = 1
    kp_token_offset = len(mpp_tokens) + 2

    root.token_span = (0, len(fused))
    token_owner = [0] * len(fused)

    def claim(node: KTreeNode, lo: int, hi: int) -> None:
        node.token_span = (lo, hi)
        for idx in range(lo, hi):
            if token_owner[idx] != 0:
                raise ValueError(
                    f"token {idx} claimed by both node {token_owner[idx]} and node {node.node_id}"
                )
            token_owner[idx] = node.node_id

    item_nodes = [n for n in nodes if n.kind is NodeKind.ITEM]
    for node, (_, start, end) in zip(item_nodes, mpp.item_spans):
        lo, hi = mpp_tokens.token_range(start, end)
        claim(node, lo + mpp_token_offset, hi + mpp_token_offset)

    for node, (start, end) in zip(triple_nodes, kp_char_spans):
        lo, hi = kp_tokens.token_range(start, end)
        claim(node, lo + kp_token_offset, hi + kp_token_offset)

    mask_lo, _ = mpp_tokens.token_range(*mpp.mask_span)
    tree = KnowledgeTree(
        nodes=nodes,
        hops=hops,
        degree=degree,
        token_owner=token_owner,
        mask_token_index=mask_lo + mpp_token_offset,
    )
    return tree, fused
