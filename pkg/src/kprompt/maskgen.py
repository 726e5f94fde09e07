"""Token-level attention mask generation from a knowledge tree.

A token may attend tokens of its own node, its parent node, its child
nodes, and sibling nodes (same non-null parent); everything else is
masked out.  The mask is stored bit-packed and exposed as an additive
matrix of 0 / large-negative entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError
from .ktree import KnowledgeTree

# Large negative finite stand-in for -inf: softmax weight underflows to
# exactly 0 at working precision, and a hypothetical all-masked row
# degrades to uniform attention instead of NaN.
NEG_SENTINEL = -1.0e9


@dataclass(frozen=True)
class MaskMatrix:
    """Square visibility matrix over fused tokens, bit-packed row-major."""

    size: int
    packed: bytes

    @classmethod
    def from_visible(cls, visible: np.ndarray) -> "MaskMatrix":
        visible = np.asarray(visible, dtype=bool)
        if visible.ndim != 2 or visible.shape[0] != visible.shape[1]:
            raise ValueError(f"visibility matrix must be square, got {visible.shape}")
        return cls(size=visible.shape[0], packed=np.packbits(visible, axis=1).tobytes())

    def visible(self) -> np.ndarray:
        row_bytes = (self.size + 7) // 8
        packed = np.frombuffer(self.packed, dtype=np.uint8).reshape(self.size, row_bytes)
        return np.unpackbits(packed, axis=1)[:, : self.size].astype(bool)

    def is_visible(self, i: int, j: int) -> bool:
        row_bytes = (self.size + 7) // 8
        byte = self.packed[i * row_bytes + j // 8]
        return bool((byte >> (7 - j % 8)) & 1)

    def additive(self, dtype=np.float32, sentinel: float = NEG_SENTINEL) -> np.ndarray:
        """0 where visible, `sentinel` where masked; added to attention scores."""
        return np.where(self.visible(), 0.0, sentinel).astype(dtype)

    def visible_pair_count(self) -> int:
        return int(self.visible().sum())

    def to_bytes(self) -> bytes:
        header = int(self.size).to_bytes(4, "little")
        return header + self.packed

    @classmethod
    def from_bytes(cls, data: bytes) -> "MaskMatrix":
        size = int.from_bytes(data[:4], "little")
        row_bytes = (size + 7) // 8
        body = data[4 : 4 + size * row_bytes]
        if len(body) != size * row_bytes:
            raise ValueError("truncated mask payload")
        return cls(size=size, packed=bytes(body))


def node_visible(tree: KnowledgeTree, a: int, b: int) -> bool:
    """Whether tokens of node `a` may attend tokens of node `b`.

    True iff same node, parent/child in either direction, or siblings
    under a shared non-null parent.  The root has no parent and hence
    no siblings.
    """
    n = len(tree.nodes)
    for node_id in (a, b):
        if not 0 <= node_id < n:
            raise ValueError(f"node id {node_id} out of range 0..{n - 1}")
    if a == b:
        return True
    pa = tree.nodes[a].parent
    pb = tree.nodes[b].parent
    if pa == b or pb == a:
        return True
    return pa is not None and pb is not None and pa == pb


def build_mask(tree: KnowledgeTree, length: int) -> MaskMatrix:
    """Expand node-level visibility to every token pair via token owners."""
    owner = np.asarray(tree.token_owner, dtype=np.int64)
    if len(owner) != length:
        missing = len(owner) if len(owner) < length else length
        raise CoverageError(
            f"token index {missing} not covered: tree owns {len(owner)} tokens, "
            f"mask requested for {length}"
        )
    n = len(tree.nodes)
    if owner.size and (owner.min() < 0 or owner.max() >= n):
        bad = int(np.argmax((owner < 0) | (owner >= n)))
        raise CoverageError(f"token index {bad} owned by invalid node {int(owner[bad])}")

    parent = np.array(
        [-1 if node.parent is None else node.parent for node in tree.nodes], dtype=np.int64
    )
    ids = np.arange(n)
    vis = ids[:, None] == ids[None, :]
    vis |= parent[:, None] == ids[None, :]
    vis |= parent[None, :] == ids[:, None]
    vis |= (parent[:, None] == parent[None, :]) & (parent[:, None] != -1)
    return MaskMatrix.from_visible(vis[owner][:, owner])
