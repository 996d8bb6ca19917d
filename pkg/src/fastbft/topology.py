"""Primary-rooted balanced aggregation tree over the active replicas."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class TreeTopology:
    """Heap-ordered d-ary tree: the node at position k has children kd+1 .. kd+d."""

    order: tuple[int, ...]
    branching: int = 2

    def __post_init__(self) -> None:
        if not self.order:
            raise TopologyError("empty tree")
        if len(set(self.order)) != len(self.order):
            raise TopologyError("duplicate node in tree")
        if self.branching < 1:
            raise TopologyError("branching factor must be >= 1")

    @property
    def root(self) -> int:
        return self.order[0]

    @property
    def nodes(self) -> tuple[int, ...]:
        return self.order

    def __len__(self) -> int:
        return len(self.order)

    def __contains__(self, node: object) -> bool:
        return node in self._index

    @cached_property
    def _index(self) -> dict[int, int]:
        return {node: k for k, node in enumerate(self.order)}

    def position(self, node: int) -> int:
        try:
            return self._index[node]
        except KeyError:
            raise TopologyError(f"node {node} not in tree") from None

    def parent(self, node: int) -> int | None:
        k = self.position(node)
        return None if k == 0 else self.order[(k - 1) // self.branching]

    def children(self, node: int) -> list[int]:
        k = self.position(node)
        first = k * self.branching + 1
        return list(self.order[first : first + self.branching])

    def descendants(self, node: int) -> set[int]:
        out: set[int] = set()
        stack = self.children(node)
        while stack:
            j = stack.pop()
            out.add(j)
            stack.extend(self.children(j))
        return out

    def relations(self, node: int) -> tuple[int | None, list[int], set[int]]:
        return self.parent(node), self.children(node), self.descendants(node)

    def is_leaf(self, node: int) -> bool:
        return not self.children(node)

    def depth(self, node: int) -> int:
        d, k = 0, self.position(node)
        while k:
            k = (k - 1) // self.branching
            d += 1
        return d

    def height(self, node: int) -> int:
        kids = self.children(node)
        return 0 if not kids else 1 + max(self.height(j) for j in kids)

    def leaf_positions(self) -> list[int]:
        return [k for k in range(len(self.order)) if k * self.branching + 1 >= len(self.order)]

    def encode(self) -> bytes:
        """Root id, then the level-order list of (node, parent) pairs."""
        out = [struct.pack(">IQ", self.branching, self.root), struct.pack(">I", len(self.order) - 1)]
        for node in self.order[1:]:
            out.append(struct.pack(">QQ", node, self.parent(node)))
        return b"".join(out)

    @classmethod
    def decode(cls, data: bytes) -> "TreeTopology":
        branching, root = struct.unpack_from(">IQ", data, 0)
        (count,) = struct.unpack_from(">I", data, 12)
        order = [root]
        for i in range(count):
            node, parent = struct.unpack_from(">QQ", data, 16 + 16 * i)
            order.append(node)
        tree = cls(tuple(order), branching)
        for i in range(count):
            node, parent = struct.unpack_from(">QQ", data, 16 + 16 * i)
            if tree.parent(node) != parent:
                raise TopologyError("parent map is not in heap order")
        return tree

    to_wire = encode
    from_wire = decode


def build_tree(primary: int, actives: Sequence[int], branching: int = 2) -> TreeTopology:
    """Place ``actives`` in level order with ``primary`` at the root."""
    if not actives:
        raise TopologyError("no active replicas")
    if primary not in actives:
        raise TopologyError("primary must be among the active replicas")
    rest = [a for a in actives if a != primary]
    return TreeTopology((primary, *rest), branching)


def new_tree_after_suspect(
    tree: TreeTopology, accused: int, replacement: int, accuser: int
) -> TreeTopology:
    """Swap ``replacement`` into the accused's slot and push the accuser to a leaf.

    The accuser trades places with the leaf on the deepest level with the lowest
    heap index that does not hold the replacement.  A root accuser stays put.
    """
    if accused == tree.root:
        raise TopologyError("the root cannot be replaced through a suspicion")
    if accused not in tree:
        raise TopologyError(f"accused {accused} is not active")
    if accuser not in tree:
        raise TopologyError(f"accuser {accuser} is not active")
    if replacement in tree:
        raise TopologyError(f"replacement {replacement} is already active")
    order = list(tree.order)
    order[tree.position(accused)] = replacement
    if accuser != tree.root and accuser != accused:
        k = order.index(accuser)
        if k * tree.branching + 1 < len(order):
            leaves = sorted(tree.leaf_positions(), key=lambda pos: (-tree.depth(tree.order[pos]), pos))
            free = [pos for pos in leaves if order[pos] != replacement]
            leaf = (free or leaves)[0]
            order[k], order[leaf] = order[leaf], order[k]
    return TreeTopology(tuple(order), tree.branching)
