"""Hierarchical evaluation criteria stored as immutable tree snapshots.

Node ids are ordinal paths ("2", "2.1", "2.1.3") assigned when a child is
attached. They say where a node sits, not what it is called, so two branches
may both contain a criterion named "Topic relevance".
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Iterable, Sequence

from .errors import TreeError, UnknownNodeError

ROOT_ID = "root"
DEFAULT_MAX_LAYERS = 3
DEFAULT_MAX_CHILDREN = 4


@dataclass(frozen=True)
class Criterion:
    id: str
    name: str
    definition: str
    layer: int
    parent_id: str | None
    ordinal: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "definition": self.definition,
            "layer": self.layer,
            "parent_id": self.parent_id,
            "ordinal": self.ordinal,
        }


@dataclass(frozen=True)
class CriteriaTree:
    task: Criterion
    nodes: tuple[Criterion, ...]
    max_layers: int = DEFAULT_MAX_LAYERS
    max_children: int = DEFAULT_MAX_CHILDREN

    @cached_property
    def _by_id(self) -> dict[str, Criterion]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def _children(self) -> dict[str, list[Criterion]]:
        out: dict[str, list[Criterion]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            if n.parent_id is not None:
                out[n.parent_id].append(n)
        for kids in out.values():
            kids.sort(key=lambda c: c.ordinal)
        return out

    @cached_property
    def _sort_keys(self) -> dict[str, tuple[int, ...]]:
        keys: dict[str, tuple[int, ...]] = {}
        for n in sorted(self.nodes, key=lambda c: c.layer):
            if n.parent_id is None:
                keys[n.id] = ()
            else:
                keys[n.id] = keys[n.parent_id] + (n.ordinal,)
        return keys

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._by_id

    def __len__(self) -> int:
        return len(self.nodes)

    def get(self, node_id: str) -> Criterion:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise UnknownNodeError(f"unknown criterion id {node_id!r}") from None

    def children(self, node_id: str) -> list[Criterion]:
        self.get(node_id)
        return list(self._children[node_id])

    def depth(self) -> int:
        return max(n.layer for n in self.nodes)

    def find(self, name: str, layer: int | None = None) -> list[Criterion]:
        """All nodes with this name (optionally restricted to one layer), canonical order."""
        hits = [n for n in self.nodes if n.name == name and (layer is None or n.layer == layer)]
        return sorted(hits, key=lambda n: (n.layer, self._sort_keys[n.id]))

    def to_dict(self) -> dict[str, Any]:
        ordered = [self.task] + [self.get(i) for i in feature_order(self, allow_empty=True)]
        return {
            "task": self.task.definition,
            "max_layers": self.max_layers,
            "max_children": self.max_children,
            "nodes": [n.to_dict() for n in ordered],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CriteriaTree:
        nodes = tuple(
            Criterion(
                id=str(n["id"]),
                name=str(n["name"]),
                definition=str(n["definition"]),
                layer=int(n["layer"]),
                parent_id=None if n["parent_id"] is None else str(n["parent_id"]),
                ordinal=int(n["ordinal"]),
            )
            for n in data["nodes"]
        )
        roots = [n for n in nodes if n.layer == 0]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one layer-0 node, found {len(roots)}")
        tree = cls(
            task=roots[0],
            nodes=nodes,
            max_layers=int(data["max_layers"]),
            max_children=int(data["max_children"]),
        )
        validate(tree)
        return tree

    @classmethod
    def from_json(cls, text: str) -> CriteriaTree:
        return cls.from_dict(json.loads(text))


def validate(tree: CriteriaTree) -> None:
    """Raise TreeError if any structural invariant is broken."""
    ids = [n.id for n in tree.nodes]
    if len(set(ids)) != len(ids):
        raise TreeError("duplicate node ids")
    roots = [n for n in tree.nodes if n.layer == 0]
    if len(roots) != 1 or roots[0] != tree.task:
        raise TreeError("tree must have exactly one layer-0 node (the task)")
    by_id = {n.id: n for n in tree.nodes}
    seen_slots: set[tuple[str | None, int]] = set()
    child_count: dict[str, int] = {}
    for n in tree.nodes:
        if (n.layer == 0) != (n.parent_id is None):
            raise TreeError(f"node {n.id}: layer 0 iff no parent")
        if n.layer > tree.max_layers:
            raise TreeError(f"node {n.id}: layer {n.layer} exceeds max_layers {tree.max_layers}")
        if n.layer >= 1 and not n.definition.strip():
            raise TreeError(f"node {n.id}: empty definition")
        if (n.parent_id, n.ordinal) in seen_slots:
            raise TreeError(f"node {n.id}: duplicate (parent, ordinal)")
        seen_slots.add((n.parent_id, n.ordinal))
        if n.parent_id is not None:
            parent = by_id.get(n.parent_id)
            if parent is None or parent.layer != n.layer - 1:
                raise TreeError(f"node {n.id}: parent must sit one layer above")
            child_count[n.parent_id] = child_count.get(n.parent_id, 0) + 1
    for pid, count in child_count.items():
        if count > tree.max_children:
            raise TreeError(f"node {pid} has {count} children (max {tree.max_children})")


def new_tree(
    task_description: str,
    max_layers: int = DEFAULT_MAX_LAYERS,
    max_children: int = DEFAULT_MAX_CHILDREN,
    name: str | None = None,
) -> CriteriaTree:
    if not task_description or not task_description.strip():
        raise TreeError("task description must be non-empty")
    if max_layers < 1:
        raise TreeError("max_layers must be >= 1")
    if max_children < 1:
        raise TreeError("max_children must be >= 1")
    root = Criterion(
        id=ROOT_ID,
        name=name or task_description,
        definition=task_description,
        layer=0,
        parent_id=None,
        ordinal=0,
    )
    return CriteriaTree(task=root, nodes=(root,), max_layers=max_layers, max_children=max_children)


def attach_children(
    tree: CriteriaTree,
    parent_id: str,
    children: Iterable[tuple[str, str]],
) -> CriteriaTree:
    """Return a new snapshot with ``children`` appended under ``parent_id``."""
    parent = tree.get(parent_id)
    children = list(children)
    if not children:
        return tree
    if parent.layer + 1 > tree.max_layers:
        raise TreeError(
            f"cannot attach below {parent.name!r}: layer {parent.layer + 1} exceeds max_layers {tree.max_layers}"
        )
    existing = tree.children(parent_id)
    if len(existing) + len(children) > tree.max_children:
        raise TreeError(
            f"{parent.name!r} would have {len(existing) + len(children)} children (max {tree.max_children})"
        )
    names = [n for n, _ in children]
    taken = {c.name for c in existing}
    for n in names:
        if not n or not n.strip():
            raise TreeError("criterion name must be non-empty")
        if n in taken:
            raise TreeError(f"duplicate sibling name {n!r} under {parent.name!r}")
        taken.add(n)

    prefix = "" if parent.layer == 0 else parent.id + "."
    new_nodes = []
    for i, (name, definition) in enumerate(children, start=len(existing) + 1):
        if not definition or not definition.strip():
            raise TreeError(f"criterion {name!r} needs a definition")
        new_nodes.append(
            Criterion(
                id=f"{prefix}{i}",
                name=name.strip(),
                definition=definition.strip(),
                layer=parent.layer + 1,
                parent_id=parent_id,
                ordinal=i,
            )
        )
    return CriteriaTree(
        task=tree.task,
        nodes=tree.nodes + tuple(new_nodes),
        max_layers=tree.max_layers,
        max_children=tree.max_children,
    )


def lineage(tree: CriteriaTree, node_id: str) -> list[Criterion]:
    node = tree.get(node_id)
    path = [node]
    while node.parent_id is not None:
        node = tree.get(node.parent_id)
        path.append(node)
    return path[::-1]


def nodes_at_layer(tree: CriteriaTree, layer: int) -> list[Criterion]:
    if not 0 <= layer <= tree.max_layers:
        raise TreeError(f"layer {layer} outside [0, {tree.max_layers}]")
    keys = tree._sort_keys
    return sorted((n for n in tree.nodes if n.layer == layer), key=lambda n: keys[n.id])


def feature_order(tree: CriteriaTree, allow_empty: bool = False) -> list[str]:
    """Non-root node ids: ascending layer, then parent-major canonical order."""
    keys = tree._sort_keys
    ids = [n.id for n in sorted(tree.nodes, key=lambda n: (n.layer, keys[n.id])) if n.layer >= 1]
    if not ids and not allow_empty:
        raise TreeError("tree has no criteria below the root")
    return ids


def layer_of(tree: CriteriaTree, ids: Sequence[str]) -> list[int]:
    return [tree.get(i).layer for i in ids]


def prune_to_layers(tree: CriteriaTree, max_layer: int) -> CriteriaTree:
    """Drop every node deeper than ``max_layer``; ids of kept nodes are unchanged."""
    kept = tuple(n for n in tree.nodes if n.layer <= max_layer)
    return CriteriaTree(task=tree.task, nodes=kept, max_layers=tree.max_layers, max_children=tree.max_children)


def build_tree(
    task_description: str,
    items: Sequence[tuple[str, str, Sequence[Any]]],
    max_layers: int = DEFAULT_MAX_LAYERS,
    max_children: int = DEFAULT_MAX_CHILDREN,
) -> CriteriaTree:
    """Build a tree from nested ``(name, definition, children)`` triples."""
    tree = new_tree(task_description, max_layers, max_children)

    def attach(t: CriteriaTree, parent_id: str, items: Sequence[Any]) -> CriteriaTree:
        t2 = attach_children(t, parent_id, [(name, definition) for name, definition, *_ in items])
        kids = t2.children(parent_id)
        for node, item in zip(kids[-len(items):] if items else [], items):
            sub = item[2] if len(item) > 2 else ()
            if sub:
                t2 = attach(t2, node.id, sub)
        return t2

    return attach(tree, ROOT_ID, items)
