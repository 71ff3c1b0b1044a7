"""Knowledge-graph loading, interning and adjacency indexing.

Entities and relations are interned to dense integer ids in first-seen
order; all downstream modules work with ids only.  Triplets are stored
directed as written, but neighborhood queries treat incidence as
undirected and report a direction flag instead.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

FORWARD = 0
BACKWARD = 1


class TripletParseError(ValueError):
    """Raised for a malformed line in a triplet TSV file."""

    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass
class KnowledgeGraph:
    """Interned triplet store with bidirectional adjacency indexes.

    Immutable after construction; `merge` returns a fresh graph.
    """

    entity_names: list[str]
    relation_names: list[str]
    triplets: list[tuple[int, int, int]]
    out_index: list[list[tuple[int, int, int]]] = field(repr=False)
    in_index: list[list[tuple[int, int, int]]] = field(repr=False)

    def __init__(
        self,
        entity_names: Sequence[str],
        relation_names: Sequence[str],
        triplets: Iterable[tuple[int, int, int]],
    ):
        self.entity_names = list(entity_names)
        self.relation_names = list(relation_names)
        self._entity_ids = {name: i for i, name in enumerate(self.entity_names)}
        self._relation_ids = {name: i for i, name in enumerate(self.relation_names)}
        if len(self._entity_ids) != len(self.entity_names):
            raise ValueError("duplicate entity names")
        if len(self._relation_ids) != len(self.relation_names):
            raise ValueError("duplicate relation names")

        self.triplets = []
        self._triplet_set: set[tuple[int, int, int]] = set()
        n_e, n_r = len(self.entity_names), len(self.relation_names)
        self.out_index = [[] for _ in range(n_e)]
        self.in_index = [[] for _ in range(n_e)]
        for h, r, t in triplets:
            if not (0 <= h < n_e and 0 <= t < n_e):
                raise ValueError(f"entity id out of range in triplet ({h}, {r}, {t})")
            if not (0 <= r < n_r):
                raise ValueError(f"relation id out of range in triplet ({h}, {r}, {t})")
            if (h, r, t) in self._triplet_set:
                continue
            idx = len(self.triplets)
            self.triplets.append((h, r, t))
            self._triplet_set.add((h, r, t))
            self.out_index[h].append((r, t, idx))
            self.in_index[t].append((r, h, idx))

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    @property
    def n_triplets(self) -> int:
        return len(self.triplets)

    def entity_id(self, name: str) -> int:
        return self._entity_ids[name]

    def relation_id(self, name: str) -> int:
        return self._relation_ids[name]

    def has_entity(self, name: str) -> bool:
        return name in self._entity_ids

    def has_relation(self, name: str) -> bool:
        return name in self._relation_ids

    def has_triplet(self, h: int, r: int, t: int) -> bool:
        return (h, r, t) in self._triplet_set

    def _check_entity(self, e: int) -> None:
        if not isinstance(e, (int,)) or not (0 <= e < self.n_entities):
            raise ValueError(f"invalid entity id {e!r}")

    def neighbors(self, e: int) -> list[tuple[int, int, int]]:
        """All incident triplets of `e` as (relation, neighbor, direction).

        Outgoing triplets carry FORWARD, incoming BACKWARD; the combined
        list is ordered by triplet index.
        """
        self._check_entity(e)
        merged = [(idx, r, t, FORWARD) for r, t, idx in self.out_index[e]]
        merged += [(idx, r, h, BACKWARD) for r, h, idx in self.in_index[e]]
        merged.sort(key=lambda item: item[0])
        return [(r, other, d) for _, r, other, d in merged]

    def incident_triplet_indices(self, e: int) -> list[int]:
        """Indices of all triplets touching `e`, ordered by triplet index."""
        self._check_entity(e)
        idxs = [idx for _, _, idx in self.out_index[e]]
        idxs += [idx for _, _, idx in self.in_index[e]]
        idxs.sort()
        return idxs

    def k_hop_neighborhood(self, e: int, k: int) -> set[int]:
        """Entities within k undirected hops of `e`, including `e` itself."""
        self._check_entity(e)
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        seen = {e}
        frontier = deque([(e, 0)])
        while frontier:
            node, dist = frontier.popleft()
            if dist == k:
                continue
            for _, other, _ in self.neighbors(node):
                if other not in seen:
                    seen.add(other)
                    frontier.append((other, dist + 1))
        return seen

    def merge(self, extra: Iterable[tuple[str, str, str]]) -> "KnowledgeGraph":
        """A new graph whose triplet set is the union with `extra`.

        Existing ids are preserved; new entity/relation names are appended
        in first-seen order.
        """
        entity_names = list(self.entity_names)
        relation_names = list(self.relation_names)
        entity_ids = dict(self._entity_ids)
        relation_ids = dict(self._relation_ids)
        triplets = list(self.triplets)
        seen = set(self._triplet_set)
        for h_name, r_name, t_name in extra:
            for name in (h_name, t_name):
                if name not in entity_ids:
                    entity_ids[name] = len(entity_names)
                    entity_names.append(name)
            if r_name not in relation_ids:
                relation_ids[r_name] = len(relation_names)
                relation_names.append(r_name)
            trip = (entity_ids[h_name], relation_ids[r_name], entity_ids[t_name])
            if trip not in seen:
                seen.add(trip)
                triplets.append(trip)
        return KnowledgeGraph(entity_names, relation_names, triplets)

    def triplet_names(self, idx: int) -> tuple[str, str, str]:
        h, r, t = self.triplets[idx]
        return self.entity_names[h], self.relation_names[r], self.entity_names[t]


def _parse_lines(lines: Iterable[str], path: str) -> Iterable[tuple[int, str, str, str]]:
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise TripletParseError(
                path, line_no, f"expected 3 tab-separated fields, got {len(fields)}"
            )
        yield line_no, fields[0], fields[1], fields[2]


def load_kg(path: str) -> KnowledgeGraph:
    """Load a TSV triplet file (head<TAB>relation<TAB>tail per line).

    Blank lines and lines starting with "#" are ignored; exact duplicate
    triplets are deduplicated.  Id assignment follows first occurrence.
    """
    entity_names: list[str] = []
    relation_names: list[str] = []
    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}
    triplets: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for _, h_name, r_name, t_name in _parse_lines(fh, path):
            for name in (h_name, t_name):
                if name not in entity_ids:
                    entity_ids[name] = len(entity_names)
                    entity_names.append(name)
            if r_name not in relation_ids:
                relation_ids[r_name] = len(relation_names)
                relation_names.append(r_name)
            triplets.append((entity_ids[h_name], relation_ids[r_name], entity_ids[t_name]))
    return KnowledgeGraph(entity_names, relation_names, triplets)


def save_kg(kg: KnowledgeGraph, path: str) -> None:
    """Write the graph back to triplet TSV, one triplet per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.triplets:
            fh.write(f"{kg.entity_names[h]}\t{kg.relation_names[r]}\t{kg.entity_names[t]}\n")


def load_triplet_names(path: str) -> list[tuple[str, str, str]]:
    """Read a triplet TSV into (head, relation, tail) name tuples."""
    with open(path, "r", encoding="utf-8") as fh:
        return [(h, r, t) for _, h, r, t in _parse_lines(fh, path)]
