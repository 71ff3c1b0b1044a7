"""Contextualized graphs around (head, tail) pairs.

Every triplet to score is turned into a ContextGraph: the subgraph induced
by the nodes within k undirected hops of both endpoints, optionally topped
up with randomly sampled one-hop neighbors of head and tail when the
enclosing subgraph is small.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kg import FORWARD, KnowledgeGraph
from .seeding import derive_rng
from .tasks import FewShotTask


@dataclass
class ContextGraph:
    """A local graph with designated head/tail nodes.

    Edges are directed as in the source KG: (u, relation, v, direction)
    with u the triplet head's local index.  `node_entities` maps local
    node indices back to global entity ids and is None for synthetic
    graphs that have no backing KG.
    """

    n_nodes: int
    edges: list[tuple[int, int, int, int]]
    head_idx: int
    tail_idx: int
    node_entities: list[int] | None = None

    def __post_init__(self):
        if self.head_idx == self.tail_idx:
            raise ValueError("head and tail must be distinct nodes")
        for b in (self.head_idx, self.tail_idx):
            if not (0 <= b < self.n_nodes):
                raise ValueError(f"terminal index {b} out of range")
        seen = set()
        for u, r, v, d in self.edges:
            if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                raise ValueError(f"edge endpoint out of range in ({u}, {r}, {v}, {d})")
            key = (u, r, v, d)
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
        if self.node_entities is not None and len(self.node_entities) != self.n_nodes:
            raise ValueError("node_entities length must equal n_nodes")
        self._arrays: tuple[np.ndarray, ...] | None = None

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(u, rel, v, direction) as int arrays, cached."""
        if self._arrays is None:
            if self.edges:
                arr = np.asarray(self.edges, dtype=np.int64)
                self._arrays = (arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
            else:
                empty = np.zeros(0, dtype=np.int64)
                self._arrays = (empty, empty.copy(), empty.copy(), empty.copy())
        return self._arrays

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for u, _, v, _ in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "head": self.head_idx,
            "tail": self.tail_idx,
            "edges": [list(e) for e in self.edges],
            "node_entities": self.node_entities,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContextGraph":
        return cls(
            n_nodes=d["n_nodes"],
            edges=[tuple(e) for e in d["edges"]],
            head_idx=d["head"],
            tail_idx=d["tail"],
            node_entities=d["node_entities"],
        )


@dataclass
class ContextConfig:
    k_hops: int = 2
    max_supplement_neighbors: int = 50
    rng_seed: int = 0
    # Cap applies to head and tail separately; set False to share one
    # budget across both endpoints.
    per_endpoint_cap: bool = True

    def __post_init__(self):
        if self.k_hops < 1:
            raise ValueError("k_hops must be >= 1")
        if self.max_supplement_neighbors < 0:
            raise ValueError("max_supplement_neighbors must be >= 0")


def enclosing_subgraph(
    kg: KnowledgeGraph,
    h: int,
    t: int,
    k: int,
    exclude_relation: int | None = None,
) -> ContextGraph:
    """Subgraph induced by nodes within k hops of both h and t.

    The node set is (k-hop(h) intersect k-hop(t)) union {h, t}; the edge set
    is every KG triplet with both endpoints inside it.  Direct h-t triplets
    of `exclude_relation` are dropped so the link being predicted never
    leaks into its own context.
    """
    if h == t:
        raise ValueError("head and tail must be distinct")
    nodes = kg.k_hop_neighborhood(h, k) & kg.k_hop_neighborhood(t, k)
    nodes |= {h, t}
    order = sorted(nodes)
    local = {g: i for i, g in enumerate(order)}

    edges: list[tuple[int, int, int, int]] = []
    seen_triplets: set[int] = set()
    for g in order:
        for idx in kg.incident_triplet_indices(g):
            if idx in seen_triplets:
                continue
            seen_triplets.add(idx)
            th, tr, tt = kg.triplets[idx]
            if th in local and tt in local:
                if exclude_relation is not None and tr == exclude_relation:
                    if {th, tt} == {h, t}:
                        continue
                edges.append((local[th], tr, local[tt], FORWARD))
    edges.sort()
    return ContextGraph(
        n_nodes=len(order),
        edges=edges,
        head_idx=local[h],
        tail_idx=local[t],
        node_entities=order,
    )


def supplement_neighbors(
    ctx: ContextGraph,
    kg: KnowledgeGraph,
    cfg: ContextConfig,
    exclude_relation: int | None = None,
) -> ContextGraph:
    """Add up to the configured number of one-hop edges of head and tail.

    Sampling is without replacement with a generator derived from
    (cfg.rng_seed, the pair's global entity ids), so repeated calls and
    parallel execution see identical randomness.  Existing edges are never
    removed.
    """
    if cfg.max_supplement_neighbors == 0:
        return ctx
    if ctx.node_entities is None:
        raise ValueError("supplementation needs node_entities to address the KG")

    head_g = ctx.node_entities[ctx.head_idx]
    tail_g = ctx.node_entities[ctx.tail_idx]
    rng = derive_rng(cfg.rng_seed, f"supplement:{head_g}:{tail_g}")

    node_entities = list(ctx.node_entities)
    local = {g: i for i, g in enumerate(node_entities)}
    edges = list(ctx.edges)
    present = {(u, r, v) for u, r, v, _ in edges}

    def candidate_triplets(endpoint_g: int) -> list[int]:
        cands = []
        for idx in kg.incident_triplet_indices(endpoint_g):
            th, tr, tt = kg.triplets[idx]
            if exclude_relation is not None and tr == exclude_relation:
                continue
            u = local.get(th)
            v = local.get(tt)
            if u is not None and v is not None and (u, tr, v) in present:
                continue
            cands.append(idx)
        return cands

    remaining_shared = cfg.max_supplement_neighbors
    for endpoint_g in (head_g, tail_g):
        cands = candidate_triplets(endpoint_g)
        cap = cfg.max_supplement_neighbors if cfg.per_endpoint_cap else remaining_shared
        take = min(cap, len(cands))
        if take == 0:
            continue
        chosen = rng.choice(len(cands), size=take, replace=False)
        for ci in sorted(chosen):
            idx = cands[ci]
            th, tr, tt = kg.triplets[idx]
            for g in (th, tt):
                if g not in local:
                    local[g] = len(node_entities)
                    node_entities.append(g)
            key = (local[th], tr, local[tt])
            if key in present:
                continue
            present.add(key)
            edges.append((key[0], key[1], key[2], FORWARD))
            if not cfg.per_endpoint_cap:
                remaining_shared -= 1
    return ContextGraph(
        n_nodes=len(node_entities),
        edges=edges,
        head_idx=ctx.head_idx,
        tail_idx=ctx.tail_idx,
        node_entities=node_entities,
    )


def contextualize_pair(
    kg: KnowledgeGraph,
    h: int,
    t: int,
    cfg: ContextConfig,
    exclude_relation: int | None = None,
) -> ContextGraph:
    """Enclosing subgraph plus supplementation for one (head, tail) pair."""
    ctx = enclosing_subgraph(kg, h, t, cfg.k_hops, exclude_relation)
    if exclude_relation is not None:
        kept = [e for e in ctx.edges if e[1] != exclude_relation]
        if len(kept) != len(ctx.edges):
            ctx = ContextGraph(ctx.n_nodes, kept, ctx.head_idx, ctx.tail_idx, ctx.node_entities)
    return supplement_neighbors(ctx, kg, cfg, exclude_relation)


def contextualize_task(
    kg: KnowledgeGraph,
    task: FewShotTask,
    cfg: ContextConfig,
) -> tuple[list[ContextGraph], list[list[ContextGraph]]]:
    """Context graphs for every support triplet and every query candidate.

    Returns (support_graphs, query_graphs) where query_graphs[j] holds one
    graph per candidate tail of query j, the positive tail first.  Edges of
    the task's own relation are excluded everywhere.
    """
    exclude = kg.relation_id(task.relation) if kg.has_relation(task.relation) else None
    support_graphs = []
    for h_name, t_name in task.support:
        h, t = kg.entity_id(h_name), kg.entity_id(t_name)
        support_graphs.append(contextualize_pair(kg, h, t, cfg, exclude))
    query_graphs: list[list[ContextGraph]] = []
    for q in task.queries:
        h = kg.entity_id(q.head)
        tails = [q.positive_tail, *q.candidates]
        row = []
        for t_name in tails:
            t = kg.entity_id(t_name)
            row.append(contextualize_pair(kg, h, t, cfg, exclude))
        query_graphs.append(row)
    return support_graphs, query_graphs
