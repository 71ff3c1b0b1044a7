"""Synthetic tasks with planted connection subgraphs and IOU scoring.

Each task plants one hypothesis pattern: a 4-clique over {head, z1, z2,
tail} with the head-tail edge missing (5 edges, relations drawn from a
fixed vocabulary, orientations fixed per task).  Every support and
positive query graph embeds the pattern plus random noise, then gets
pruned until all nodes sit within 2 hops of both head and tail.  Negative
query graphs are built the same way but with one planted edge relabeled,
and are verified to not contain the pattern anywhere.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .context import ContextGraph
from .kg import FORWARD

PATTERN_HEAD, PATTERN_TAIL, PATTERN_Z1, PATTERN_Z2 = 0, 1, 2, 3
# 4-clique on {head, tail, z1, z2} minus the head-tail link.
PATTERN_PAIRS = [
    (PATTERN_HEAD, PATTERN_Z1),
    (PATTERN_HEAD, PATTERN_Z2),
    (PATTERN_TAIL, PATTERN_Z1),
    (PATTERN_TAIL, PATTERN_Z2),
    (PATTERN_Z1, PATTERN_Z2),
]


@dataclass
class SynthConfig:
    n_relations: int = 50
    n_graphs: int = 100
    n_support: int = 3
    n_pos_queries: int = 1
    n_neg_queries: int = 1
    noise_nodes: tuple[int, int] = (4, 10)
    noise_edges: tuple[int, int] = (8, 20)
    prune_hops: int = 2
    rng_seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        if self.n_relations < len(PATTERN_PAIRS):
            raise ValueError("n_relations must be at least the pattern edge count")
        if self.n_graphs < self.n_support + self.n_pos_queries:
            raise ValueError("n_graphs must cover support plus positive queries")


@dataclass
class SyntheticTask:
    hypothesis: list[tuple[int, int, int]]  # (role_u, relation, role_v), directed
    support_graphs: list[ContextGraph]
    support_masks: list[np.ndarray]
    pos_query_graphs: list[ContextGraph]
    pos_query_masks: list[np.ndarray]
    neg_query_graphs: list[ContextGraph]

    def to_dict(self) -> dict:
        return {
            "hypothesis": [list(e) for e in self.hypothesis],
            "support": [
                {"graph": g.to_dict(), "mask": m.astype(int).tolist()}
                for g, m in zip(self.support_graphs, self.support_masks)
            ],
            "pos_queries": [
                {"graph": g.to_dict(), "mask": m.astype(int).tolist()}
                for g, m in zip(self.pos_query_graphs, self.pos_query_masks)
            ],
            "neg_queries": [{"graph": g.to_dict()} for g in self.neg_query_graphs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        return cls(
            hypothesis=[tuple(e) for e in d["hypothesis"]],
            support_graphs=[ContextGraph.from_dict(s["graph"]) for s in d["support"]],
            support_masks=[np.asarray(s["mask"], dtype=np.float64) for s in d["support"]],
            pos_query_graphs=[ContextGraph.from_dict(s["graph"]) for s in d["pos_queries"]],
            pos_query_masks=[np.asarray(s["mask"], dtype=np.float64) for s in d["pos_queries"]],
            neg_query_graphs=[ContextGraph.from_dict(s["graph"]) for s in d["neg_queries"]],
        )


def _sample_pattern(cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    relations = rng.choice(cfg.n_relations, size=len(PATTERN_PAIRS), replace=True)
    pattern = []
    for (a, b), rel in zip(PATTERN_PAIRS, relations):
        if rng.integers(2) == 1:
            a, b = b, a
        pattern.append((int(a), int(rel), int(b)))
    return pattern


def contains_pattern(graph: ContextGraph, pattern: list[tuple[int, int, int]]) -> bool:
    """Exhaustive check whether the pattern embeds with head/tail matched.

    Tries every ordered assignment of distinct non-terminal nodes to
    (z1, z2); head and tail map to the graph's terminals.
    """
    edge_set = {(u, r, v) for u, r, v, _ in graph.edges}
    others = [i for i in range(graph.n_nodes) if i not in (graph.head_idx, graph.tail_idx)]
    for z1 in others:
        for z2 in others:
            if z1 == z2:
                continue
            assign = {
                PATTERN_HEAD: graph.head_idx,
                PATTERN_TAIL: graph.tail_idx,
                PATTERN_Z1: z1,
                PATTERN_Z2: z2,
            }
            if all((assign[a], r, assign[b]) in edge_set for a, r, b in pattern):
                return True
    return False


def _prune_far_nodes(
    edges: list[tuple[int, int, int]],
    n_nodes: int,
    head: int,
    tail: int,
    hop_bound: int,
) -> tuple[list[tuple[int, int, int]], np.ndarray]:
    """Remove nodes farther than hop_bound (undirected) from head or tail.

    Repeats until stable since removals can disconnect other nodes.
    Returns the surviving edges plus the kept-node mask.
    """
    alive = np.ones(n_nodes, dtype=bool)
    while True:
        adj: list[list[int]] = [[] for _ in range(n_nodes)]
        for u, _, v in edges:
            if alive[u] and alive[v]:
                adj[u].append(v)
                adj[v].append(u)

        def distances(src: int) -> np.ndarray:
            dist = np.full(n_nodes, np.inf)
            dist[src] = 0
            queue = deque([src])
            while queue:
                x = queue.popleft()
                for y in adj[x]:
                    if dist[y] == np.inf:
                        dist[y] = dist[x] + 1
                        queue.append(y)
            return dist

        dh, dt = distances(head), distances(tail)
        drop = alive & ((dh > hop_bound) | (dt > hop_bound))
        drop[head] = drop[tail] = False
        if not drop.any():
            return [e for e in edges if alive[e[0]] and alive[e[2]]], alive
        alive &= ~drop


def _build_positive_graph(
    pattern: list[tuple[int, int, int]], cfg: SynthConfig, rng: np.random.Generator
) -> tuple[ContextGraph, np.ndarray]:
    """One graph embedding the pattern plus noise, pruned, with its mask."""
    # roles: node 0 = head, 1 = tail, 2 = z1, 3 = z2
    n_noise = int(rng.integers(cfg.noise_nodes[0], cfg.noise_nodes[1] + 1))
    n_nodes = 4 + n_noise
    edges: list[tuple[int, int, int]] = [(u, r, v) for u, r, v in pattern]
    edge_keys = set(edges)
    n_extra = int(rng.integers(cfg.noise_edges[0], cfg.noise_edges[1] + 1))
    for _ in range(n_extra):
        for _attempt in range(20):
            u = int(rng.integers(n_nodes))
            v = int(rng.integers(n_nodes))
            if u == v:
                continue
            r = int(rng.integers(cfg.n_relations))
            if (u, r, v) in edge_keys:
                continue
            edges.append((u, r, v))
            edge_keys.add((u, r, v))
            break

    kept_edges, alive = _prune_far_nodes(edges, n_nodes, 0, 1, cfg.prune_hops)
    remap = np.cumsum(alive) - 1
    final_edges = [(int(remap[u]), r, int(remap[v]), FORWARD) for u, r, v in kept_edges]
    planted = set(pattern)
    mask = np.array([1.0 if (e[0], e[1], e[2]) in planted else 0.0 for e in kept_edges])
    # planted roles occupy local 0..3 and are never pruned (z's are one hop
    # from both terminals), so pattern edges keep their original key
    graph = ContextGraph(
        n_nodes=int(alive.sum()),
        edges=final_edges,
        head_idx=int(remap[0]),
        tail_idx=int(remap[1]),
        node_entities=None,
    )
    return graph, mask


def _build_negative_graph(
    pattern: list[tuple[int, int, int]], cfg: SynthConfig, rng: np.random.Generator
) -> ContextGraph:
    """A pattern-free graph: relabel one planted edge, verify absence."""
    for _ in range(cfg.max_retries):
        broken = list(pattern)
        idx = int(rng.integers(len(broken)))
        a, r, b = broken[idx]
        choices = [c for c in range(cfg.n_relations) if c != r]
        broken[idx] = (a, int(rng.choice(choices)), b)
        graph, _ = _build_positive_graph(broken, cfg, rng)
        if not contains_pattern(graph, pattern):
            return graph
    raise RuntimeError("could not build a pattern-free negative graph within retry budget")


def generate_task(cfg: SynthConfig, rng: np.random.Generator) -> SyntheticTask:
    """Sample one few-shot task with ground-truth masks."""
    for _ in range(cfg.max_retries):
        pattern = _sample_pattern(cfg, rng)
        pool = [_build_positive_graph(pattern, cfg, rng) for _ in range(cfg.n_graphs)]
        if any(not contains_pattern(g, pattern) for g, _ in pool):
            continue
        picks = rng.choice(len(pool), size=cfg.n_support + cfg.n_pos_queries, replace=False)
        support = [pool[i] for i in picks[: cfg.n_support]]
        pos = [pool[i] for i in picks[cfg.n_support :]]
        negs = [_build_negative_graph(pattern, cfg, rng) for _ in range(cfg.n_neg_queries)]
        return SyntheticTask(
            hypothesis=pattern,
            support_graphs=[g for g, _ in support],
            support_masks=[m for _, m in support],
            pos_query_graphs=[g for g, _ in pos],
            pos_query_masks=[m for _, m in pos],
            neg_query_graphs=negs,
        )
    raise RuntimeError("task generation failed within retry budget")


def generate_corpus(cfg: SynthConfig, n_tasks: int) -> list[SyntheticTask]:
    """n_tasks independent tasks with per-task derived randomness."""
    from .seeding import derive_rng

    return [generate_task(cfg, derive_rng(cfg.rng_seed, f"task:{i}")) for i in range(n_tasks)]


def iou(pred, truth, threshold: float = 0.5) -> float:
    """Intersection over union of binarized masks; 1.0 when both empty."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"mask length mismatch: {pred.shape} vs {truth.shape}")
    p = pred >= threshold
    t = truth >= threshold
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def supervised_mask_loss(pred, truth) -> "Tensor | float":
    """Mean binary cross-entropy of a predicted mask against ground truth."""
    plain = not isinstance(pred, Tensor)
    pred_t = ad.as_tensor(pred)
    truth_arr = np.asarray(truth, dtype=np.float64)
    if pred_t.shape != truth_arr.shape:
        raise ValueError(f"mask length mismatch: {pred_t.shape} vs {truth_arr.shape}")
    eps = 1e-9
    p = ad.clip(pred_t, eps, 1.0 - eps)
    t = Tensor(truth_arr)
    one = Tensor(np.ones_like(truth_arr))
    loss = ad.tmean(-(t * ad.log(p) + (one - t) * ad.log(one - p)))
    return loss.item() if plain else loss


def save_corpus(tasks: list[SyntheticTask], cfg: SynthConfig, out_dir: str) -> list[str]:
    """One JSON file per task plus a corpus-level metadata file."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, task in enumerate(tasks):
        path = os.path.join(out_dir, f"task_{i:04d}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(task.to_dict(), fh, sort_keys=True)
        paths.append(path)
    meta = {
        "n_tasks": len(tasks),
        "n_relations": cfg.n_relations,
        "config": {
            "n_relations": cfg.n_relations,
            "n_graphs": cfg.n_graphs,
            "n_support": cfg.n_support,
            "n_pos_queries": cfg.n_pos_queries,
            "n_neg_queries": cfg.n_neg_queries,
            "noise_nodes": list(cfg.noise_nodes),
            "noise_edges": list(cfg.noise_edges),
            "prune_hops": cfg.prune_hops,
            "rng_seed": cfg.rng_seed,
        },
    }
    with open(os.path.join(out_dir, "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
    return paths


def load_corpus(corpus_dir: str) -> tuple[list[SyntheticTask], dict]:
    import os

    with open(os.path.join(corpus_dir, "corpus.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    tasks = []
    for i in range(meta["n_tasks"]):
        with open(os.path.join(corpus_dir, f"task_{i:04d}.json"), "r", encoding="utf-8") as fh:
            tasks.append(SyntheticTask.from_dict(json.load(fh)))
    return tasks, meta
