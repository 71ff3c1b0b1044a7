"""Ranking metrics, negative sampling and the few-shot evaluation loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .context import ContextConfig, ContextGraph, contextualize_task
from .kg import KnowledgeGraph
from .seeding import derive_rng
from .tasks import FewShotTask

Scorer = Callable[[list[ContextGraph], ContextGraph], float]


@dataclass
class EvalConfig:
    context: ContextConfig = field(default_factory=ContextConfig)
    n_negatives: int = 50
    rng_seed: int = 0


@dataclass
class TaskMetrics:
    relation: str
    mrr: float
    hits1: float
    hits5: float
    hits10: float
    n_queries: int


@dataclass
class MetricsReport:
    mrr: float
    hits1: float
    hits5: float
    hits10: float
    n_queries: int
    n_skipped_tasks: int
    per_task: list[TaskMetrics]

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits1": self.hits1,
            "hits5": self.hits5,
            "hits10": self.hits10,
            "n_queries": self.n_queries,
            "n_skipped_tasks": self.n_skipped_tasks,
            "per_task": [
                {
                    "relation": t.relation,
                    "mrr": t.mrr,
                    "hits1": t.hits1,
                    "hits5": t.hits5,
                    "hits10": t.hits10,
                    "n_queries": t.n_queries,
                }
                for t in self.per_task
            ],
        }

    def to_text(self) -> str:
        lines = [
            f"{'relation':<40} {'queries':>7} {'MRR':>7} {'H@1':>6} {'H@5':>6} {'H@10':>6}",
        ]
        for t in self.per_task:
            lines.append(
                f"{t.relation:<40} {t.n_queries:>7d} {t.mrr:>7.4f}"
                f" {t.hits1:>6.4f} {t.hits5:>6.4f} {t.hits10:>6.4f}"
            )
        lines.append(
            f"{'ALL':<40} {self.n_queries:>7d} {self.mrr:>7.4f}"
            f" {self.hits1:>6.4f} {self.hits5:>6.4f} {self.hits10:>6.4f}"
        )
        if self.n_skipped_tasks:
            lines.append(f"skipped tasks: {self.n_skipped_tasks}")
        return "\n".join(lines) + "\n"


def sample_negatives(
    kg: KnowledgeGraph,
    head: int,
    relation: int | None,
    positive_tail: int,
    n: int,
    rng: np.random.Generator,
) -> list[int]:
    """n distinct negative tail candidates for (head, relation, ?).

    Excludes the positive tail and every entity t' with (head, relation,
    t') already true in the graph.
    """
    if kg.n_entities <= n:
        raise ValueError(f"need more than {n} entities to sample {n} negatives")
    known_true = set()
    if relation is not None:
        known_true = {t for r, t, _ in kg.out_index[head] if r == relation}
    excluded = known_true | {positive_tail}
    eligible = np.array([e for e in range(kg.n_entities) if e not in excluded], dtype=np.int64)
    if len(eligible) < n:
        raise ValueError(f"only {len(eligible)} eligible negatives, need {n}")
    picks = rng.choice(len(eligible), size=n, replace=False)
    return [int(eligible[i]) for i in picks]


def rank_metrics(scores, positive_index: int = 0) -> tuple[float, tuple[int, int, int]]:
    """(reciprocal rank, hits at 1/5/10) with mean-rank tie breaking.

    The positive's rank is 1 + the count of strictly greater scores plus
    half of its ties (the average over all orderings of the tie block).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        raise ValueError("need at least 2 scores to rank")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos = scores[positive_index]
    greater = int(np.sum(scores > pos))
    ties = int(np.sum(scores == pos))  # includes the positive itself
    rank = greater + (ties + 1) / 2.0
    rr = 1.0 / rank
    hits = tuple(int(rank <= h) for h in (1, 5, 10))
    return rr, hits


def evaluate(
    scorer: Scorer | None,
    tasks: list[FewShotTask],
    kg: KnowledgeGraph,
    cfg: EvalConfig,
) -> MetricsReport:
    """Micro-averaged MRR/Hits of `scorer` over all task queries.

    Tasks whose entities cannot be contextualized are skipped and counted.
    Queries without explicit candidates get `cfg.n_negatives` sampled
    negatives.  `scorer=None` is a pipeline stub that scores the positive
    1.0 and every candidate 0.0.
    """
    rrs: list[float] = []
    hit_rows: list[tuple[int, int, int]] = []
    per_task: list[TaskMetrics] = []
    skipped = 0
    for task_idx, task in enumerate(tasks):
        rng = derive_rng(cfg.rng_seed, f"negatives:{task_idx}")
        try:
            prepared = _prepare_task(task, kg, cfg, rng)
            support_graphs, rows = contextualize_task(kg, prepared, cfg.context)
        except (KeyError, ValueError) as err:
            skipped += 1
            per_task.append(TaskMetrics(task.relation, 0.0, 0.0, 0.0, 0.0, 0))
            per_task[-1].relation = f"{task.relation} [skipped: {err}]"
            continue
        task_rrs: list[float] = []
        task_hits: list[tuple[int, int, int]] = []
        for row in rows:
            if scorer is None:
                scores = [1.0] + [0.0] * (len(row) - 1)
            else:
                scores = [scorer(support_graphs, g) for g in row]
            rr, hits = rank_metrics(scores, positive_index=0)
            task_rrs.append(rr)
            task_hits.append(hits)
        rrs.extend(task_rrs)
        hit_rows.extend(task_hits)
        if task_rrs:
            h = np.mean(np.asarray(task_hits, dtype=np.float64), axis=0)
            per_task.append(
                TaskMetrics(
                    task.relation,
                    float(np.mean(task_rrs)),
                    float(h[0]),
                    float(h[1]),
                    float(h[2]),
                    len(task_rrs),
                )
            )
        else:
            per_task.append(TaskMetrics(task.relation, 0.0, 0.0, 0.0, 0.0, 0))
    if rrs:
        all_hits = np.mean(np.asarray(hit_rows, dtype=np.float64), axis=0)
        mrr = float(np.mean(rrs))
        hits1, hits5, hits10 = (float(x) for x in all_hits)
    else:
        mrr = hits1 = hits5 = hits10 = 0.0
    return MetricsReport(mrr, hits1, hits5, hits10, len(rrs), skipped, per_task)


def _prepare_task(
    task: FewShotTask, kg: KnowledgeGraph, cfg: EvalConfig, rng: np.random.Generator
) -> FewShotTask:
    """Fill in sampled candidates for queries that lack explicit ones."""
    from .tasks import Query

    relation = kg.relation_id(task.relation) if kg.has_relation(task.relation) else None
    queries = []
    for q in task.queries:
        if q.candidates:
            queries.append(q)
            continue
        head = kg.entity_id(q.head)
        pos = kg.entity_id(q.positive_tail)
        negatives = sample_negatives(kg, head, relation, pos, cfg.n_negatives, rng)
        queries.append(Query(q.head, q.positive_tail, [kg.entity_names[e] for e in negatives]))
    return FewShotTask(task.relation, list(task.support), queries)


def build_inductive_split(
    kg: KnowledgeGraph, test_tasks: list[FewShotTask]
) -> tuple[KnowledgeGraph, list[tuple[str, str, str]]]:
    """Partition the KG for inductive evaluation.

    Collects every entity mentioned in the test tasks plus their one-hop
    neighbors; all triplets incident to that set become the held-out
    triplet list and the remainder forms the training-time background KG.
    """
    collected: set[int] = set()
    for task in test_tasks:
        for name in task.entity_names():
            if kg.has_entity(name):
                collected.add(kg.entity_id(name))
    for e in list(collected):
        for _, other, _ in kg.neighbors(e):
            collected.add(other)
    test_triplets: list[tuple[str, str, str]] = []
    bg_triplets: list[tuple[int, int, int]] = []
    for h, r, t in kg.triplets:
        if h in collected or t in collected:
            test_triplets.append((kg.entity_names[h], kg.relation_names[r], kg.entity_names[t]))
        else:
            bg_triplets.append((h, r, t))
    if not bg_triplets:
        raise ValueError("inductive split would leave an empty background KG")
    keep_entities = sorted({h for h, _, _ in bg_triplets} | {t for _, _, t in bg_triplets})
    remap = {old: new for new, old in enumerate(keep_entities)}
    bg = KnowledgeGraph(
        [kg.entity_names[e] for e in keep_entities],
        list(kg.relation_names),
        [(remap[h], r, remap[t]) for h, r, t in bg_triplets],
    )
    return bg, test_triplets


def random_scorer(rng: np.random.Generator) -> Scorer:
    """Baseline scorer: i.i.d. uniform scores, independent of the graphs."""

    def score(support_graphs: list[ContextGraph], query_graph: ContextGraph) -> float:
        return float(rng.random())

    return score
