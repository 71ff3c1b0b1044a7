"""Few-shot task containers and the task-file format.

A task file is tab-separated text, one task per file:

    relation<TAB>name
    support<TAB>head<TAB>tail            (K lines)
    query<TAB>head<TAB>positive_tail[<TAB>candidate ...]

Candidate tails are optional; when absent the evaluation harness samples
negatives itself.  "#"-prefixed and blank lines are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class Query:
    head: str
    positive_tail: str
    candidates: list[str] = field(default_factory=list)


@dataclass
class FewShotTask:
    relation: str
    support: list[tuple[str, str]]
    queries: list[Query]

    def __post_init__(self):
        for q in self.queries:
            if q.positive_tail in q.candidates:
                raise ValueError(
                    f"candidates for query ({q.head}, {q.positive_tail}) include the positive tail"
                )
        support_set = {(h, t) for h, t in self.support}
        for q in self.queries:
            if (q.head, q.positive_tail) in support_set:
                raise ValueError(
                    f"query ({q.head}, {q.positive_tail}) duplicates a support triplet"
                )

    @property
    def n_shots(self) -> int:
        return len(self.support)

    def entity_names(self) -> list[str]:
        """All entity names mentioned anywhere in the task, deduplicated."""
        seen: dict[str, None] = {}
        for h, t in self.support:
            seen.setdefault(h)
            seen.setdefault(t)
        for q in self.queries:
            seen.setdefault(q.head)
            seen.setdefault(q.positive_tail)
            for c in q.candidates:
                seen.setdefault(c)
        return list(seen)

    def support_triplet_names(self) -> list[tuple[str, str, str]]:
        return [(h, self.relation, t) for h, t in self.support]


def load_task_file(path: str) -> FewShotTask:
    relation: str | None = None
    support: list[tuple[str, str]] = []
    queries: list[Query] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            kind = fields[0]
            if kind == "relation" and len(fields) == 2:
                relation = fields[1]
            elif kind == "support" and len(fields) == 3:
                support.append((fields[1], fields[2]))
            elif kind == "query" and len(fields) >= 3:
                queries.append(Query(fields[1], fields[2], list(fields[3:])))
            else:
                raise ValueError(f"{path}:{line_no}: malformed task line {line!r}")
    if relation is None:
        raise ValueError(f"{path}: missing relation line")
    if not support:
        raise ValueError(f"{path}: task has no support triplets")
    return FewShotTask(relation, support, queries)


def save_task_file(task: FewShotTask, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"relation\t{task.relation}\n")
        for h, t in task.support:
            fh.write(f"support\t{h}\t{t}\n")
        for q in task.queries:
            fields = ["query", q.head, q.positive_tail, *q.candidates]
            fh.write("\t".join(fields) + "\n")
