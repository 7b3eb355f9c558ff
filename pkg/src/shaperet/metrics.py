"""Retrieval evaluation: top-k accuracy and mAP@k at instance and class level.

Instance level treats only the query's exact shape as relevant (R = 1, so
AP@k reduces to 1/rank); class level counts every same-class entry in the
index as relevant and normalizes AP by min(R, k).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .index import ShapeIndex, query


@dataclass(frozen=True)
class MetricBlock:
    acc_top1: float
    acc_top10: float
    map_at_10: float

    def as_dict(self) -> dict[str, float]:
        return {"acc_top1": self.acc_top1, "acc_top10": self.acc_top10,
                "map_at_10": self.map_at_10}


@dataclass
class EvalReport:
    """Aggregated metrics plus per-query rank records for recomputation."""

    instance: MetricBlock
    class_level: MetricBlock | None
    n_queries: int
    per_query: list[dict]

    def summary_lines(self) -> list[str]:
        def fmt(value: float | None) -> str:
            return "-" if value is None else f"{100.0 * value:.1f}"

        cl = self.class_level
        rows = [
            ("Acc_Top1", self.instance.acc_top1, cl.acc_top1 if cl else None),
            ("Acc_Top10", self.instance.acc_top10, cl.acc_top10 if cl else None),
            ("mAP@10", self.instance.map_at_10, cl.map_at_10 if cl else None),
        ]
        lines = [f"queries: {self.n_queries}  (notation: instance/class)"]
        lines += [f"{name:<10} {fmt(inst)}/{fmt(c)}" for name, inst, c in rows]
        return lines

    def to_jsonl(self) -> str:
        records = [{"type": "summary", "n_queries": self.n_queries,
                    "instance": self.instance.as_dict(),
                    "class": self.class_level.as_dict() if self.class_level else None}]
        records += [{"type": "query", **rec} for rec in self.per_query]
        return "\n".join(json.dumps(rec) for rec in records) + "\n"


def acc_top_k(ranked_ids: Sequence[Sequence[str]], target_ids: Sequence[str],
              k: int) -> float:
    """Fraction of queries whose top-k ranking contains the target id."""
    _check_queries(ranked_ids, target_ids)
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    hits = sum(1 for ranked, tgt in zip(ranked_ids, target_ids) if tgt in list(ranked)[:k])
    return hits / len(target_ids)


def map_at_k(ranked_ids: Sequence[Sequence[str]], target_ids: Sequence[str],
             k: int = 10, relevant_counts: Sequence[int] | None = None) -> float:
    """Mean AP@k; AP normalizes by min(R, k) with R relevant items in the database.

    With the default R = 1 per query this is 1/rank when the target appears
    within the cut-off and 0 otherwise.
    """
    _check_queries(ranked_ids, target_ids)
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if relevant_counts is None:
        relevant_counts = [1] * len(target_ids)
    per_query = []
    for ranked, tgt, n_rel in zip(ranked_ids, target_ids, relevant_counts):
        if n_rel < 1:
            raise ParameterError("every query needs at least one relevant item")
        found = 0
        ap = 0.0
        for rank, rid in enumerate(list(ranked)[:k], start=1):
            if rid == tgt:
                found += 1
                ap += found / rank
        per_query.append(ap / min(n_rel, k))
    # fsum keeps the mean invariant under query permutation
    return math.fsum(per_query) / len(target_ids)


def _check_queries(ranked_ids: Sequence[Sequence[str]], target_ids: Sequence[str]) -> None:
    if len(target_ids) == 0:
        raise ParameterError("query set must be non-empty")
    if len(ranked_ids) != len(target_ids):
        raise ParameterError("ranked lists and targets must have equal length")


def evaluate(index: ShapeIndex,
             queries: Sequence[tuple[np.ndarray, str, str]],
             k: int = 10) -> EvalReport:
    """Run every query against the index and aggregate both metric levels.

    ``queries`` holds (embedding, target shape_id, target class_id) triples;
    targets missing from the index are rejected up front. The class-level
    block is omitted when the whole database is a single class.
    """
    if len(queries) == 0:
        raise ParameterError("query set must be non-empty")
    known = set(index.shape_ids)
    for _, target_shape, _ in queries:
        if target_shape not in known:
            raise ParameterError(f"query target {target_shape!r} is not in the index")

    class_counts = Counter(index.class_ids)
    single_class = len(class_counts) == 1

    ranked_shapes: list[list[str]] = []
    ranked_classes: list[list[str]] = []
    per_query: list[dict] = []
    for qi, (emb, target_shape, target_class) in enumerate(queries):
        res = query(index, emb, k)
        ranked_shapes.append(res.shape_ids)
        ranked_classes.append(res.class_ids)
        rank = res.shape_ids.index(target_shape) + 1 if target_shape in res.shape_ids else None
        per_query.append({
            "query_index": qi,
            "target_shape_id": target_shape,
            "target_class_id": target_class,
            "instance_rank": rank,
            "ranked": [
                {"shape_id": s, "class_id": c, "similarity": float(sim)}
                for s, c, sim in zip(res.shape_ids, res.class_ids, res.similarities)
            ],
        })

    shape_targets = [t for _, t, _ in queries]
    instance = MetricBlock(
        acc_top1=acc_top_k(ranked_shapes, shape_targets, 1),
        acc_top10=acc_top_k(ranked_shapes, shape_targets, min(10, k)),
        map_at_10=map_at_k(ranked_shapes, shape_targets, min(10, k)),
    )
    if not (instance.acc_top1 <= instance.map_at_10 + 1e-12
            and instance.map_at_10 <= instance.acc_top10 + 1e-12):
        raise AssertionError("instance metric ordering violated")

    class_level = None
    if not single_class:
        class_targets = [c for _, _, c in queries]
        rel_counts = [class_counts[c] for c in class_targets]
        class_level = MetricBlock(
            acc_top1=acc_top_k(ranked_classes, class_targets, 1),
            acc_top10=acc_top_k(ranked_classes, class_targets, min(10, k)),
            map_at_10=map_at_k(ranked_classes, class_targets, min(10, k),
                               relevant_counts=rel_counts),
        )
    return EvalReport(instance=instance, class_level=class_level,
                      n_queries=len(queries), per_query=per_query)
