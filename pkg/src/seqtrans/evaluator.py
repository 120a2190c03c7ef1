"""Sampled-negative ranking protocol: Hit@n, NDCG@n and category ranking."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from seqtrans.datapipe import SplitDataset

DEFAULT_CUTOFFS = (1, 5, 10, 15, 20)
SPLIT_CODES = {"valid": 1, "test": 2}


class ProtocolError(ValueError):
    pass


@dataclass
class EvalProtocol:
    negatives: int | None = 500  # None ranks against every unvisited item
    cutoffs: tuple[int, ...] = DEFAULT_CUTOFFS
    seed: int = 2020
    tie_rule: str = "pessimistic"
    include_valid: bool = True
    max_len: int | None = None

    def __post_init__(self):
        self.cutoffs = tuple(int(c) for c in self.cutoffs)
        if list(self.cutoffs) != sorted(self.cutoffs) or min(self.cutoffs) < 1:
            raise ValueError("cutoffs must be positive and ascending")
        if self.negatives is not None and self.negatives < 1:
            raise ValueError("need at least one negative")
        if self.tie_rule != "pessimistic":
            raise ValueError(f"unsupported tie rule {self.tie_rule!r}")


@dataclass
class RankingResult:
    rank: int
    hit: dict[int, int] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)


def hit_at_n(rank: int, n: int) -> int:
    if n < 1:
        raise ValueError("cutoff must be >= 1")
    return int(rank < n)


def ndcg_at_n(rank: int, n: int) -> float:
    """Single relevant item: 1/log2(rank + 2) inside the top n, else 0."""
    if n < 1:
        raise ValueError("cutoff must be >= 1")
    return 1.0 / math.log2(rank + 2) if rank < n else 0.0


def mean_metric(fn, ranks, n: int) -> float:
    """Exactly rounded mean, so the result does not depend on summation order."""
    if len(ranks) == 0:
        return 0.0
    return math.fsum(fn(int(r), n) for r in ranks) / len(ranks)


def ranking_result(rank: int, cutoffs: Sequence[int]) -> RankingResult:
    return RankingResult(
        rank=rank,
        hit={n: hit_at_n(rank, n) for n in cutoffs},
        ndcg={n: ndcg_at_n(rank, n) for n in cutoffs},
    )


def rank_ground_truth(scores: np.ndarray, truth_index: int) -> int:
    """0-based rank of ``scores[truth_index]``; ties count against the truth."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= truth_index < scores.shape[0]:
        raise ProtocolError("ground truth is not among the candidates")
    t = scores[truth_index]
    return int(np.count_nonzero(scores >= t) - 1)


def derived_rng(seed: int, user: int, split: str) -> np.random.Generator:
    return np.random.default_rng([seed, user, SPLIT_CODES.get(split, 0)])


def sample_negatives(history: set[int], n_items: int, n: int | None, rng: np.random.Generator,
                     user: int | str = "?") -> np.ndarray:
    """``n`` distinct unvisited item ids from ``1..n_items`` (all of them when ``n`` is None)."""
    visited = np.fromiter(history, dtype=np.int64, count=len(history))
    pool = np.setdiff1d(np.arange(1, n_items + 1), visited, assume_unique=False)
    if n is None:
        return pool
    if pool.size < n:
        raise ProtocolError(
            f"user {user}: only {pool.size} unvisited items, cannot sample {n} negatives"
        )
    if pool.size == n:
        return pool
    return rng.choice(pool, size=n, replace=False)


# Scorer: dense user ids + their histories -> (n_users, n_items) score rows for item ids 1..n_items
Scorer = Callable[[list[int], list[list[int]], list[list[int]]], np.ndarray]


@dataclass
class EvalReport:
    variant: str
    split: str
    protocol: EvalProtocol
    ranks: np.ndarray
    users: list[int]

    def hit(self, n: int) -> float:
        return mean_metric(hit_at_n, self.ranks, n)

    def ndcg(self, n: int) -> float:
        return mean_metric(ndcg_at_n, self.ranks, n)

    def metrics(self) -> dict:
        return {
            "hit": {str(n): self.hit(n) for n in self.protocol.cutoffs},
            "ndcg": {str(n): self.ndcg(n) for n in self.protocol.cutoffs},
        }

    def rank_histogram(self) -> dict[str, int]:
        return {str(k): v for k, v in sorted(Counter(int(r) for r in self.ranks).items())}

    def to_json(self) -> str:
        doc = {
            "variant": self.variant,
            "split": self.split,
            "protocol": asdict(self.protocol),
            "metrics": self.metrics(),
            "per_user_rank_histogram": self.rank_histogram(),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cutoff", "hit", "ndcg"])
        for n in self.protocol.cutoffs:
            w.writerow([n, repr(self.hit(n)), repr(self.ndcg(n))])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'cutoff':>6}  {'Hit':>8}  {'NDCG':>8}"]
        for n in self.protocol.cutoffs:
            lines.append(f"{'@' + str(n):>6}  {self.hit(n):8.4f}  {self.ndcg(n):8.4f}")
        return "\n".join(lines)


def evaluate_scorer(scorer: Scorer, ds: SplitDataset, protocol: EvalProtocol, split: str = "test",
                    variant: str = "?", users: Sequence[int] | None = None,
                    batch_users: int = 256) -> EvalReport:
    """Rank each user's held-out item against sampled unvisited negatives."""
    users = list(range(len(ds.users))) if users is None else list(users)
    n_items = ds.maps.n_items
    ranks = np.empty(len(users), dtype=np.int64)
    for start in range(0, len(users), batch_users):
        chunk = users[start:start + batch_users]
        hist_i, hist_c, truths = [], [], []
        for u in chunk:
            hi, hc, truth = ds.history(u, split, protocol.include_valid)
            if protocol.max_len:
                hi, hc = hi[-protocol.max_len:], hc[-protocol.max_len:]
            hist_i.append(hi)
            hist_c.append(hc)
            truths.append(truth[0])
        scores = np.asarray(scorer(chunk, hist_i, hist_c), dtype=np.float64)
        for row, (u, truth) in enumerate(zip(chunk, truths)):
            negs = sample_negatives(ds.history_set(u), n_items, protocol.negatives,
                                    derived_rng(protocol.seed, u, split), user=u)
            cand = np.concatenate([[truth], negs])
            ranks[start + row] = rank_ground_truth(scores[row, cand - 1], 0)
    return EvalReport(variant, split, protocol, ranks, users)


def model_scorer(params, kind: str = "item", combine_heads: bool = False, eps_source=None) -> Scorer:
    """Batched final-step scores; histories are left-padded and masked."""
    from seqtrans import models

    def score(users, hist_i, hist_c):
        items = models.left_pad(hist_i)
        cats = models.left_pad(hist_c, items.shape[1])
        return models.final_scores(params, items, cats, users, kind=kind,
                                   combine_heads=combine_heads, eps_source=eps_source)

    return score


def evaluate(params, ds: SplitDataset, protocol: EvalProtocol, split: str = "test",
             combine_heads: bool = False, eps_source=None) -> EvalReport:
    if params.dims.n_items != ds.maps.n_items:
        raise ProtocolError("checkpoint item vocabulary does not match the dataset")
    return evaluate_scorer(model_scorer(params, "item", combine_heads, eps_source), ds, protocol,
                           split, variant=params.variant)


@dataclass
class CategoryReport:
    variant: str
    split: str
    ranks: np.ndarray
    cutoffs: tuple[int, ...] = (5, 10, 20)

    def hit(self, n: int) -> float:
        return mean_metric(hit_at_n, self.ranks, n)

    def ndcg(self, n: int) -> float:
        return mean_metric(ndcg_at_n, self.ranks, n)

    def metrics(self) -> dict:
        return {
            "hit": {str(n): self.hit(n) for n in self.cutoffs},
            "ndcg": {str(n): self.ndcg(n) for n in self.cutoffs},
        }


def category_ranks(cat_scorer: Scorer, ds: SplitDataset, split: str = "test",
                   include_valid: bool = True, max_len: int | None = None,
                   batch_users: int = 256) -> np.ndarray:
    """Rank of the true next category among all categories, per user."""
    n_users = len(ds.users)
    ranks = np.empty(n_users, dtype=np.int64)
    for start in range(0, n_users, batch_users):
        chunk = list(range(start, min(n_users, start + batch_users)))
        hist_i, hist_c, truths = [], [], []
        for u in chunk:
            hi, hc, truth = ds.history(u, split, include_valid)
            if max_len:
                hi, hc = hi[-max_len:], hc[-max_len:]
            hist_i.append(hi)
            hist_c.append(hc)
            truths.append(truth[1])
        scores = np.asarray(cat_scorer(chunk, hist_i, hist_c), dtype=np.float64)
        for row, truth in enumerate(truths):
            ranks[start + row] = rank_ground_truth(scores[row], truth - 1)
    return ranks


def category_accuracy(params, ds: SplitDataset, split: str = "test",
                      cutoffs: tuple[int, ...] = (5, 10, 20), max_len: int | None = None,
                      include_valid: bool = True) -> CategoryReport:
    """Category ranking over the full category set for variants with a category head."""
    from seqtrans.models import RANKING_HEADS

    if RANKING_HEADS[params.variant][1] is None:
        raise ValueError(f"variant {params.variant} has no category head")
    ranks = category_ranks(model_scorer(params, "cat"), ds, split, include_valid, max_len)
    return CategoryReport(params.variant, split, ranks, tuple(cutoffs))

