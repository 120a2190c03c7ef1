"""Synthetic Markov category walks with exact Bayes-optimal reference scores."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from seqtrans.datapipe import InteractionEvent, SplitDataset
from seqtrans.evaluator import EvalProtocol, derived_rng, sample_negatives


@dataclass
class SynthSpec:
    K: int = 8
    M: int = 25
    T: int = 30
    U: int = 2000
    P: np.ndarray | None = None  # None means the deterministic cycle k -> k + 1
    seed: int = 7

    def __post_init__(self):
        if self.K < 1 or self.M < 1 or self.T < 1 or self.U < 1:
            raise ValueError("K, M, T, U must be positive")
        if self.P is None:
            self.P = cycle_matrix(self.K)
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.shape != (self.K, self.K):
            raise ValueError(f"transition matrix must be {self.K}x{self.K}, got {self.P.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("transition matrix rows must be nonnegative and sum to 1")

    @property
    def n_items(self) -> int:
        return self.K * self.M

    def category_of(self, item: int) -> int:
        """0-based category of 0-based item."""
        return item // self.M

    def to_text(self) -> str:
        lines = [f"K = {self.K}", f"M = {self.M}", f"T = {self.T}", f"U = {self.U}", f"seed = {self.seed}"]
        for k, row in enumerate(self.P):
            lines.append(f"P{k} = " + " ".join(repr(float(x)) for x in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SynthSpec":
        kv: dict[str, str] = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        K = int(kv["K"])
        P = np.array([[float(x) for x in kv[f"P{k}"].split()] for k in range(K)])
        return cls(K=K, M=int(kv["M"]), T=int(kv["T"]), U=int(kv["U"]), P=P, seed=int(kv["seed"]))


def cycle_matrix(K: int) -> np.ndarray:
    return np.roll(np.eye(K), 1, axis=1)


def random_matrix(K: int, seed: int, concentration: float = 0.5) -> np.ndarray:
    """Dirichlet rows: a stochastic, non-deterministic transition matrix."""
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.full(K, concentration), size=K)


def read_matrix(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2)


def user_names(spec: SynthSpec) -> list[str]:
    width = len(str(spec.U - 1))
    return [f"u{u:0{width}d}" for u in range(spec.U)]


def generate(spec: SynthSpec) -> list[InteractionEvent]:
    """One walk per user with its own seed derived from ``spec.seed``."""
    names = user_names(spec)
    width_i = len(str(spec.n_items - 1))
    width_c = len(str(spec.K - 1))
    cum = np.cumsum(spec.P, axis=1)
    events = []
    for u in range(spec.U):
        rng = np.random.default_rng([spec.seed, u])
        c = int(rng.integers(spec.K))
        for t in range(spec.T):
            if t:
                c = int(min(np.searchsorted(cum[c], rng.random(), side="right"), spec.K - 1))
            item = c * spec.M + int(rng.integers(spec.M))
            events.append(InteractionEvent(names[u], f"i{item:0{width_i}d}", f"c{c:0{width_c}d}", t))
    return events


def transition_counts(events: list[InteractionEvent], K: int) -> np.ndarray:
    counts = np.zeros((K, K))
    prev_user, prev_cat = None, None
    for e in events:
        c = int(e.category[1:])
        if e.user == prev_user:
            counts[prev_cat, c] += 1
        prev_user, prev_cat = e.user, c
    return counts


@dataclass
class OracleReport:
    category_accuracy: float
    hit: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    category_hit: dict[int, float] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"bayes_category_accuracy = {self.category_accuracy!r}"]
        out += [f"bayes_hit@{n} = {v!r}" for n, v in self.hit.items()]
        out += [f"bayes_ndcg@{n} = {v!r}" for n, v in self.ndcg.items()]
        out += [f"bayes_category_hit@{n} = {v!r}" for n, v in self.category_hit.items()]
        return out


def expected_tie_metrics(greater: int, ties: int, n: int) -> tuple[float, float]:
    """Expected (hit@n, ndcg@n) when the truth is placed uniformly among ``ties`` equals."""
    hit = ndcg = 0.0
    for j in range(ties + 1):
        r = greater + j
        if r < n:
            hit += 1.0
            ndcg += 1.0 / math.log2(r + 2)
    return hit / (ties + 1), ndcg / (ties + 1)


def _spec_ids(spec: SynthSpec, ds: SplitDataset):
    """Dense item id -> 0-based synthetic category, dense cat id -> 0-based synthetic category."""
    item_cat = np.array([spec.category_of(int(name[1:])) for name in ds.maps.items])
    cat_of_dense = np.array([int(name[1:]) for name in ds.maps.categories])
    return item_cat, cat_of_dense


def bayes_oracle(spec: SynthSpec, ds: SplitDataset, protocol: EvalProtocol, split: str = "test",
                 cat_cutoffs: tuple[int, ...] = (1, 5, 10, 20)) -> OracleReport:
    """Exact expected metrics of ranking by true next-step probabilities.

    Uses the same candidate sets as the evaluator; ties in true probability
    are broken uniformly at random, and the expectation is taken exactly.
    """
    item_cat, cat_of_dense = _spec_ids(spec, ds)
    n_users = len(ds.users)
    hit: dict[int, list[float]] = {n: [] for n in protocol.cutoffs}
    ndcg: dict[int, list[float]] = {n: [] for n in protocol.cutoffs}
    cat_hit: dict[int, list[float]] = {n: [] for n in cat_cutoffs}
    acc: list[float] = []
    for u in range(n_users):
        hi, hc, (truth_item, truth_cat) = ds.history(u, split, protocol.include_valid)
        row = spec.P[cat_of_dense[hc[-1] - 1]]
        negs = sample_negatives(ds.history_set(u), ds.maps.n_items, protocol.negatives,
                                derived_rng(protocol.seed, u, split), user=u)
        probs = row[item_cat[negs - 1]]
        p_truth = row[item_cat[truth_item - 1]]
        greater = int(np.count_nonzero(probs > p_truth))
        ties = int(np.count_nonzero(probs == p_truth))
        for n in protocol.cutoffs:
            h, g = expected_tie_metrics(greater, ties, n)
            hit[n].append(h)
            ndcg[n].append(g)
        true_k = cat_of_dense[truth_cat - 1]
        c_greater = int(np.count_nonzero(row > row[true_k]))
        c_ties = int(np.count_nonzero(row == row[true_k])) - 1
        acc.append(expected_tie_metrics(c_greater, c_ties, 1)[0])
        for n in cat_cutoffs:
            cat_hit[n].append(expected_tie_metrics(c_greater, c_ties, n)[0])

    def mean(values: list[float]) -> float:
        return math.fsum(values) / max(n_users, 1)

    return OracleReport(
        category_accuracy=mean(acc),
        hit={n: mean(v) for n, v in hit.items()},
        ndcg={n: mean(v) for n, v in ndcg.items()},
        category_hit={n: mean(v) for n, v in cat_hit.items()},
    )


def binomial_ceiling(p: float, n: int, sigmas: float = 3.0) -> float:
    """Upper noise bound for an accuracy measured on ``n`` independent cases."""
    return p + sigmas * math.sqrt(max(p * (1.0 - p), 1e-12) / max(n, 1))
