"""Interaction logs -> filtered, leave-one-out split -> sliding training windows."""
from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, TextIO

import numpy as np

log = logging.getLogger(__name__)

SPLIT_MAGIC = "SEQTRANS-SPLIT v1"


class ParseError(ValueError):
    pass


class InteractionEvent(NamedTuple):
    user: str
    item: str
    category: str
    timestamp: int


def _lines(stream: TextIO | Iterable[str]) -> Iterator[tuple[int, str]]:
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if line.strip():
            yield lineno, line


def parse_canonical(stream: TextIO | Iterable[str]) -> list[InteractionEvent]:
    """``user<TAB>item<TAB>category<TAB>timestamp`` per line, file order kept."""
    events = []
    for lineno, line in _lines(stream):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        user, item, cat, ts = parts
        if not (user and item and cat):
            raise ParseError(f"line {lineno}: empty field")
        try:
            stamp = int(ts)
        except ValueError:
            raise ParseError(f"line {lineno}: timestamp {ts!r} is not an integer") from None
        if stamp < 0:
            raise ParseError(f"line {lineno}: negative timestamp")
        events.append(InteractionEvent(user, item, cat, stamp))
    return events


def write_canonical(events: Iterable[InteractionEvent], stream: TextIO) -> None:
    for e in events:
        stream.write(f"{e.user}\t{e.item}\t{e.category}\t{e.timestamp}\n")


def parse_movielens(
    ratings: TextIO | Iterable[str],
    movies: TextIO | Iterable[str],
    genre_rule: str = "first",
    seed: int = 0,
) -> list[InteractionEvent]:
    """MovieLens-1M ``::`` files; every rating becomes one implicit event.

    The category of a multi-genre movie is its first listed genre, or a
    seeded random pick with ``genre_rule="random_seeded"``.
    """
    if genre_rule not in ("first", "random_seeded"):
        raise ValueError(f"unknown genre rule {genre_rule!r}")
    rng = np.random.default_rng(seed)
    genre_of: dict[str, str] = {}
    for lineno, line in _lines(movies):
        parts = line.split("::")
        if len(parts) != 3:
            raise ParseError(f"movies line {lineno}: expected MovieID::Title::Genres")
        genres = [g for g in parts[2].split("|") if g]
        if not genres:
            raise ParseError(f"movies line {lineno}: no genre")
        pick = genres[0] if genre_rule == "first" else genres[int(rng.integers(len(genres)))]
        genre_of[parts[0]] = pick
    events, dropped = [], 0
    for lineno, line in _lines(ratings):
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(f"ratings line {lineno}: expected UserID::MovieID::Rating::Timestamp")
        user, movie, _, ts = parts
        cat = genre_of.get(movie)
        if cat is None:
            dropped += 1
            continue
        try:
            events.append(InteractionEvent(user, movie, cat, int(ts)))
        except ValueError:
            raise ParseError(f"ratings line {lineno}: bad timestamp {ts!r}") from None
    if dropped:
        log.warning("dropped %d ratings of movies missing from the movies file", dropped)
    return events


def ncore_filter(
    events: list[InteractionEvent],
    item_min: int,
    user_min: int,
    user_min_records: int = 0,
    mode: str = "fixpoint",
) -> list[InteractionEvent]:
    """Drop items seen by < item_min distinct users and users with < user_min distinct items.

    ``mode="fixpoint"`` repeats until nothing changes; ``"single"`` makes one
    item pass then one user pass.  Afterwards users with fewer than
    ``user_min_records`` events are dropped.
    """
    if min(item_min, user_min, user_min_records) < 0:
        raise ValueError("thresholds must be >= 0")
    if mode not in ("fixpoint", "single"):
        raise ValueError(f"unknown filter mode {mode!r}")
    kept = list(events)
    while True:
        before = len(kept)
        pairs = {(e.user, e.item) for e in kept}
        item_users = Counter(item for _, item in pairs)
        kept = [e for e in kept if item_users[e.item] >= item_min]
        pairs = {(e.user, e.item) for e in kept}
        user_items = Counter(user for user, _ in pairs)
        kept = [e for e in kept if user_items[e.user] >= user_min]
        if mode == "single" or len(kept) == before:
            break
    if user_min_records > 0:
        records = Counter(e.user for e in kept)
        kept = [e for e in kept if records[e.user] >= user_min_records]
    return kept


@dataclass
class CatalogMaps:
    users: list[str]
    items: list[str]  # items[k] has dense id k + 1
    categories: list[str]  # categories[k] has dense id k + 1
    item_category: list[int] = field(default_factory=list)  # dense cat of dense item k + 1

    def __post_init__(self):
        self._user_ix = {u: k for k, u in enumerate(self.users)}
        self._item_ix = {v: k + 1 for k, v in enumerate(self.items)}
        self._cat_ix = {v: k + 1 for k, v in enumerate(self.categories)}

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_cats(self) -> int:
        return len(self.categories)

    def user_id(self, ext: str) -> int:
        return self._user_ix[ext]

    def item_id(self, ext: str) -> int:
        return self._item_ix[ext]

    def cat_id(self, ext: str) -> int:
        return self._cat_ix[ext]

    def item_name(self, dense: int) -> str:
        if dense < 1:
            raise IndexError("item id 0 is padding")
        return self.items[dense - 1]

    def cat_name(self, dense: int) -> str:
        if dense < 1:
            raise IndexError("category id 0 is padding")
        return self.categories[dense - 1]

    def digest(self) -> str:
        import hashlib

        blob = json.dumps([self.users, self.items, self.categories]).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class UserSplit:
    train_items: list[int]
    train_cats: list[int]
    valid: tuple[int, int]
    test: tuple[int, int]

    def full_items(self) -> list[int]:
        return [*self.train_items, self.valid[0], self.test[0]]

    def full_cats(self) -> list[int]:
        return [*self.train_cats, self.valid[1], self.test[1]]


@dataclass
class SplitDataset:
    maps: CatalogMaps
    users: list[UserSplit]  # index = dense user id

    def history_set(self, user: int) -> set[int]:
        return set(self.users[user].full_items())

    def history(self, user: int, split: str, include_valid: bool = True) -> tuple[list[int], list[int], tuple[int, int]]:
        """(history items, history cats, (truth item, truth cat)) for a split."""
        u = self.users[user]
        if split == "valid":
            return list(u.train_items), list(u.train_cats), u.valid
        if split == "test":
            if include_valid:
                return [*u.train_items, u.valid[0]], [*u.train_cats, u.valid[1]], u.test
            return list(u.train_items), list(u.train_cats), u.test
        raise ValueError(f"split must be 'valid' or 'test', got {split!r}")


def leave_one_out_split(events: list[InteractionEvent], min_events: int = 3) -> SplitDataset:
    """Per user: stable time sort, last event -> test, second last -> validation.

    Users with fewer than ``min_events`` events are dropped.  Dense ids are
    assigned in order of first appearance after the sort.
    """
    by_user: dict[str, list[tuple[int, int, InteractionEvent]]] = defaultdict(list)
    for order, e in enumerate(events):
        by_user[e.user].append((e.timestamp, order, e))
    short = [u for u, evs in by_user.items() if len(evs) < min_events]
    if short:
        log.warning("dropped %d users with fewer than %d events", len(short), min_events)
    ordered = {
        u: [e for _, _, e in sorted(evs, key=lambda t: (t[0], t[1]))]
        for u, evs in by_user.items()
        if len(evs) >= min_events
    }
    users = list(ordered)
    items: dict[str, int] = {}
    cats: dict[str, int] = {}
    item_cat: dict[int, int] = {}
    splits = []
    for u in users:
        seq_i, seq_c = [], []
        for e in ordered[u]:
            i = items.setdefault(e.item, len(items) + 1)
            c = cats.setdefault(e.category, len(cats) + 1)
            item_cat.setdefault(i, c)
            seq_i.append(i)
            seq_c.append(c)
        splits.append(UserSplit(seq_i[:-2], seq_c[:-2], (seq_i[-2], seq_c[-2]), (seq_i[-1], seq_c[-1])))
    maps = CatalogMaps(
        users=users,
        items=list(items),
        categories=list(cats),
        item_category=[item_cat[k] for k in range(1, len(items) + 1)],
    )
    return SplitDataset(maps, splits)


@dataclass
class TrainingWindow:
    user: int
    input_items: np.ndarray
    input_cats: np.ndarray
    target_items: np.ndarray
    target_cats: np.ndarray
    mask: np.ndarray


def sliding_windows(items: list[int], cats: list[int], L: int, user: int = 0) -> list[TrainingWindow]:
    """``max(1, T - L)`` next-step windows; short sequences give one left-padded window."""
    if L < 1:
        raise ValueError("window length must be >= 1")
    T = len(items)
    if T < 2:
        return []
    n = min(L, T - 1)
    out = []
    for start in range(max(1, T - L)):
        pad = L - n
        seg = slice(start, start + n)
        nxt = slice(start + 1, start + n + 1)

        def padded(seq, s):
            a = np.zeros(L, dtype=np.int64)
            a[pad:] = seq[s]
            return a

        mask = np.zeros(L)
        mask[pad:] = 1.0
        out.append(TrainingWindow(
            user,
            padded(items, seg), padded(cats, seg),
            padded(items, nxt), padded(cats, nxt),
            mask,
        ))
    return out


def dataset_windows(ds: SplitDataset, L: int) -> list[TrainingWindow]:
    windows = []
    for u, split in enumerate(ds.users):
        windows.extend(sliding_windows(split.train_items, split.train_cats, L, user=u))
    return windows


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    cats: np.ndarray
    target_items: np.ndarray
    target_cats: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def collate(windows: list[TrainingWindow]) -> Batch:
    return Batch(
        users=np.array([w.user for w in windows], dtype=np.int64),
        items=np.stack([w.input_items for w in windows]),
        cats=np.stack([w.input_cats for w in windows]),
        target_items=np.stack([w.target_items for w in windows]),
        target_cats=np.stack([w.target_cats for w in windows]),
        mask=np.stack([w.mask for w in windows]),
    )


def make_batches(windows: list[TrainingWindow], batch_size: int, seed: int | np.random.Generator | None = None) -> Iterator[Batch]:
    """Shuffle with ``seed`` (None keeps order) and yield batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.arange(len(windows))
    if seed is not None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        yield collate([windows[k] for k in order[start:start + batch_size]])


def dataset_stats(ds: SplitDataset) -> dict:
    users = len(ds.users)
    interactions = sum(len(u.train_items) + 2 for u in ds.users)
    items = ds.maps.n_items
    cats = ds.maps.n_cats
    sparsity = 1.0 - interactions / (users * items) if users and items else 1.0
    return {
        "users": users,
        "items": items,
        "interactions": interactions,
        "categories": cats,
        "sparsity": sparsity,
    }


def format_stats(stats: dict, name: str = "dataset") -> str:
    header = "dataset\t#user\t#item\t#interaction\t#category\tsparsity"
    row = (
        f"{name}\t{stats['users']:,}\t{stats['items']:,}\t{stats['interactions']:,}"
        f"\t{stats['categories']}\t{100 * stats['sparsity']:.2f}%"
    )
    return f"{header}\n{row}"


# ----------------------------------------------------------------- split cache


def save_split(ds: SplitDataset, path: str | Path) -> None:
    body = {
        "maps": {
            "users": ds.maps.users,
            "items": ds.maps.items,
            "categories": ds.maps.categories,
            "item_category": ds.maps.item_category,
        },
        "users": [
            [u.train_items, u.train_cats, list(u.valid), list(u.test)] for u in ds.users
        ],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SPLIT_MAGIC + "\n")
        json.dump(body, fh, separators=(",", ":"))
        fh.write("\n")


def load_split(path: str | Path) -> SplitDataset:
    with open(path, encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != SPLIT_MAGIC:
            raise ParseError(f"{path}: not a split cache (header {magic!r}, expected {SPLIT_MAGIC!r})")
        try:
            body = json.loads(fh.read())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: corrupt split cache: {exc}") from None
    maps = CatalogMaps(**body["maps"])
    users = [UserSplit(ti, tc, tuple(v), tuple(t)) for ti, tc, v, t in body["users"]]
    return SplitDataset(maps, users)
