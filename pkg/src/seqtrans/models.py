"""Sequence translation recommenders as pure forward functions.

Every variant maps ``(params, items, cats, users, mask)`` to per-step logits
and KL streams.  Ids follow the datapipe convention: items ``1..n_items``,
categories ``1..n_cats``, 0 is padding, users ``0..n_users-1``.  Head column
``j`` therefore scores item (or category) id ``j + 1``.

Layer naming follows the data flow:

* ``rnn1`` reads the first sequence (items, or categories for ``ci``),
* ``rnn2`` translates into the other sequence, ``rnn3`` translates back,
* ``rnn2b``/``rnn3b`` are the extra translation block of ``s-tstm``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from seqtrans import neuralcore as nc
from seqtrans import vaehead
from seqtrans.neuralcore import LstmParams, Tensor

VARIANTS = ("lstm", "ci", "ic", "ici", "ivaec", "tstm", "s-tstm")

# loss streams each variant emits (negative log-likelihood heads, then KL streams)
LOSS_CONTRACT: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "lstm": (("L_item",), ()),
    "ci": (("L1", "L2"), ()),
    "ic": (("L_cat",), ()),
    "ivaec": (("L_cat",), ("KL",)),
    "ici": (("L1", "L2", "L3"), ()),
    "tstm": (("L1", "L2", "L3"), ("KL_c", "KL_i")),
    "s-tstm": (("L1", "L2", "L3", "L2b"), ("KL_c", "KL_i", "KL_cb")),
}

# head used for item ranking, head used for category ranking
RANKING_HEADS: dict[str, tuple[str | None, str | None]] = {
    "lstm": ("L_item", None),
    "ci": ("L1", "L2"),
    "ic": (None, "L_cat"),
    "ivaec": (None, "L_cat"),
    "ici": ("L3", "L2"),
    "tstm": ("L3", "L2"),
    "s-tstm": ("L3", "L2"),
}

EpsSource = Callable[[tuple[int, ...]], np.ndarray]


def zero_eps(shape: tuple[int, ...]) -> np.ndarray:
    return np.zeros(shape)


def gaussian_eps(rng: np.random.Generator) -> EpsSource:
    return lambda shape: rng.standard_normal(shape)


def check_variant(tag: str) -> str:
    if tag not in VARIANTS:
        raise ValueError(f"unknown variant {tag!r}; expected one of {', '.join(VARIANTS)}")
    return tag


@dataclass
class ModelDims:
    n_items: int
    n_cats: int
    n_users: int
    d: int = 50

    def __post_init__(self):
        if self.d % 2:
            raise ValueError(f"d must be even, got {self.d}")


@dataclass
class ParamSet:
    variant: str
    dims: ModelDims
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def lstm(self, prefix: str) -> LstmParams:
        t = self.tensors
        return LstmParams(t[f"{prefix}.w_x"], t[f"{prefix}.w_h"], t[f"{prefix}.b"])

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def count(self) -> int:
        return sum(t.value.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ParamSet":
        return ParamSet(
            self.variant,
            self.dims,
            {k: Tensor(v.value.copy(), name=k) for k, v in self.tensors.items()},
        )


def _layout(variant: str, dims: ModelDims) -> dict[str, tuple]:
    """Parameter name -> ("emb"|"mat"|"lstm", shape info)."""
    I, C, U, d = dims.n_items, dims.n_cats, dims.n_users, dims.d
    h = d // 2
    spec: dict[str, tuple] = {}
    if variant == "lstm":
        spec.update(item_emb=("emb", I + 1, d), rnn1=("lstm", d), W1=("mat", I, d))
    elif variant == "ci":
        spec.update(
            item_emb=("emb", I + 1, d), cat_emb=("emb", C + 1, d),
            rnn1=("lstm", d), rnn2=("lstm", 2 * d),
            W1=("mat", I, d), W2=("mat", C, d),
        )
    elif variant in ("ic", "ivaec"):
        spec.update(
            item_emb=("emb", I + 1, d), cat_emb=("emb", C + 1, d),
            rnn1=("lstm", d), rnn2=("lstm", 2 * d), W2=("mat", C, d),
        )
        if variant == "ivaec":
            spec["W_z"] = ("mat", d, h)
    elif variant == "ici":
        spec.update(
            item_emb=("emb", I + 1, d), cat_emb=("emb", C + 1, d),
            rnn1=("lstm", d), rnn2=("lstm", 2 * d), rnn3=("lstm", 2 * d),
            W1=("mat", I, d), W2=("mat", C, d), W1p=("mat", I, d),
        )
    elif variant in ("tstm", "s-tstm"):
        spec.update(
            item_emb=("emb", I + 1, d), cat_emb=("emb", C + 1, d), user_emb=("emb", U, d),
            rnn1=("lstm", d), rnn2=("lstm", 2 * d), rnn3=("lstm", 2 * d),
            W1=("mat", I, d), W2=("mat", C, d), W_z=("mat", d, h),
            W_f=("fusion", 2 * d, d), W3=("mat", I, h),
        )
        if variant == "s-tstm":
            spec.update(extra_block_layout(dims))
    else:
        check_variant(variant)
    return spec


def extra_block_layout(dims: ModelDims) -> dict[str, tuple]:
    d = dims.d
    return dict(
        W_zb=("mat", d, d // 2),
        rnn2b=("lstm", 2 * d),
        rnn3b=("lstm", 2 * d),
        W2b=("mat", dims.n_cats, d),
    )


def init_params(variant: str, dims: ModelDims, rng: np.random.Generator) -> ParamSet:
    """Matrices U(-1/sqrt(fan_in), +), biases 0, embeddings U(-0.05, 0.05)."""
    check_variant(variant)
    p = ParamSet(variant, dims)
    for name, (kind, *shape) in _layout(variant, dims).items():
        if kind == "emb":
            p.tensors[name] = nc.uniform_embedding(rng, shape[0], shape[1])
        elif kind == "mat":
            p.tensors[name] = nc.uniform_matrix(rng, shape[0], shape[1])
        elif kind == "fusion":
            # (2d, d) applied as (u ++ h3) @ W_f, so fan-in is the 2d rows
            rows, cols = shape
            bound = 1.0 / np.sqrt(rows)
            p.tensors[name] = Tensor(rng.uniform(-bound, bound, size=(rows, cols)))
        else:
            layer = nc.init_lstm(rng, shape[0], dims.d)
            for part, t in zip(("w_x", "w_h", "b"), layer.tensors()):
                p.tensors[f"{name}.{part}"] = t
    for name, t in p.tensors.items():
        t.name = name
    return p


def zero_params(variant: str, dims: ModelDims) -> ParamSet:
    p = init_params(variant, dims, np.random.default_rng(0))
    for t in p.tensors.values():
        t.value[...] = 0.0
    return p


@dataclass
class ForwardOutput:
    variant: str
    item_logits: dict[str, list[Tensor]]
    cat_logits: dict[str, list[Tensor]]
    kl: dict[str, list[Tensor]]
    steps: list[int]

    @property
    def score_head(self) -> str | None:
        return RANKING_HEADS[self.variant][0]

    @property
    def cat_head(self) -> str | None:
        return RANKING_HEADS[self.variant][1]

    def streams(self) -> list[str]:
        return [*self.item_logits, *self.cat_logits, *self.kl]


class _Runner:
    """Holds per-call state shared by the variant bodies."""

    def __init__(self, p: ParamSet, items, cats, users, mask, training, rng, dropout_rate, eps):
        self.p = p
        self.items = np.asarray(items, dtype=np.int64)
        if self.items.ndim == 1:
            self.items = self.items[None, :]
        B, L = self.items.shape
        self.cats = None if cats is None else np.asarray(cats, dtype=np.int64).reshape(B, L)
        if self.cats is not None and self.cats.shape != self.items.shape:
            raise ValueError("item and category sequences must have equal length")
        self.users = None if users is None else np.asarray(users, dtype=np.int64).reshape(B)
        self.mask = (
            (self.items > 0).astype(np.float64)
            if mask is None
            else np.asarray(mask, dtype=np.float64).reshape(B, L)
        )
        self.B, self.L = B, L
        self.training = training
        self.rng = rng
        self.rate = dropout_rate
        self.eps = eps
        self.d = p.dims.d

    def emb(self, table: str, ids) -> Tensor:
        x = nc.embedding_lookup(self.p[table], ids)
        return nc.dropout(x, self.rate, self.rng, self.training)

    def zeros(self):
        z = np.zeros((self.B, self.d))
        return Tensor(z), Tensor(z)

    def run(self, layer: str, inputs: list[Tensor]) -> list[Tensor]:
        lp = self.p.lstm(layer)
        h, c = self.zeros()
        out = []
        for t, x in enumerate(inputs):
            h, c = nc.lstm_step(lp, x, h, c, self.mask[:, t])
            out.append(h)
        return out

    def latent(self, hs: list[Tensor], proj: str | None):
        """Posterior per step -> (projected or raw samples, KL per step)."""
        zs, kls = [], []
        for h in hs:
            post = vaehead.split_posterior(h)
            sample = vaehead.reparameterize(post, eps=self.eps(post.mu.shape))
            zs.append(nc.linear(sample.z, self.p[proj]) if proj else sample.z)
            kls.append(vaehead.kl_standard_normal(post))
        return zs, kls


def forward(
    p: ParamSet,
    items,
    cats=None,
    users=None,
    mask=None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
    eps_source: EpsSource | None = None,
    last_only: bool = False,
    combine_heads: bool = False,
) -> ForwardOutput:
    """Run ``p.variant`` over a (B, L) batch with teacher-forced inputs.

    ``eps_source=None`` uses the posterior mean.  ``last_only`` evaluates the
    output heads at the final step only (the ranking path).
    """
    variant = check_variant(p.variant)
    eps = eps_source or zero_eps
    r = _Runner(p, items, cats, users, mask, training, rng, dropout_rate, eps)
    if variant != "lstm" and r.cats is None:
        raise ValueError(f"variant {variant} needs the category sequence")
    if variant in ("tstm", "s-tstm") and r.users is None:
        raise ValueError(f"variant {variant} needs user ids")
    steps = [r.L - 1] if last_only else list(range(r.L))

    item_emb = [r.emb("item_emb", r.items[:, t]) for t in range(r.L)]
    cat_emb = (
        [r.emb("cat_emb", r.cats[:, t]) for t in range(r.L)] if "cat_emb" in p else None
    )

    item_h: dict[str, list[Tensor]] = {}
    cat_h: dict[str, list[Tensor]] = {}
    kl: dict[str, list[Tensor]] = {}

    if variant == "lstm":
        item_h["L_item"] = ("W1", r.run("rnn1", item_emb))
    elif variant == "ci":
        h_c = r.run("rnn1", cat_emb)
        h_i = r.run("rnn2", [nc.concat(i, hc) for i, hc in zip(item_emb, h_c)])
        item_h["L1"] = ("W1", h_i)
        cat_h["L2"] = ("W2", h_c)
    elif variant in ("ic", "ivaec"):
        h1 = r.run("rnn1", item_emb)
        if variant == "ivaec":
            cond, kl["KL"] = r.latent(h1, "W_z")
        else:
            cond = h1
        h2 = r.run("rnn2", [nc.concat(c, x) for c, x in zip(cat_emb, cond)])
        cat_h["L_cat"] = ("W2", h2)
    elif variant == "ici":
        h1 = r.run("rnn1", item_emb)
        h2 = r.run("rnn2", [nc.concat(c, x) for c, x in zip(cat_emb, h1)])
        h3 = r.run("rnn3", [nc.concat(i, x) for i, x in zip(item_emb, h2)])
        item_h["L1"] = ("W1", h1)
        cat_h["L2"] = ("W2", h2)
        item_h["L3"] = ("W1p", h3)
    else:
        h1 = r.run("rnn1", item_emb)
        wz, kl["KL_c"] = r.latent(h1, "W_z")
        h2 = r.run("rnn2", [nc.concat(c, x) for c, x in zip(cat_emb, wz)])
        h3 = r.run("rnn3", [nc.concat(i, x) for i, x in zip(item_emb, h2)])
        item_h["L1"] = ("W1", h1)
        cat_h["L2"] = ("W2", h2)
        if variant == "s-tstm":
            wzb, kl["KL_cb"] = r.latent(h3, "W_zb")
            h2b = r.run("rnn2b", [nc.concat(c, x) for c, x in zip(cat_emb, wzb)])
            h3 = r.run("rnn3b", [nc.concat(i, x) for i, x in zip(item_emb, h2b)])
            cat_h["L2b"] = ("W2b", h2b)
        u = r.emb("user_emb", r.users)
        hp = [nc.matmul(nc.concat(u, x), p["W_f"]) for x in h3]
        zp, kl["KL_i"] = r.latent(hp, None)
        item_h["L3"] = ("W3", zp)
        # KL streams in contract order
        kl = {k: kl[k] for k in LOSS_CONTRACT[variant][1]}

    def heads(spec):
        return {name: [nc.linear(hs[t], p[w]) for t in steps] for name, (w, hs) in spec.items()}

    out = ForwardOutput(
        variant=variant,
        item_logits=heads(item_h),
        cat_logits=heads(cat_h),
        kl={k: [v[t] for t in steps] for k, v in kl.items()},
        steps=steps,
    )
    if combine_heads and variant in ("tstm", "s-tstm"):
        out.item_logits["L1+L3"] = [
            Tensor(nc.log_softmax_np(a.value) + nc.log_softmax_np(b.value))
            for a, b in zip(out.item_logits["L1"], out.item_logits["L3"])
        ]
    return out


def final_scores(p: ParamSet, items, cats=None, users=None, *, combine_heads: bool = False,
                 kind: str = "item", eps_source: EpsSource | None = None) -> np.ndarray:
    """Final-step logits (B, n_items) or (B, n_cats) on the mean path, no tape."""
    out = forward(p, items, cats, users, last_only=True, combine_heads=combine_heads,
                  eps_source=eps_source)
    if kind == "item":
        head = "L1+L3" if combine_heads and "L1+L3" in out.item_logits else out.score_head
        if head is None:
            raise ValueError(f"variant {p.variant} has no item head")
        return out.item_logits[head][0].value
    head = out.cat_head
    if head is None:
        raise ValueError(f"variant {p.variant} has no category head")
    return out.cat_logits[head][0].value


def left_pad(seqs: list[list[int]], length: int | None = None) -> np.ndarray:
    """Stack variable-length id lists, left-padded with 0 (keeps the most recent)."""
    n = length or max((len(s) for s in seqs), default=1)
    out = np.zeros((len(seqs), max(n, 1)), dtype=np.int64)
    for row, s in enumerate(seqs):
        s = list(s)[-n:]
        if s:
            out[row, n - len(s):] = s
    return out


def score_candidates(p: ParamSet, history_items, history_cats, user, candidates,
                     *, max_len: int | None = None, combine_heads: bool = False) -> np.ndarray:
    """Final-step item scores of one user's history restricted to ``candidates``."""
    if len(history_items) == 0:
        raise ValueError("cannot score candidates from an empty history")
    hi = list(history_items)[-max_len:] if max_len else list(history_items)
    hc = list(history_cats)[-max_len:] if max_len else list(history_cats)
    logits = final_scores(p, [hi], [hc], [user], combine_heads=combine_heads)[0]
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size and (cand.min() < 1 or cand.max() > p.dims.n_items):
        raise IndexError("candidate item id out of range")
    return logits[cand - 1]
