"""Joint objective, Adam, early-stopped training, gradient checks, checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from seqtrans import models
from seqtrans import neuralcore as nc
from seqtrans.datapipe import Batch, SplitDataset, collate, dataset_windows, make_batches
from seqtrans.evaluator import EvalProtocol, category_ranks, evaluate_scorer, mean_metric, model_scorer, ndcg_at_n, hit_at_n
from seqtrans.models import LOSS_CONTRACT, ForwardOutput, ModelDims, ParamSet
from seqtrans.neuralcore import Tape, Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SEQTRANS-CKPT v1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: str = "tstm"
    d: int = 50
    L: int = 5
    batch_size: int = 128
    learning_rate: float = 0.001
    dropout: float = 0.2
    lam: float = 1.0
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    sample_at_eval: bool = False
    combine_heads: bool = False
    optimizer: str = "adam"
    clip_norm: float = 5.0
    negatives: int = 500
    eval_seed: int = 2020
    max_len: int | None = None

    def __post_init__(self):
        models.check_variant(self.variant)
        if self.d % 2:
            raise ValueError(f"d must be even, got {self.d}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.L < 1:
            raise ValueError("learning rate, batch size and L must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def protocol(self, cutoffs=(1, 5, 10, 15, 20)) -> EvalProtocol:
        return EvalProtocol(negatives=self.negatives, cutoffs=tuple(cutoffs), seed=self.eval_seed,
                            max_len=self.max_len)


# ----------------------------------------------------------------- objective


def total_loss(out: ForwardOutput, target_items, target_cats, mask, lam: float):
    """Mean over valid steps of summed NLL heads plus ``lam`` times summed KL streams.

    Returns the scalar loss tensor and each component's per-step mean.
    """
    nll, kls = LOSS_CONTRACT[out.variant]
    present = set(out.item_logits) | set(out.cat_logits) | set(out.kl)
    missing = [k for k in (*nll, *kls) if k not in present]
    if missing:
        raise ValueError(f"forward output of {out.variant} lacks streams {missing}")
    mask = np.asarray(mask, dtype=np.float64)
    n_valid = mask.sum()
    if n_valid <= 0:
        raise ValueError("batch has no valid steps")
    tgt_i = np.maximum(np.asarray(target_items) - 1, 0)
    tgt_c = np.maximum(np.asarray(target_cats) - 1, 0)
    parts: dict[str, Tensor] = {}
    for name in nll:
        if name in out.item_logits:
            logits, tgt = out.item_logits[name], tgt_i
        else:
            logits, tgt = out.cat_logits[name], tgt_c
        terms = [nc.softmax_cross_entropy(z, tgt[:, t], mask[:, t]) for z, t in zip(logits, out.steps)]
        parts[name] = _sum(terms) * (1.0 / n_valid)
    for name in kls:
        terms = [nc.tensor_sum(k * Tensor(mask[:, t])) for k, t in zip(out.kl[name], out.steps)]
        parts[name] = _sum(terms) * (1.0 / n_valid)
    loss = _sum([parts[n] for n in nll])
    if kls and lam != 0.0:
        loss = loss + _sum([parts[n] for n in kls]) * lam
    return loss, {k: float(v.value) for k, v in parts.items()}


def _sum(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


def batch_loss(p: ParamSet, batch: Batch, lam: float, *, training: bool, rng=None,
               dropout: float = 0.0, eps_source=None):
    out = models.forward(p, batch.items, batch.cats, batch.users, batch.mask, training=training,
                         rng=rng, dropout_rate=dropout, eps_source=eps_source)
    return total_loss(out, batch.target_items, batch.target_cats, batch.mask, lam)


# ----------------------------------------------------------------- optimizers


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, in place. Parameters without a gradient are skipped."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.value.shape:
            raise nc.DimensionError(f"grad shape {g.shape} != param shape {p.value.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    for name, g in grads.items():
        params[name].value -= lr * g


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def collect_grads(p: ParamSet) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in p.tensors.items() if t.grad is not None}


# ----------------------------------------------------------------- training


@dataclass
class Checkpoint:
    params: ParamSet
    config: TrainConfig
    maps_digest: str
    epoch: int
    best_val_ndcg5: float
    history: list[dict] = field(default_factory=list)


def validation_score(p: ParamSet, ds: SplitDataset, config: TrainConfig) -> dict[str, float]:
    """Validation Hit@5/NDCG@5; item ranking, or category ranking for item-less variants."""
    item_head, _ = models.RANKING_HEADS[p.variant]
    eps = _eval_eps(config)
    if item_head is not None:
        rep = evaluate_scorer(model_scorer(p, "item", config.combine_heads, eps), ds,
                              config.protocol((5,)), "valid", p.variant)
        ranks = rep.ranks
    else:
        ranks = category_ranks(model_scorer(p, "cat", eps_source=eps), ds, "valid",
                               max_len=config.max_len)
    return {"val_hit5": mean_metric(hit_at_n, ranks, 5), "val_ndcg5": mean_metric(ndcg_at_n, ranks, 5)}


def _eval_eps(config: TrainConfig):
    if not config.sample_at_eval:
        return None
    return models.gaussian_eps(np.random.default_rng([config.seed, 99]))


def fit(ds: SplitDataset, config: TrainConfig, progress: bool = False) -> Checkpoint:
    """Seeded mini-batch training with early stopping on validation NDCG@5."""
    windows = dataset_windows(ds, config.L)
    if not windows:
        raise ValueError("dataset yields no training windows")
    init_ss, shuffle_ss, noise_ss = np.random.SeedSequence(config.seed).spawn(3)
    dims = ModelDims(ds.maps.n_items, ds.maps.n_cats, ds.maps.n_users, config.d)
    p = models.init_params(config.variant, dims, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    eps_source = models.gaussian_eps(noise_rng)
    state = AdamState()
    best: Checkpoint | None = None
    history: list[dict] = []
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        total_steps = 0.0
        for batch in make_batches(windows, config.batch_size, shuffle_rng):
            p.zero_grad()
            with Tape() as tape:
                loss, parts = batch_loss(p, batch, config.lam, training=True, rng=noise_rng,
                                         dropout=config.dropout, eps_source=eps_source)
            nc.backward(tape, loss)
            grads = collect_grads(p)
            clip_global_norm(grads, config.clip_norm)
            if config.optimizer == "adam":
                adam_step(p.tensors, grads, state, config.learning_rate)
            else:
                sgd_step(p.tensors, grads, config.learning_rate)
            w = float(batch.mask.sum())
            total_steps += w
            sums["train_loss"] = sums.get("train_loss", 0.0) + float(loss.value) * w
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * w
        p.zero_grad()
        row = {"epoch": epoch, **{k: v / total_steps for k, v in sums.items()}}
        row.update(validation_score(p, ds, config))
        history.append(row)
        if progress:
            log.info("epoch %d  loss %.4f  val_hit5 %.4f  val_ndcg5 %.4f  (%.1fs)", epoch,
                     row["train_loss"], row["val_hit5"], row["val_ndcg5"], time.perf_counter() - t0)
        if best is None or row["val_ndcg5"] > best.best_val_ndcg5:
            best = Checkpoint(p.copy(), config, ds.maps.digest(), epoch, row["val_ndcg5"])
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.patience:
            break
    best.history = history
    return best


HISTORY_COLUMNS = ("epoch", "train_loss")


def history_csv(history: list[dict]) -> str:
    keys = list(HISTORY_COLUMNS)
    for row in history:
        keys += [k for k in row if k not in keys and k not in ("val_hit5", "val_ndcg5")]
    keys += ["val_hit5", "val_ndcg5"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in history:
        w.writerow([row["epoch"] if k == "epoch" else repr(float(row.get(k, float("nan")))) for k in keys])
    return buf.getvalue()


# ----------------------------------------------------------------- tiny instance, gradcheck, overfit

TINY_DIMS = ModelDims(n_items=5, n_cats=2, n_users=2, d=4)


def tiny_batch() -> Batch:
    """Two users, L=2; item k belongs to category 1 + (k > 2)."""
    item_cat = {1: 1, 2: 1, 3: 2, 4: 2, 5: 2}
    seqs = {0: [1, 3, 4], 1: [5, 2, 1]}
    users, items, cats, ti, tc = [], [], [], [], []
    for u, s in seqs.items():
        users.append(u)
        items.append(s[:2])
        cats.append([item_cat[i] for i in s[:2]])
        ti.append(s[1:])
        tc.append([item_cat[i] for i in s[1:]])
    return Batch(np.array(users), np.array(items), np.array(cats), np.array(ti), np.array(tc),
                 np.ones((2, 2)))


def _seeded_loss(p: ParamSet, batch: Batch, lam: float, dropout: float, seed: int):
    # fresh generators per call: every evaluation sees the same dropout masks and eps
    rng = np.random.default_rng([seed, 1])
    eps = models.gaussian_eps(np.random.default_rng([seed, 2]))
    return batch_loss(p, batch, lam, training=True, rng=rng, dropout=dropout, eps_source=eps)


def gradcheck(variant: str, *, lam: float = 1.0, dropout: float = 0.2, step: float = 1e-5,
              seed: int = 0, corrupt=None) -> dict[str, float]:
    """Max relative error (inf-norm, per parameter tensor) of analytic vs central differences."""
    p = models.init_params(variant, TINY_DIMS, np.random.default_rng(seed))
    # move off the near-zero init so every gate and head is exercised
    rng = np.random.default_rng(seed + 1)
    for t in p.tensors.values():
        t.value += rng.normal(0.0, 0.3, size=t.value.shape)
    batch = tiny_batch()
    with Tape() as tape:
        loss, _ = _seeded_loss(p, batch, lam, dropout, seed)
    nc.backward(tape, loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)).copy()
                for k, t in p.tensors.items()}
    if corrupt is not None:
        corrupt(analytic)
    report = {}
    for name, t in p.tensors.items():
        numeric = np.zeros_like(t.value)
        flat = t.value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(_seeded_loss(p, batch, lam, dropout, seed)[0].value)
            flat[k] = orig - step
            down = float(_seeded_loss(p, batch, lam, dropout, seed)[0].value)
            flat[k] = orig
            num_flat[k] = (up - down) / (2 * step)
        report[name] = relative_error(analytic[name], numeric)
    return report


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    diff = float(np.max(np.abs(a - b), initial=0.0))
    return diff / scale if scale > floor else diff


def overfit(variant: str, *, epochs: int = 500, lr: float = 0.05, lam: float = 0.0,
            dropout: float = 0.0, seed: int = 0) -> list[float]:
    """Train on one repeated tiny window; returns the loss before each update plus the final one."""
    full = tiny_batch()
    one = Batch(full.users[:1], full.items[:1], full.cats[:1], full.target_items[:1],
                full.target_cats[:1], full.mask[:1])
    p = models.init_params(variant, TINY_DIMS, np.random.default_rng(seed))
    noise = np.random.default_rng(seed + 1)
    eps = models.gaussian_eps(noise)
    state = AdamState()
    losses = []
    for _ in range(epochs):
        p.zero_grad()
        with Tape() as tape:
            loss, _ = batch_loss(p, one, lam, training=True, rng=noise, dropout=dropout, eps_source=eps)
        losses.append(float(loss.value))
        nc.backward(tape, loss)
        adam_step(p.tensors, collect_grads(p), state, lr)
    with Tape():
        loss, _ = batch_loss(p, one, lam, training=True, rng=noise, dropout=dropout, eps_source=eps)
    losses.append(float(loss.value))
    return losses


# ----------------------------------------------------------------- checkpoint files


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    buf = io.BytesIO()
    np.savez(buf, **{k: t.value for k, t in ckpt.params.tensors.items()})
    payload = buf.getvalue()
    meta = {
        "variant": ckpt.params.variant,
        "dims": asdict(ckpt.params.dims),
        "config": asdict(ckpt.config),
        "maps_digest": ckpt.maps_digest,
        "epoch": ckpt.epoch,
        "best_val_ndcg5": ckpt.best_val_ndcg5,
        "history": ckpt.history,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path: str | Path, variant: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint; ``variant`` refuses a checkpoint of another variant."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        first = raw.split(b"\n", 1)[0][:40]
        raise CheckpointError(f"{path}: unsupported checkpoint header {first!r}")
    rest = raw[len(CKPT_MAGIC):]
    meta_line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: corrupt checkpoint (no metadata)")
    try:
        meta = json.loads(meta_line)
    except json.JSONDecodeError:
        raise CheckpointError(f"{path}: corrupt checkpoint metadata") from None
    if len(payload) != meta["payload_bytes"] or hashlib.sha256(payload).hexdigest() != meta["payload_sha256"]:
        raise CheckpointError(f"{path}: corrupt checkpoint (payload truncated or altered)")
    if variant is not None and meta["variant"] != variant:
        raise CheckpointError(f"{path}: checkpoint holds variant {meta['variant']!r}, expected {variant!r}")
    arrays = np.load(io.BytesIO(payload))
    dims = ModelDims(**meta["dims"])
    params = ParamSet(meta["variant"], dims, {k: Tensor(arrays[k].copy(), name=k) for k in arrays.files})
    expected = set(models.init_params(meta["variant"], dims, np.random.default_rng(0)).tensors)
    if set(params.tensors) != expected:
        raise CheckpointError(f"{path}: parameter names do not match variant {meta['variant']}")
    return Checkpoint(params, TrainConfig(**meta["config"]), meta["maps_digest"], meta["epoch"],
                      meta["best_val_ndcg5"], meta["history"])
