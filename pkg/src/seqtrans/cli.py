"""``seqtrans`` command line: prepare, train, evaluate, gradcheck, synth, sweep.

Exit codes: 0 success, 1 check failed (gradcheck), 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path


from seqtrans import datapipe, evaluator, models, plots, synthbench, trainer

log = logging.getLogger("seqtrans")

GRADCHECK_TOL = 1e-4

FILES = {
    "config": "config.resolved",
    "history": "history.csv",
    "metrics_json": "metrics.json",
    "metrics_csv": "metrics.csv",
    "checkpoint": "checkpoint.bin",
    "split": "split.cache",
}

CONTROL_KEYS = ("func", "config", "verbose", "command")


class InputError(Exception):
    pass


# ----------------------------------------------------------------- config files
# Config keys are the destination names of a subcommand's flags, so a written
# config.resolved replays the same command: ``seqtrans <cmd> --config config.resolved``.


def _coerce(key: str, raw: str, action: argparse.Action):
    if raw in ("None", "none"):
        return None
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InputError(f"config key {key!r}: not a boolean: {raw!r}")
    value = raw
    if action.type is not None:
        try:
            value = action.type(raw)
        except (TypeError, ValueError):
            raise InputError(f"config key {key!r}: cannot parse {raw!r}") from None
    if action.choices is not None and value not in action.choices:
        raise InputError(f"config key {key!r}: {value!r} not one of {sorted(action.choices)}")
    return value


def read_config(path: str | Path, parser: argparse.ArgumentParser, command: str) -> dict:
    """``key = value`` lines with ``#`` comments; unknown keys are rejected."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", *CONTROL_KEYS)}
    if "lam" in actions:
        actions["lambda"] = actions["lam"]
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise InputError(f"{path}:{lineno}: expected key = value")
        if key == "command":
            if value != command:
                raise InputError(f"{path}: written by {value!r}, not {command!r}")
            continue
        if key not in actions:
            raise InputError(f"{path}:{lineno}: unknown config key {key!r}")
        out[actions[key].dest] = _coerce(key, value, actions[key])
    return out


def write_config(values: dict, path: Path, command: str) -> None:
    lines = ["# fully resolved run configuration", f"command = {command}"]
    for key in sorted(values):
        if key in CONTROL_KEYS:
            continue
        v = values[key]
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {'None' if v is None else v}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def train_config(values: dict) -> trainer.TrainConfig:
    names = set(trainer.TrainConfig.field_names())
    try:
        return trainer.TrainConfig(**{k: v for k, v in values.items() if k in names and v is not None})
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _cutoffs(text) -> tuple[int, ...]:
    if not text:
        return evaluator.DEFAULT_CUTOFFS
    try:
        cutoffs = tuple(int(x) for x in str(text).replace(",", " ").split())
        return evaluator.EvalProtocol(cutoffs=cutoffs).cutoffs
    except ValueError:
        raise InputError(f"bad cutoff list {text!r}") from None


def load_data(path: str | None) -> datapipe.SplitDataset:
    if not path:
        raise InputError("no dataset given (--data)")
    p = Path(path)
    if p.is_dir():
        p = p / FILES["split"]
    if not p.exists():
        raise InputError(f"dataset not found: {p}")
    try:
        return datapipe.load_split(p)
    except datapipe.ParseError as exc:
        raise InputError(str(exc)) from None


def _outdir(path: str | None, default: str | Path) -> Path:
    out = Path(path or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------- commands


def _read_events(args) -> list[datapipe.InteractionEvent]:
    src = Path(args.input)
    if not src.exists():
        raise InputError(f"input not found: {src}")
    try:
        if args.format == "canonical":
            with open(src, encoding="utf-8") as fh:
                return datapipe.parse_canonical(fh)
        ratings = src / "ratings.dat" if src.is_dir() else src
        movies = Path(args.movies) if args.movies else ratings.parent / "movies.dat"
        for f in (ratings, movies):
            if not f.exists():
                raise InputError(f"input not found: {f}")
        # the 1M release ships latin-1 titles
        with open(ratings, encoding="latin-1") as rf, open(movies, encoding="latin-1") as mf:
            return datapipe.parse_movielens(rf, mf, genre_rule=args.genre_rule, seed=args.seed)
    except datapipe.ParseError as exc:
        raise InputError(str(exc)) from None


def cmd_prepare(args) -> int:
    events = _read_events(args)
    out = _outdir(args.out, "prepared")
    by_mode, splits = {}, {}
    for mode in ("fixpoint", "single"):
        kept = datapipe.ncore_filter(events, args.item_min, args.user_min, args.user_min_records, mode)
        splits[mode] = datapipe.leave_one_out_split(kept)
        by_mode[mode] = datapipe.dataset_stats(splits[mode])
    ds = splits[args.filter_mode]
    datapipe.save_split(ds, out / FILES["split"])
    stats = by_mode[args.filter_mode]
    report = {
        "stats": stats,
        "filter_mode": args.filter_mode,
        "by_filter_mode": by_mode,
        "thresholds": {"item_min": args.item_min, "user_min": args.user_min,
                       "user_min_records": args.user_min_records,
                       "user_min_records_rule": "keep users with >= user_min_records events"},
        "raw_events": len(events),
    }
    (out / "stats.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    table = datapipe.format_stats(stats, Path(args.input).stem)
    (out / "stats.tsv").write_text(table + "\n", encoding="utf-8")
    write_config(vars(args), out / FILES["config"], "prepare")
    print(table)
    if by_mode["fixpoint"] != by_mode["single"]:
        other = "single" if args.filter_mode == "fixpoint" else "fixpoint"
        print(f"note: {other} filtering gives different counts: {json.dumps(by_mode[other])}")
    return 0


def _train_once(values: dict, ds: datapipe.SplitDataset, out: Path) -> trainer.Checkpoint:
    cfg = train_config(values)
    write_config({**asdict(cfg), "data": values.get("data"), "out": str(out)},
                 out / FILES["config"], "train")
    try:
        ckpt = trainer.fit(ds, cfg, progress=True)
    except evaluator.ProtocolError as exc:
        raise InputError(f"validation protocol infeasible ({exc}); lower --negatives") from None
    trainer.save_checkpoint(ckpt, out / FILES["checkpoint"])
    (out / FILES["history"]).write_text(trainer.history_csv(ckpt.history), encoding="utf-8")
    plots.plot_history(ckpt.history, out / "history.png")
    return ckpt


def cmd_train(args) -> int:
    values = vars(args)
    ds = load_data(args.data)
    out = _outdir(args.out, "run")
    ckpt = _train_once(values, ds, out)
    best = ckpt.history[ckpt.epoch - 1]
    print(f"best epoch {ckpt.epoch}/{len(ckpt.history)}: "
          f"val Hit@5 {best['val_hit5']:.4f}  val NDCG@5 {best['val_ndcg5']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    ds = load_data(args.data)
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    try:
        ckpt = trainer.load_checkpoint(args.checkpoint, variant=args.variant)
    except trainer.CheckpointError as exc:
        raise InputError(str(exc)) from None
    if ckpt.maps_digest != ds.maps.digest():
        raise InputError(f"checkpoint {args.checkpoint} was trained on a different catalog")
    cfg = ckpt.config
    negatives = cfg.negatives if args.negatives is None else args.negatives
    try:
        protocol = evaluator.EvalProtocol(
            negatives=negatives or None,
            cutoffs=_cutoffs(args.cutoffs),
            seed=cfg.eval_seed if args.eval_seed is None else args.eval_seed,
            max_len=cfg.max_len if args.max_len is None else args.max_len,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    variant = ckpt.params.variant
    item_head, cat_head = models.RANKING_HEADS[variant]
    out = _outdir(args.out, Path(args.checkpoint).parent / f"eval-{args.split}")
    eps = trainer._eval_eps(cfg)
    doc = {"variant": variant, "split": args.split, "protocol": asdict(protocol)}
    if item_head is not None:
        try:
            report = evaluator.evaluate(ckpt.params, ds, protocol, args.split, cfg.combine_heads, eps)
        except evaluator.ProtocolError as exc:
            raise InputError(str(exc)) from None
        doc = json.loads(report.to_json())
        (out / FILES["metrics_csv"]).write_text(report.to_csv(), encoding="utf-8")
        plots.plot_cutoffs(report.metrics(), out / "metrics.png", f"{variant} ({args.split})")
        print(report.table())
    if cat_head is not None:
        cat = evaluator.category_accuracy(ckpt.params, ds, args.split, cutoffs=protocol.cutoffs,
                                          max_len=protocol.max_len)
        doc["category_metrics"] = cat.metrics()
        if item_head is None:
            (out / FILES["metrics_csv"]).write_text(
                "cutoff,category_hit,category_ndcg\n"
                + "".join(f"{n},{cat.hit(n)!r},{cat.ndcg(n)!r}\n" for n in cat.cutoffs),
                encoding="utf-8")
            plots.plot_cutoffs(cat.metrics(), out / "metrics.png", f"{variant} categories ({args.split})")
        print("category " + "  ".join(f"Hit@{n} {cat.hit(n):.4f}" for n in cat.cutoffs))
    (out / FILES["metrics_json"]).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    write_config({**vars(args), "out": str(out)}, out / FILES["config"], "evaluate")
    return 0


def cmd_gradcheck(args) -> int:
    variants = models.VARIANTS if args.variant == "all" else (args.variant,)
    worst = 0.0
    for v in variants:
        report = trainer.gradcheck(v)
        for name in sorted(report):
            print(f"{v:7s} {name:12s} {report[name]:.3e}")
        worst = max(worst, max(report.values()))
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def synth_spec(args) -> synthbench.SynthSpec:
    if args.matrix_file:
        if not Path(args.matrix_file).exists():
            raise InputError(f"matrix file not found: {args.matrix_file}")
        P = synthbench.read_matrix(args.matrix_file)
    elif args.random_matrix is not None:
        P = synthbench.random_matrix(args.K, args.random_matrix)
    else:
        P = None
    try:
        return synthbench.SynthSpec(K=args.K, M=args.M, T=args.T, U=args.users, P=P, seed=args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_synth(args) -> int:
    spec = synth_spec(args)
    out = _outdir(args.out, "synth")
    events = synthbench.generate(spec)
    with open(out / "events.tsv", "w", encoding="utf-8", newline="\n") as fh:
        datapipe.write_canonical(events, fh)
    (out / "spec.txt").write_text(spec.to_text(), encoding="utf-8")
    ds = datapipe.leave_one_out_split(events)
    datapipe.save_split(ds, out / FILES["split"])
    try:
        protocol = evaluator.EvalProtocol(negatives=args.negatives or None,
                                          cutoffs=_cutoffs(args.cutoffs), seed=args.eval_seed)
        oracle = synthbench.bayes_oracle(spec, ds, protocol)
    except (ValueError, evaluator.ProtocolError) as exc:
        raise InputError(f"oracle protocol infeasible: {exc}") from None
    text = "\n".join(oracle.lines()) + "\n"
    (out / "oracle.txt").write_text(text, encoding="utf-8")
    write_config(vars(args), out / FILES["config"], "synth")
    print(datapipe.format_stats(datapipe.dataset_stats(ds), "synthetic"))
    print(text, end="")
    return 0


def cmd_sweep(args) -> int:
    values = vars(args)
    ds = load_data(args.data)
    out = _outdir(args.out, "sweep")
    key, kind = ("lam", float) if args.param == "lambda" else ("L", int)
    try:
        grid = [kind(x) for x in args.values.replace(",", " ").split()]
    except ValueError:
        raise InputError(f"bad sweep values {args.values!r}") from None
    if not grid:
        raise InputError("empty sweep grid")
    rows = []
    for v in grid:
        ckpt = _train_once({**values, key: v}, ds, _outdir(None, out / f"{args.param}={v}"))
        cfg = ckpt.config
        item_head = models.RANKING_HEADS[cfg.variant][0]
        if item_head is not None:
            ranks = evaluator.evaluate(ckpt.params, ds, cfg.protocol((5,)), "test", cfg.combine_heads,
                                       trainer._eval_eps(cfg)).ranks
        else:
            ranks = evaluator.category_ranks(evaluator.model_scorer(ckpt.params, "cat"), ds, "test",
                                             max_len=cfg.max_len)
        hit5 = evaluator.mean_metric(evaluator.hit_at_n, ranks, 5)
        ndcg5 = evaluator.mean_metric(evaluator.ndcg_at_n, ranks, 5)
        rows.append({"value": v, "hit5": hit5, "ndcg5": ndcg5,
                     "val_ndcg5": ckpt.best_val_ndcg5, "best_epoch": ckpt.epoch})
        print(f"{args.param}={v}: Hit@5 {hit5:.4f}  NDCG@5 {ndcg5:.4f}")
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "value", "hit5", "ndcg5", "val_ndcg5", "best_epoch"])
        for r in rows:
            w.writerow([args.param, r["value"], repr(r["hit5"]), repr(r["ndcg5"]),
                        repr(r["val_ndcg5"]), r["best_epoch"]])
    write_config(values, out / FILES["config"], "sweep")
    plots.plot_sweep(rows, args.param, out / "sweep.png")
    return 0


# ----------------------------------------------------------------- parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    """Training flags; destinations match TrainConfig fields. None keeps its default."""
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--data", help="split cache file or prepared directory")
    p.add_argument("--variant", choices=models.VARIANTS)
    p.add_argument("--lambda", dest="lam", type=float, help="KL weight")
    p.add_argument("--L", type=int, help="sliding window length")
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int, help="embedding and hidden size (even)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--negatives", type=int, help="validation negatives per user")
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--max-len", type=int, help="keep only the most recent n history steps at evaluation")
    p.add_argument("--sample-at-eval", action="store_true", default=None,
                   help="draw latent noise at evaluation instead of using the mean")
    p.add_argument("--combine-heads", action="store_true", default=None,
                   help="rank items by the sum of both item heads' log-probabilities")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqtrans", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}

    p = sub.add_parser("prepare", help="filter and split an interaction log")
    p.add_argument("--config")
    p.add_argument("--input", required=True, help="canonical TSV, or the movielens ratings file or directory")
    p.add_argument("--format", choices=("canonical", "movielens"), default="canonical")
    p.add_argument("--movies", help="movies.dat (defaults to the ratings file's directory)")
    p.add_argument("--genre-rule", choices=("first", "random_seeded"), default="first")
    p.add_argument("--seed", type=int, default=0, help="used by --genre-rule random_seeded")
    p.add_argument("--item-min", type=int, default=5)
    p.add_argument("--user-min", type=int, default=5)
    p.add_argument("--user-min-records", type=int, default=0)
    p.add_argument("--filter-mode", choices=("fixpoint", "single"), default="fixpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prepare)
    parser.commands["prepare"] = p

    p = sub.add_parser("train", help="train one variant")
    _train_flags(p)
    p.set_defaults(func=cmd_train)
    parser.commands["train"] = p

    p = sub.add_parser("evaluate", help="rank held-out items for a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--variant", choices=models.VARIANTS, help="refuse checkpoints of another variant")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--negatives", type=int, help="0 ranks against every unvisited item")
    p.add_argument("--cutoffs", help="e.g. 1,5,10,15,20")
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    parser.commands["evaluate"] = p

    p = sub.add_parser("gradcheck", help="finite-difference check on the built-in tiny instance")
    p.add_argument("--config")
    p.add_argument("--variant", choices=(*models.VARIANTS, "all"), default="all")
    p.set_defaults(func=cmd_gradcheck)
    parser.commands["gradcheck"] = p

    p = sub.add_parser("synth", help="generate a synthetic category-walk dataset")
    p.add_argument("--config")
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--M", type=int, default=25)
    p.add_argument("--T", type=int, default=30)
    p.add_argument("--users", type=int, default=2000)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--det-cycle", action="store_true", help="deterministic k -> k+1 cycle (default)")
    g.add_argument("--matrix-file", help="whitespace-separated K x K transition matrix")
    g.add_argument("--random-matrix", type=int, metavar="SEED", help="Dirichlet rows drawn from SEED")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--negatives", type=int, default=100, help="oracle protocol; 0 means all unvisited")
    p.add_argument("--cutoffs")
    p.add_argument("--eval-seed", type=int, default=2020)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)
    parser.commands["synth"] = p

    p = sub.add_parser("sweep", help="train and test over a lambda or L grid")
    _train_flags(p)
    p.add_argument("--param", choices=("lambda", "L"), required=True)
    p.add_argument("--values", required=True, help="e.g. 1,5,10,15,20")
    p.set_defaults(func=cmd_sweep)
    parser.commands["sweep"] = p
    return parser


def parse(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse flags; a --config file supplies defaults that explicit flags override."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser.commands[args.command]
        sub.set_defaults(**read_config(args.config, sub, args.command))
        # required flags may now come from the file
        for action in sub._actions:
            if action.required and action.dest in sub._defaults:
                action.required = False
        args = parser.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
