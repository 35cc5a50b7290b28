"""Command line surface: synth, train, ablate, encode, index, query, eval.

Every subcommand is a pure function of its input files, flags, and seed;
outputs (including figures) are byte-identical across reruns. Wall-clock
timing columns stay blank unless --timing is passed, since they are the
one thing a rerun cannot reproduce. Exit codes: 0 success, 2 validation
or config error, 3 numerical abort; failures print one JSON line on
stderr: {"error": <kind>, "message": <text>}.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, data, model, plots, retrieval
from . import train as train_mod
from .errors import (
    ConfigError,
    DegenerateRowError,
    MvhashError,
    NumericalAbort,
    ShapeError,
    ValidationError,
)

FORMAT_VERSIONS = {
    "mvhf": data.MVHF_VERSION,
    "bank": retrieval.BANK_VERSION,
    "checkpoint": model.CHECKPOINT_VERSION,
}

SPLIT_NAMES = ("train", "retrieval", "query")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}")


def _parse_cutoff(text: str) -> int | None:
    if text == "all":
        return None
    try:
        value = int(text)
    except ValueError:
        raise ConfigError(f"--map-cutoff must be an integer or 'all', got {text!r}")
    if value < 1:
        raise ConfigError(f"--map-cutoff must be >= 1, got {value}")
    return value


def _write_run_record(directory: Path, args: argparse.Namespace, name: str = "run.json") -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    record = {
        "command": args.command,
        "flags": {k: (str(v) if isinstance(v, Path) else v) for k, v in flags.items()},
        "seed": getattr(args, "seed", None),
        "format_versions": FORMAT_VERSIONS,
        "tool_version": __version__,
    }
    directory.mkdir(parents=True, exist_ok=True)
    (directory / name).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _resolve_views(ds: data.MultiViewDataset, spec: str | None) -> tuple[int, ...] | None:
    """Map --views (names or indices) to view index tuple."""
    if spec is None:
        return None
    chosen = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        if token in ds.view_names:
            chosen.append(ds.view_names.index(token))
        else:
            try:
                idx = int(token)
            except ValueError:
                raise ConfigError(
                    f"unknown view {token!r}; dataset has {ds.view_names}")
            if not 0 <= idx < ds.n_views:
                raise ConfigError(f"view index {idx} out of range [0, {ds.n_views})")
            chosen.append(idx)
    if not chosen:
        raise ConfigError("--views selected nothing")
    return tuple(chosen)


def _split_rows(ds: data.MultiViewDataset, which: str) -> np.ndarray:
    if which == "all":
        return np.arange(ds.n_samples)
    rows = ds.split.parts()[which]
    if rows.size == 0:
        raise ValidationError(f"dataset has an empty {which} split")
    return rows


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    dims = _csv_ints(args.dims)
    if args.views is not None and args.views != len(dims):
        raise ConfigError(f"--views {args.views} but --dims lists {len(dims)} widths")
    noise = _csv_floats(args.noise)
    labels = _csv_ints(args.labels)
    if len(labels) == 1:
        labels = labels * 2
    if len(labels) != 2:
        raise ConfigError(f"--labels takes 'n' or 'lo,hi', got {args.labels!r}")
    cfg = data.SynthConfig(
        n_samples=args.n,
        view_dims=tuple(dims),
        n_classes=args.classes,
        labels_per_sample=(labels[0], labels[1]),
        noise_fraction=tuple(noise),
        seed=args.seed,
        class_sep=args.class_sep,
        signal_noise=args.signal_noise,
        noise_scale=args.noise_scale,
        correlated_noise=args.correlated_noise,
        view_signal_scale=tuple(_csv_floats(args.view_scale)) if args.view_scale else None,
    )
    ds = data.synth(cfg)
    if args.split:
        sizes = _csv_ints(args.split)
        if len(sizes) != 3:
            raise ConfigError(f"--split takes train,retrieval,query; got {args.split!r}")
    else:
        n_train = int(0.6 * args.n)
        n_retr = int(0.3 * args.n)
        sizes = [n_train, n_retr, args.n - n_train - n_retr]
    ds = data.split(ds, tuple(sizes), args.seed)
    out = Path(args.out)
    manifest = data.save(ds, out)
    _write_run_record(out, args)
    print(f"wrote {manifest} ({ds.n_samples} samples, {ds.n_views} views, "
          f"{ds.n_classes} classes)")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_config_from_args(args) -> train_mod.TrainConfig:
    return train_mod.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        mu=args.mu,
        seed=args.seed,
        eval_every=args.eval_every,
        clip_norm=args.clip,
        normalize=args.normalize,
        include_diagonal=args.sim_diagonal,
    )


def cmd_train(args) -> None:
    ds = data.load(args.manifest)
    train_config = _train_config_from_args(args)
    cutoff = _parse_cutoff(args.map_cutoff)

    resume = None
    if args.resume:
        resume = model.load_checkpoint(args.resume)
        stored = resume.meta.get("train_config", {})
        if stored.get("seed") is not None and stored["seed"] != args.seed:
            raise ConfigError(
                f"--resume checkpoint was trained with seed {stored['seed']}, "
                f"got --seed {args.seed}; resumed runs must keep the seed")
        model_config = resume.config
    else:
        adaptive = args.adaptive if args.adaptive is not None else args.fusion != "concat"
        model_config = model.ModelConfig(
            view_dims=ds.view_dims,
            n_classes=ds.n_classes,
            d=args.dim,
            k=args.bits,
            use_gate=args.gate,
            use_adaptive=adaptive,
            use_dilation=args.dilation,
            views_enabled=_resolve_views(ds, args.views),
            fusion=args.fusion,
            shared_gate=args.shared_gate,
        )

    clock = time.perf_counter if args.timing else None
    result = train_mod.train(ds, model_config, train_config, resume=resume,
                             clock=clock, map_cutoff=cutoff)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.save_checkpoint(out / "model.ckpt")
    train_mod.write_metrics_csv(result.records, out / "metrics.csv")
    if args.plot and result.records:
        plots.save_curves(result.records, out / "curves.svg")
    _write_run_record(out, args)
    if result.records:
        last = result.records[-1]
        map_txt = f" map={last.map:.4f}" if last.map is not None else ""
        print(f"trained to epoch {result.final_epoch}: "
              f"l_total={last.l_total:.6f}{map_txt}")
    else:
        print(f"checkpoint already at epoch {result.final_epoch}; nothing to do")
    print(f"wrote {out / 'model.ckpt'} and {out / 'metrics.csv'}")


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def ablation_variants(ds: data.MultiViewDataset) -> list[tuple[str, dict]]:
    """The ablation matrix: single views, concat, plain sum, no gate,
    no dilation, and the full model."""
    variants: list[tuple[str, dict]] = []
    for m, name in enumerate(ds.view_names):
        variants.append((f"only-{name}", {"views_enabled": (m,)}))
    variants.append(("concat", {"fusion": "concat", "use_adaptive": False}))
    variants.append(("sum", {"use_adaptive": False}))
    variants.append(("no-gate", {"use_gate": False}))
    variants.append(("no-dilation", {"use_dilation": False}))
    variants.append(("full", {}))
    return variants


def cmd_ablate(args) -> None:
    ds = data.load(args.manifest)
    if ds.n_views < 2:
        raise ConfigError("the ablation matrix needs a dataset with >= 2 views")
    if ds.split.query.size == 0 or ds.split.retrieval.size == 0:
        raise ValidationError("ablation needs non-empty query and retrieval splits")
    bits_list = _csv_ints(args.bits)
    cutoff = _parse_cutoff(args.map_cutoff)
    variants = ablation_variants(ds)

    rows = []  # (variant, bits, seed, map)
    for bits in bits_list:
        for vname, overrides in variants:
            for r in range(args.repeats):
                seed = args.seed + r
                mcfg = model.ModelConfig(
                    view_dims=ds.view_dims, n_classes=ds.n_classes,
                    d=args.dim, k=bits, **overrides)
                tcfg = train_mod.TrainConfig(
                    epochs=args.epochs, batch_size=args.batch,
                    learning_rate=args.lr, optimizer=args.optimizer,
                    mu=args.mu, seed=seed, eval_every=0,
                    normalize=args.normalize)
                result = train_mod.train(ds, mcfg, tcfg)
                views = data.apply_view_stats(ds.views, result.view_stats) \
                    if result.view_stats else ds.views
                score = train_mod.evaluate_map(
                    result.params, mcfg, views, ds.labels,
                    ds.split.query, ds.split.retrieval, cutoff=cutoff)
                rows.append((vname, bits, seed, score))
                print(f"{vname:>16} {bits:>4} bits seed {seed}: map={score:.4f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs_csv = ["variant,bits,seed,map"]
    runs_csv += [f"{v},{b},{s},{m!r}" for v, b, s, m in rows]
    (out / "ablation_runs.csv").write_text("\n".join(runs_csv) + "\n")

    # median per (variant, bits)
    table: dict[str, dict[int, float]] = {v: {} for v, _ in variants}
    for vname, _ in variants:
        for bits in bits_list:
            scores = [m for v, b, _, m in rows if v == vname and b == bits]
            table[vname][bits] = float(np.median(scores))
    pivot_csv = ["variant," + ",".join(f"{b}_bits" for b in bits_list)]
    for vname, _ in variants:
        pivot_csv.append(
            vname + "," + ",".join(repr(table[vname][b]) for b in bits_list))
    (out / "ablation.csv").write_text("\n".join(pivot_csv) + "\n")

    name_w = max(len(v) for v, _ in variants) + 2
    text = [f"{'variant':<{name_w}}" + "".join(f"{f'{b} bits':>12}" for b in bits_list)]
    for vname, _ in variants:
        text.append(f"{vname:<{name_w}}"
                    + "".join(f"{table[vname][b]:>12.4f}" for b in bits_list))
    (out / "ablation.txt").write_text("\n".join(text) + "\n")
    if args.plot:
        plots.save_ablation_chart(table, out / "ablation.svg")
    _write_run_record(out, args)
    print((out / "ablation.txt").read_text(), end="")


# ---------------------------------------------------------------------------
# encode / index / query / eval
# ---------------------------------------------------------------------------

def _load_params_for_encoding(checkpoint_path):
    ckpt = model.load_checkpoint(checkpoint_path)
    return ckpt.params(), ckpt.config, train_mod.stats_from_checkpoint(ckpt)


def cmd_encode(args) -> None:
    params, config, stats = _load_params_for_encoding(args.checkpoint)
    ds = data.load(args.manifest)
    if tuple(ds.view_dims) != tuple(config.view_dims):
        raise ConfigError(
            f"dataset views {ds.view_dims} do not match checkpoint "
            f"{config.view_dims}")
    views = data.apply_view_stats(ds.views, stats) if stats else ds.views
    rows = _split_rows(ds, args.split)
    codes = train_mod.encode_rows(params, config, views, rows)
    bank = retrieval.CodeBank(retrieval.pack(codes), config.k,
                              np.zeros((rows.size, 0), dtype=np.uint8))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    retrieval.save_bank(bank, out)
    _write_run_record(out.parent, args, name=out.name + ".run.json")
    print(f"wrote {rows.size} codes ({config.k} bits) to {out}")


def cmd_index(args) -> None:
    codes = retrieval.load_bank(args.codes)
    ds = data.load(args.manifest)
    rows = _split_rows(ds, args.split)
    if codes.n != rows.size:
        raise ValidationError(
            f"codes file has {codes.n} rows, {args.split} split has {rows.size}")
    bank = retrieval.CodeBank(codes.words, codes.k, ds.labels[rows].astype(np.uint8))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    retrieval.save_bank(bank, out)
    _write_run_record(out.parent, args, name=out.name + ".run.json")
    print(f"indexed {bank.n} codes with {bank.labels.shape[1]} label columns to {out}")


def cmd_query(args) -> None:
    bank = retrieval.load_bank(args.bank)
    queries = retrieval.load_bank(args.queries)
    if queries.k != bank.k:
        raise ShapeError(f"queries have k={queries.k}, bank has k={bank.k}")
    topk = args.topk
    if topk < 1:
        raise ConfigError(f"--topk must be >= 1, got {topk}")
    rows = [args.row] if args.row is not None else range(queries.n)
    lines = []
    for qi in rows:
        if not 0 <= qi < queries.n:
            raise ConfigError(f"--row {qi} out of range [0, {queries.n})")
        dist = retrieval.distances(queries.words[qi], bank.words)
        order = np.argsort(dist, kind="stable")[:topk]
        for bi in order:
            lines.append(f"{qi}\t{bi}\t{dist[bi]}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_run_record(out.parent, args, name=out.name + ".run.json")
        print(f"wrote {len(lines)} rows to {out}")
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> None:
    bank = retrieval.load_bank(args.bank)
    queries = retrieval.load_bank(args.queries)
    if queries.labels.shape[1] == 0:
        raise ValidationError(
            "query file has no labels; build one with the index command")
    report = retrieval.evaluate(queries, bank, cutoff=_parse_cutoff(args.map_cutoff))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict(include_timing=args.timing)
    (out / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / "precision.csv").write_text(report.precision_csv())
    if args.plot:
        plots.save_precision_curve(report.precision_at, out / "precision.svg")
    _write_run_record(out, args)
    print(f"map={report.map:.6f} over {report.n_queries} queries "
          f"against {report.n_retrieval} items (cutoff={doc['cutoff']})")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvhash",
        description="Gated multi-view hashing: synthesize data, train, "
                    "encode, index, and evaluate binary codes.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    Bool = argparse.BooleanOptionalAction

    p = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--dims", required=True, help="comma list, one width per view")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--noise", default="0", help="noise dimension fraction per view")
    p.add_argument("--labels", default="1", help="labels per sample: n or lo,hi")
    p.add_argument("--class-sep", type=float, default=1.0)
    p.add_argument("--signal-noise", type=float, default=1.0)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--correlated-noise", action="store_true",
                   help="drive noise dims half from a latent shared across views")
    p.add_argument("--view-scale", default=None, help="signal scale per view")
    p.add_argument("--split", default=None, help="train,retrieval,query sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bits", type=int, default=16)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=train_mod.OPTIMIZERS, default="adam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gate", action=Bool, default=True)
    p.add_argument("--shared-gate", action=Bool, default=False,
                   help="one gate parameter set shared by all views")
    p.add_argument("--adaptive", action=Bool, default=None,
                   help="trainable view weights (defaults on, off for concat)")
    p.add_argument("--dilation", action=Bool, default=True)
    p.add_argument("--views", default=None, help="enable only these views")
    p.add_argument("--fusion", choices=model.FUSION_KINDS, default="weighted_sum")
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--clip", type=float, default=0.0)
    p.add_argument("--normalize", action=Bool, default=True)
    p.add_argument("--sim-diagonal", action=Bool, default=True)
    p.add_argument("--map-cutoff", default="all")
    p.add_argument("--resume", default=None)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--plot", action=Bool, default=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bits", default="16", help="comma list of code widths")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=train_mod.OPTIMIZERS, default="adam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action=Bool, default=True)
    p.add_argument("--map-cutoff", default="all")
    p.add_argument("--timing", action="store_true")
    p.add_argument("--plot", action=Bool, default=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("encode", help="binarize a split with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES + ("all",), default="query")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="attach labels to codes, making a bank")
    p.add_argument("--codes", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES + ("all",), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="rank bank items for query codes")
    p.add_argument("--bank", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--row", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="mAP and precision@R of queries vs a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--map-cutoff", default="all")
    p.add_argument("--timing", action="store_true")
    p.add_argument("--plot", action=Bool, default=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def _fail(kind: str, err: Exception) -> None:
    print(json.dumps({"error": kind, "message": str(err)}), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (NumericalAbort, DegenerateRowError) as e:
        _fail("numerical", e)
        return 3
    except (ValidationError, ShapeError) as e:
        _fail("validation", e)
        return 2
    except MvhashError as e:
        _fail("error", e)
        return 2
    except FileNotFoundError as e:
        _fail("validation", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
