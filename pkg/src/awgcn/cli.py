"""Command-line entry point: ``awgcn <command> [options]``.

Artifacts go to a run directory (``--run-dir``, default ``$AWGCN_OUT`` or
``./awgcn-out``) with a fixed layout::

    run.json                 resolved options of every command run there
    dataset.jsonl            synth / ingest output (unless --out is given)
    graphs.jsonl, dot/       graph output
    model.ckpt, loss.csv     train output
    report.json, confusion.csv
    embeddings.csv
    attention.json, attention/epoch_<n>.json

Failures print one JSON object ``{"error": ..., "message": ...}`` on stderr
and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import warnings
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .graphgen import PROPAGATION_MODES, build_graph, graph_to_dict, to_dot
from .ingest import (
    CallSequence,
    Dataset,
    build_dataset,
    load_jsonl,
    parse_jsonl,
    parse_profile,
    parse_wide_csv,
    relabel,
    write_jsonl,
)
from .model import (
    AwgcnConfig,
    attention_report,
    embed_many,
    load_checkpoint,
    save_checkpoint,
)
from .synthgen import (
    SynSpec,
    default_markov_spec,
    gen_ransyn,
    gen_ranmarkov,
    gen_syndata,
    inject_noise,
    load_markov_spec,
    load_syn_spec,
)
from .train import SplitSpec, TrainOptions, evaluate, fit, graphs_for, label_vector, make_config, split_indices

OUT_ENV = "AWGCN_OUT"
DEFAULT_OUT = "awgcn-out"
DEFAULT_NOISE = {"syndata": 60, "ransyn": 60, "ranmarkov": 0}


class CliError(Exception):
    pass


# --- helpers ------------------------------------------------------------------

def _run_dir(args) -> Path:
    path = Path(args.run_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _record(args, section: str, resolved: dict) -> None:
    """Merge one command's resolved options into run.json."""
    path = _run_dir(args) / "run.json"
    doc = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    doc["version"] = __version__
    doc[section] = resolved
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _recorded(args, section: str) -> dict:
    path = Path(args.run_dir) / "run.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8")).get(section, {})


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_dataset(seqs, path: Path) -> int:
    buf = io.StringIO()
    n = write_jsonl(seqs, buf)
    _write_text(path, buf.getvalue())
    return n


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _load(path) -> Dataset:
    if not Path(path).exists():
        raise CliError(f"dataset {path} does not exist")
    return load_jsonl(path)


def _data_path(args) -> str:
    data = args.data or _recorded(args, "train").get("data")
    if not data:
        raise CliError("no --data given and run.json records no training dataset")
    return data


def _ckpt_path(args) -> Path:
    path = Path(args.ckpt) if args.ckpt else Path(args.run_dir) / "model.ckpt"
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    return path


def _workers(args) -> int:
    return args.workers if args.workers and args.workers > 0 else (os.cpu_count() or 1)


def _find(ds: Dataset, key: str | None, index: int | None) -> CallSequence:
    if key is not None:
        for s in ds.sequences:
            if s.hash == key:
                return s
        raise CliError(f"no sequence with hash {key!r}")
    i = index or 0
    if not 0 <= i < len(ds):
        raise CliError(f"index {i} out of range for {len(ds)} sequences")
    return ds.sequences[i]


# --- commands -----------------------------------------------------------------

def cmd_synth(args) -> None:
    noise = DEFAULT_NOISE[args.kind] if args.noise is None else args.noise
    if args.kind == "ranmarkov":
        spec = load_markov_spec(Path(args.spec).read_text(encoding="utf-8")) if args.spec else default_markov_spec()
        overrides = {"rng_seed": args.seed}
        if args.per_family is not None:
            overrides["per_family"] = args.per_family
        spec = replace(spec, **overrides)
        if noise:
            raise CliError("noise injection needs the alphabet structure of syndata/ransyn")
        ds = gen_ranmarkov(spec)
        resolved = {"states": list(spec.states), "walk_length": spec.walk_length, "per_family": spec.per_family}
    else:
        base = load_syn_spec(Path(args.spec).read_text(encoding="utf-8")) if args.spec else SynSpec()
        overrides = {"rng_seed": args.seed}
        if args.per_family is not None:
            overrides["per_family"] = args.per_family
        spec = replace(base, **overrides)
        ds = (gen_syndata if args.kind == "syndata" else gen_ransyn)(spec)
        ds = inject_noise(ds, spec, noise)
        resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
        resolved["family_alphabets"] = ["".join(a) for a in spec.family_alphabets]
    out = Path(args.out) if args.out else _run_dir(args) / "dataset.jsonl"
    n = _write_dataset(ds.sequences, out)
    _record(args, "synth", {"kind": args.kind, "seed": args.seed, "noise": noise, "spec": resolved, "out": str(out)})
    print(json.dumps({"sequences": n, "out": str(out)}))


def _profile_inputs(paths):
    """Yield (file, default label) pairs; files inside a sub-directory take its name as label."""
    for p in map(Path, paths):
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    yield f, (f.parent.name if f.parent != p else None)
        elif p.is_file():
            yield p, None
        else:
            raise CliError(f"input {p} does not exist")


def _label_map(path) -> dict[str, str]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and [c.strip().lower() for c in rows[0][:2]] == ["hash", "label"]:
        rows = rows[1:]
    return {r[0].strip(): r[1].strip() for r in rows if len(r) >= 2}


def cmd_ingest(args) -> None:
    labels = _label_map(args.labels) if args.labels else {}
    seqs: list[CallSequence] = []
    problems = []
    if args.format == "profile":
        items = list(_profile_inputs(args.inputs))
        parsed, keys = [], []
        for f, dir_label in items:
            s = parse_profile(f.read_text(encoding="utf-8", errors="replace"))
            label = dir_label or args.label or ""
            parsed.append(CallSequence(s.hash, label, s.seq))
            keys.append(f.stem)
        seqs = relabel(parsed, {**{s.hash: s.label for s in parsed}, **labels}, keys) if labels else parsed
    elif args.format == "jsonl":
        for p in args.inputs:
            with open(p, encoding="utf-8") as fh:
                seqs += parse_jsonl(fh, strict=args.strict, errors=problems)
    else:
        for p in args.inputs:
            with open(p, encoding="utf-8", newline="") as fh:
                seqs += parse_wide_csv(fh, hash_col=args.hash_col, label_col=args.label_col)
        if labels:
            seqs = relabel(seqs, labels, [s.hash for s in seqs])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds = build_dataset(seqs)
    out = Path(args.out) if args.out else _run_dir(args) / "dataset.jsonl"
    n = _write_dataset(ds.sequences, out)
    _record(
        args,
        "ingest",
        {"format": args.format, "inputs": list(args.inputs), "labels": args.labels, "label": args.label,
         "hash_col": args.hash_col, "label_col": args.label_col, "strict": args.strict, "out": str(out)},
    )
    print(json.dumps({
        "sequences": n, "dropped": ds.dropped, "skipped_lines": len(problems),
        "labels": list(ds.label_set), "vocabulary": len(ds.vocabulary), "warnings": len(caught), "out": str(out),
    }))


def cmd_graph(args) -> None:
    ds = _load(args.data)
    seqs = [_find(ds, args.hash, None)] if args.hash else ds.sequences
    out = _run_dir(args)
    lines = []
    for s in seqs:
        g = build_graph(s, ds.vocabulary, args.kgram)
        lines.append(json.dumps(graph_to_dict(g, ds.vocabulary), separators=(",", ":")))
        if args.dot:
            _write_text(out / "dot" / f"{_safe(s.hash)}.dot", to_dot(g, ds.vocabulary))
    _write_text(out / "graphs.jsonl", "\n".join(lines) + ("\n" if lines else ""))
    _record(args, "graph", {"data": args.data, "kgram": args.kgram, "hash": args.hash, "dot": args.dot})
    print(json.dumps({"graphs": len(lines), "out": str(out / "graphs.jsonl")}))


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _train_options(args) -> TrainOptions:
    return TrainOptions(
        epochs=args.epochs,
        patience=args.patience,
        min_delta=args.min_delta,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        weight_decay=args.weight_decay,
    )


def _options_dict(opts: TrainOptions) -> dict:
    d = asdict(opts)
    d.pop("workers")  # never changes results, so it stays out of recorded artifacts
    return d


def _training_inputs(ds: Dataset, config: AwgcnConfig, split_spec: SplitSpec):
    tr, te = split_indices(ds, split_spec)
    train = [ds.sequences[i] for i in tr]
    return tr, te, graphs_for(train, ds.vocabulary, config), label_vector(train, ds.label_set, config)


def cmd_train(args) -> None:
    ds = _load(args.data)
    if len(ds.label_set) < 2:
        raise CliError("training needs at least two labels")
    config = make_config(
        ds,
        dims=tuple(args.dims),
        dropout=args.dropout,
        lr=args.lr,
        propagation=args.propagation,
        directed=args.directed,
        kgram=args.kgram,
        seed=args.seed,
    )
    split_spec = SplitSpec(ratio=args.split_ratio, stratified=not args.no_stratify, seed=args.seed)
    opts = _train_options(args)
    tr, te, graphs, y = _training_inputs(ds, config, split_spec)
    result = fit(graphs, y, config, TrainOptions(**{**_options_dict(opts), "workers": _workers(args)}))
    out = _run_dir(args)
    extra = {
        "split": asdict(split_spec),
        "train_options": _options_dict(opts),
        "dataset_sha256": _digest(args.data),
        "epochs_run": len(result.losses),
        "stopped_early": result.stopped_early,
    }
    save_checkpoint(out / "model.ckpt", config, ds.vocabulary, ds.label_set, result.params, extra)
    _write_text(out / "loss.csv", _csv_text([("epoch", "loss")] + [(i, repr(l)) for i, l in enumerate(result.losses)]))
    _record(args, "train", {"data": args.data, "config": config.to_dict(), **extra})
    print(json.dumps({"epochs": len(result.losses), "final_loss": result.losses[-1], "train": len(tr), "test": len(te)}))


def _checked_dataset(args, ckpt) -> tuple[str, Dataset]:
    data = _data_path(args)
    ds = _load(data)
    want = ckpt.extra.get("dataset_sha256")
    if want and want != _digest(data) and not args.data:
        raise CliError(f"{data} changed since training")
    if ds.vocabulary != ckpt.vocabulary:
        raise CliError("dataset vocabulary differs from the checkpoint's")
    return data, ds


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(_ckpt_path(args))
    data, ds = _checked_dataset(args, ckpt)
    if args.split == "test":
        spec = SplitSpec(**ckpt.extra.get("split", {"seed": ckpt.config.seed}))
        _, idx = split_indices(ds, spec)
    else:
        idx = list(range(len(ds)))
    seqs = [ds.sequences[i] for i in idx]
    unknown = sorted({s.label for s in seqs} - set(ckpt.labels))
    if unknown:
        raise CliError(f"labels not seen in training: {unknown}")
    y = np.array([ckpt.labels.index(s.label) for s in seqs])
    report = evaluate(graphs_for(seqs, ds.vocabulary, ckpt.config), y, ckpt.params, ckpt.config, ckpt.labels)
    out = _run_dir(args)
    _write_text(out / "report.json", json.dumps(report.to_dict(), indent=2) + "\n")
    _write_text(out / "confusion.csv", report.confusion_csv())
    _record(args, "eval", {"data": data, "split": args.split})
    print(json.dumps({"n": report.n, "accuracy": report.accuracy, "macro_f1": report.macro_f1, "macro_auc": report.macro_auc}))


def cmd_embed(args) -> None:
    ckpt = load_checkpoint(_ckpt_path(args))
    data, ds = _checked_dataset(args, ckpt)
    latents, _ = embed_many(graphs_for(ds.sequences, ds.vocabulary, ckpt.config), ckpt.params, ckpt.config)
    k = latents.shape[1]
    rows = [["hash", "label"] + [f"z{i}" for i in range(k)]]
    rows += [[s.hash, s.label] + [repr(float(v)) for v in z] for s, z in zip(ds.sequences, latents)]
    out = _run_dir(args)
    _write_text(out / "embeddings.csv", _csv_text(rows))
    _record(args, "embed", {"data": data})
    print(json.dumps({"rows": len(ds), "width": k, "out": str(out / "embeddings.csv")}))


def _attn_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"


def cmd_attn(args) -> None:
    ckpt = load_checkpoint(_ckpt_path(args))
    g = None
    data = None
    if args.hash is not None or args.snapshot_every:
        data, ds = _checked_dataset(args, ckpt)
        if args.hash is not None:
            g = build_graph(_find(ds, args.hash, None), ds.vocabulary, ckpt.config.kgram)
    out = _run_dir(args)
    _write_text(out / "attention.json", _attn_json(attention_report(ckpt.params, ckpt.vocabulary, g)))
    written = 0
    if args.snapshot_every:
        # replay training from the recorded config; the replay must land on the checkpoint
        config = ckpt.config
        spec = SplitSpec(**ckpt.extra["split"])
        opts = TrainOptions(**{**ckpt.extra["train_options"], "workers": _workers(args)})
        _, _, graphs, y = _training_inputs(ds, config, spec)
        snap_dir = out / "attention"

        def on_epoch(epoch, params):
            nonlocal written
            if epoch % args.snapshot_every == 0:
                _write_text(snap_dir / f"epoch_{epoch}.json", _attn_json(attention_report(params, ckpt.vocabulary, g)))
                written += 1

        result = fit(graphs, y, config, opts, on_epoch)
        if any(not np.array_equal(result.params[k], ckpt.params[k]) for k in ckpt.params):
            raise CliError("replayed training does not reproduce the checkpoint")
    _record(args, "attn", {"data": data, "hash": args.hash, "snapshot_every": args.snapshot_every})
    print(json.dumps({"out": str(out / "attention.json"), "snapshots": written}))


def cmd_dot(args) -> None:
    ds = _load(args.data)
    s = _find(ds, args.hash, args.index)
    attn = None
    kgram = args.kgram
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        if ckpt.vocabulary != ds.vocabulary:
            raise CliError("dataset vocabulary differs from the checkpoint's")
        attn = {c["call"]: c["weight"] for c in attention_report(ckpt.params, ckpt.vocabulary)["calls"]}
        kgram = ckpt.config.kgram if args.kgram is None else args.kgram
    g = build_graph(s, ds.vocabulary, kgram or 1)
    out = Path(args.out) if args.out else _run_dir(args) / f"{_safe(s.hash)}.dot"
    _write_text(out, to_dot(g, ds.vocabulary, attn))
    _record(args, "dot", {"data": args.data, "hash": s.hash, "kgram": kgram or 1, "ckpt": args.ckpt, "out": str(out)})
    print(json.dumps({"hash": s.hash, "nodes": g.n, "edges": len(g.edges), "out": str(out)}))


# --- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="single seed all randomness derives from")
    common.add_argument("--workers", type=int, default=0, help="worker threads (default: all cores); never changes results")
    common.add_argument(
        "--run-dir",
        default=os.environ.get(OUT_ENV, DEFAULT_OUT),
        help=f"artifact directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})",
    )

    p = argparse.ArgumentParser(prog="awgcn", description="Attention-weighted GCN over API-call Markov graphs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--kind", choices=sorted(DEFAULT_NOISE), required=True)
    s.add_argument("--noise", type=int, default=None, help="noise test sequences (default 60, 0 for ranmarkov)")
    s.add_argument("--per-family", type=int, default=None)
    s.add_argument("--spec", help="key = value spec file")
    s.add_argument("--out", help="output JSONL (default: <run-dir>/dataset.jsonl)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="convert profiles, JSONL or wide CSV to a JSONL dataset")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--format", choices=("profile", "jsonl", "csv"), required=True)
    s.add_argument("--labels", help="CSV of hash,label pairs (profiles: keyed by file stem or hash)")
    s.add_argument("--label", help="label for profiles not under a family sub-directory")
    s.add_argument("--hash-col", default="hash")
    s.add_argument("--label-col", default="label")
    s.add_argument("--strict", action="store_true", help="fail on the first bad JSONL line")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("graph", parents=[common], help="build Markov graphs")
    s.add_argument("--data", required=True)
    s.add_argument("--kgram", type=int, default=1)
    s.add_argument("--hash", help="only this sequence")
    s.add_argument("--dot", action="store_true", help="also write dot/<hash>.dot")
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--dims", type=int, nargs=3, default=[128, 256, 64], metavar=("K1", "K2", "K3"))
    s.add_argument("--dropout", type=float, default=0.35)
    s.add_argument("--lr", type=float, default=0.005)
    s.add_argument("--propagation", choices=PROPAGATION_MODES, default="transition")
    s.add_argument("--directed", action="store_true")
    s.add_argument("--kgram", type=int, default=1)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--patience", type=int, default=20)
    s.add_argument("--min-delta", type=float, default=1e-2, help="relative loss drop between windows")
    s.add_argument("--batch-size", type=int, default=0, help="0 = full batch")
    s.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    s.add_argument("--weight-decay", type=float, default=1e-2)
    s.add_argument("--split-ratio", type=float, default=0.8)
    s.add_argument("--no-stratify", action="store_true")
    s.set_defaults(func=cmd_train)

    for name, func, text in (
        ("eval", cmd_eval, "evaluate a checkpoint"),
        ("embed", cmd_embed, "write latent vectors"),
        ("attn", cmd_attn, "write the attention report"),
    ):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--ckpt", help="checkpoint (default: <run-dir>/model.ckpt)")
        s.add_argument("--data", help="dataset (default: the one recorded by train)")
        if name == "eval":
            s.add_argument("--split", choices=("test", "all"), default="test")
        if name == "attn":
            s.add_argument("--hash", help="include edge attention for this sequence's graph")
            s.add_argument("--snapshot-every", type=int, default=0, metavar="N",
                           help="replay training and write attention/epoch_<n>.json every N epochs")
        s.set_defaults(func=func)

    s = sub.add_parser("dot", parents=[common], help="render one sequence's graph as DOT")
    s.add_argument("--data", required=True)
    s.add_argument("--hash")
    s.add_argument("--index", type=int)
    s.add_argument("--kgram", type=int, default=None)
    s.add_argument("--ckpt", help="colour nodes by this checkpoint's call attention")
    s.add_argument("--out")
    s.set_defaults(func=cmd_dot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # every failure becomes one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
