"""Command line interface: ``mtlpath {prepare,train,evaluate,compare,gradcheck}``.

Exit codes are 0 on success, 1 when a check fails (gradient check, data
digest mismatch), 2 for usage, schema and configuration errors and 3 for I/O
errors. Every subcommand accepts ``--config FILE`` holding ``key = value``
lines; explicit flags override the file, which overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .dataio import (
    DatasetSplit,
    SchemaConfig,
    SchemaError,
    Vocabulary,
    build_vocab,
    group_by_user,
    load_samples,
    mine_windows,
    parse_csv,
    save_samples,
    split_by_user,
)
from .metrics import compare_table, grid_csv
from .model import ARCHITECTURES, CheckpointFormatError, ConfigError, ModelConfig, init_params, load_checkpoint
from .train import TrainConfig, batch_loss, evaluate, run_comparison, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
DATA_FILES = ("train.jsonl", "test.jsonl", "vocab.csv")
GRADCHECK_TOY = dict(vocab_size=4, embed_dim=6, hidden_units=5, n=3, m=2)


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _int_list(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


# ---------------------------------------------------------------- config file


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key = value")
        out[key.strip().replace("_", "-")] = value.strip()
    return out


def _file_args(sub: argparse.ArgumentParser, settings: dict[str, str], path) -> list[str]:
    """Turn config-file entries into flags that sit before the real ones."""
    argv = []
    for key, value in settings.items():
        action = sub._option_string_actions.get("--" + key)
        if action is None or key == "config":
            raise UsageError(f"{path}: unknown key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append("--" + key)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"{path}: {key} expects a boolean, got {value!r}")
        else:
            argv += ["--" + key, value]
    return argv


# ---------------------------------------------------------------- prepare


def cmd_prepare(args) -> int:
    out = Path(args.out)
    rows = parse_csv(args.input, SchemaConfig.for_granularity(args.granularity), encoding=args.encoding)
    if not rows:
        raise UsageError(f"{args.input}: no usable interaction rows ({rows.dropped} dropped)")
    vocab = build_vocab(rows)
    samples = mine_windows(rows, vocab, args.n, args.m, args.stride)
    users = len(group_by_user(rows))
    if samples:
        split = split_by_user(samples, args.split, args.seed)
    else:
        print(
            f"warning: no user has n + m = {args.n + args.m} interactions; 0 windows written",
            file=sys.stderr,
        )
        split = DatasetSplit([], [], args.seed, args.split, [], [])

    out.mkdir(parents=True, exist_ok=True)
    save_samples(split.train, out / "train.jsonl")
    save_samples(split.test, out / "test.jsonl")
    vocab.save(out / "vocab.csv")
    stats = {
        "version": __version__,
        "input": str(args.input),
        "input_sha256": sha256_file(args.input),
        "granularity": args.granularity,
        "n": args.n,
        "m": args.m,
        "stride": args.stride,
        "split": args.split,
        "seed": args.seed,
        "users": users,
        "windows": len(samples),
        "train_windows": len(split.train),
        "test_windows": len(split.test),
        "train_users": len(split.train_users),
        "test_users": len(split.test_users),
        "skipped_users": samples.skipped_users,
        "vocab_size": len(vocab),
        "dropped_rows": rows.dropped,
        "duplicate_rows": rows.duplicates,
        "files": {name: sha256_file(out / name) for name in DATA_FILES},
    }
    _write_json(out / "stats.json", stats)
    print(
        f"users={users} windows={len(samples)} train={len(split.train)} test={len(split.test)} "
        f"vocab={len(vocab)} dropped={rows.dropped} duplicates={rows.duplicates}"
    )
    return EXIT_OK


# ---------------------------------------------------------------- data loading


def load_dataset(data_dir) -> tuple[dict, DatasetSplit, dict[str, str]]:
    """Read a prepared directory, refusing files whose digest changed since preparation."""
    data = Path(data_dir)
    stats = json.loads((data / "stats.json").read_text(encoding="utf-8"))
    digests = {}
    for name in DATA_FILES:
        digests[name] = sha256_file(data / name)
        expected = stats.get("files", {}).get(name)
        if digests[name] != expected:
            raise CheckFailure(f"{data / name}: content changed since prepare (sha256 {digests[name][:12]}, expected {str(expected)[:12]})")
    tr, te = load_samples(data / "train.jsonl"), load_samples(data / "test.jsonl")
    split = DatasetSplit(tr, te, stats["seed"], stats["split"], sorted({s.user_id for s in tr}), sorted({s.user_id for s in te}))
    if len(Vocabulary.load(data / "vocab.csv")) != stats["vocab_size"]:
        raise CheckFailure(f"{data}: vocab.csv disagrees with stats.json")
    return stats, split, digests


def _model_config(args, stats: dict, arch: str, m: int | None = None) -> ModelConfig:
    return ModelConfig(
        vocab_size=stats["vocab_size"],
        embed_dim=args.embed_dim,
        hidden_units=args.hidden,
        n=stats["n"],
        m=stats["m"] if m is None else m,
        architecture=arch,
    )


def _train_config(args, checkpoint=None) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        seed=args.seed,
        eval_every=args.eval_every,
        checkpoint=checkpoint,
    )


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    stats, split, digests = load_dataset(args.data)
    if not split.train:
        raise UsageError(f"{args.data}: training set is empty")
    mc = _model_config(args, stats, args.arch)
    out = Path(args.out)
    tc = _train_config(args, checkpoint=str(out))
    out.parent.mkdir(parents=True, exist_ok=True)

    manifest_path = Path(str(out) + ".manifest.json")
    manifest = {
        "command": "train",
        "version": __version__,
        "seed": args.seed,
        "data": str(args.data),
        "inputs_sha256": digests,
        "model_config": asdict(mc),
        "train_config": asdict(tc),
        "checkpoint": str(out),
        "started": _now(),
        "finished": None,
    }
    _write_json(manifest_path, manifest)

    log_path = Path(args.log or str(out) + ".log")
    jsonl = open(args.jsonl, "w", encoding="utf-8") if args.jsonl else None
    try:
        with open(log_path, "w", encoding="utf-8") as lf:

            def on_epoch(rec):
                line = rec.log_line()
                lf.write(line + "\n")
                lf.flush()
                print(line, flush=True)
                if jsonl:
                    jsonl.write(rec.json_line() + "\n")

            res = train(split, mc, tc, on_epoch)
    finally:
        if jsonl:
            jsonl.close()

    manifest.update(finished=_now(), best_epoch=res.best_epoch, checkpoint_sha256=sha256_file(out))
    if res.best_report is not None:
        manifest["best_report"] = res.best_report.as_dict()
    _write_json(manifest_path, manifest)
    print(f"checkpoint={out} best_epoch={res.best_epoch}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    store, mc = load_checkpoint(args.ckpt)
    stats, split, _ = load_dataset(args.data)
    if (stats["vocab_size"], stats["n"], stats["m"]) != (mc.vocab_size, mc.n, mc.m):
        raise UsageError(
            f"checkpoint expects |T|={mc.vocab_size}, n={mc.n}, m={mc.m} but {args.data} has "
            f"|T|={stats['vocab_size']}, n={stats['n']}, m={stats['m']}"
        )
    if args.no_repeat:
        mc = mc.replace(no_repeat_decoding=True)
    samples = split.test if args.split == "test" else split.train
    report = evaluate(store, mc, samples)
    row = {"architecture": mc.architecture, "m": mc.m, "split": args.split, **report.as_dict()}
    for key, value in row.items():
        print(f"{key}={value:.6f}" if isinstance(value, float) else f"{key}={value}")
    if args.csv:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow({k: "" if v is None else v for k, v in row.items()})
        Path(args.csv).write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- compare


def _dir_for_length(root: Path, m: int) -> Path:
    sub = root / f"m{m}"
    if (sub / "stats.json").exists():
        return sub
    if (root / "stats.json").exists() and json.loads((root / "stats.json").read_text())["m"] == m:
        return root
    raise UsageError(f"{root}: no prepared data for m={m} (expected {sub}/ or a top-level dataset with m={m})")


def cmd_compare(args) -> int:
    root = Path(args.data)
    archs = args.archs.split(",") if args.archs else list(ARCHITECTURES)
    unknown = [a for a in archs if a not in ARCHITECTURES]
    if unknown:
        raise UsageError(f"unknown architecture {unknown[0]!r}; valid tags: {', '.join(ARCHITECTURES)}")
    splits, shapes = {}, set()
    for m in args.lengths:
        stats, split, _ = load_dataset(_dir_for_length(root, m))
        if not split.train:
            raise UsageError(f"m={m}: training set is empty")
        splits[m] = split
        shapes.add((stats["vocab_size"], stats["n"]))
    if len(shapes) != 1:
        raise UsageError(f"prepared lengths disagree on (|T|, n): {sorted(shapes)}")
    base = _model_config(args, stats, archs[0], m=args.lengths[0])
    result = run_comparison(splits, base, _train_config(args), archs, args.seeds)

    for seed in args.seeds:
        for m in sorted(splits):
            print(f"seed={seed} m={m}")
            print(compare_table(result.reports_for(seed, m)))
            print()
    out = Path(args.out) if args.out else root / "compare_grid.csv"
    out.write_text(grid_csv(result.grid), encoding="utf-8")
    print(f"grid={out} rows={len(result.grid)}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def gradcheck_arch(arch: str, seed: int, h: float, corrupt_op: str | None = None) -> float:
    """Max relative error of the full weighted loss on the toy configuration."""
    mc = ModelConfig(architecture=arch, **GRADCHECK_TOY)
    rng = np.random.default_rng(seed)
    T, n, m = mc.vocab_size, mc.n, mc.m
    x, y, c = rng.integers(0, T, (4, n)), rng.integers(0, T, (4, m)), rng.integers(0, 2, (4, m))
    store = init_params(mc, seed)

    def f(s):
        return batch_loss(s, mc, x, y, c, 0.5, 0.1).graph

    with nx.corrupt_backward(corrupt_op) if corrupt_op else contextlib.nullcontext():
        return nx.gradcheck(f, store, h=h, max_coords=None, seed=seed)


def cmd_gradcheck(args) -> int:
    archs = list(ARCHITECTURES) if args.arch == "all" else [args.arch]
    failed = []
    t0 = time.perf_counter()
    for arch in archs:
        err = gradcheck_arch(arch, args.seed, args.h, args.corrupt_op)
        ok = err < args.tol
        print(f"{arch:<20} max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed.append(arch)
    print(f"{len(archs) - len(failed)}/{len(archs)} passed in {time.perf_counter() - t0:.1f}s (tol {args.tol:g})")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; explicit flags take precedence")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="mtlpath", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sp = subs.add_parser("prepare", parents=[common], help="mine windows from an interaction log")
    sp.add_argument("--input", required=True, help="interaction CSV")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int, default=10, help="history length")
    sp.add_argument("--m", type=int, default=3, help="path length")
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--granularity", choices=("problem", "skill"), default="problem")
    sp.add_argument("--split", type=float, default=0.8, help="fraction of users for training")
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--encoding", default="utf-8", help="text encoding of the CSV (tutor exports are often latin-1)")
    sp.set_defaults(func=cmd_prepare)

    def training_flags(q):
        q.add_argument("--epochs", type=int, default=100)
        q.add_argument("--batch", type=int, default=32)
        q.add_argument("--lr", type=float, default=1e-3)
        q.add_argument("--lambda1", type=float, default=0.5, help="weight of the correctness loss")
        q.add_argument("--lambda2", type=float, default=0.1, help="weight of the repetition penalty")
        q.add_argument("--seed", type=int, default=42)
        q.add_argument("--embed-dim", type=int, default=128)
        q.add_argument("--hidden", type=int, default=64)
        q.add_argument("--eval-every", type=int, default=1, help="epochs between test evaluations (0 disables)")

    sp = subs.add_parser("train", parents=[common], help="train one architecture")
    sp.add_argument("--data", required=True, help="directory written by prepare")
    sp.add_argument("--arch", default="multitask_lstm", help=f"one of: {', '.join(ARCHITECTURES)}")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="epoch log path (default CKPT.log)")
    sp.add_argument("--jsonl", help="also write epoch records as JSON lines here")
    training_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = subs.add_parser("evaluate", parents=[common], help="score a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--no-repeat", action="store_true", help="forbid revisiting a concept within a path")
    sp.add_argument("--csv", help="write the report as a one-row CSV")
    sp.set_defaults(func=cmd_evaluate)

    sp = subs.add_parser("compare", parents=[common], help="train every architecture at every path length")
    sp.add_argument("--data", required=True, help="directory with m<M>/ subdirectories (or one prepared dataset)")
    sp.add_argument("--lengths", type=_int_list, default=[3, 5, 7, 9])
    sp.add_argument("--seeds", type=_int_list, default=[42])
    sp.add_argument("--archs", help="comma-separated subset of architectures")
    sp.add_argument("--out", help="grid CSV path (default DATA/compare_grid.csv)")
    training_flags(sp)
    sp.set_defaults(func=cmd_compare)

    sp = subs.add_parser("gradcheck", parents=[common], help="finite-difference self-test")
    sp.add_argument("--arch", default="all", help="architecture tag or 'all'")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--h", type=float, default=3e-3, help="finite-difference step")
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    # the file may supply required flags, so find it before the real parse
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    command = next((t for t in rest if not t.startswith("-")), None)
    if known.config and command in commands:
        extra = _file_args(commands[command], read_config_file(known.config), known.config)
        at = argv.index(command) + 1
        argv = argv[:at] + extra + argv[at:]
    return parser.parse_args(argv)


def _validate(args) -> None:
    arch = getattr(args, "arch", None)
    if arch is not None and arch not in ARCHITECTURES and not (args.command == "gradcheck" and arch == "all"):
        raise UsageError(f"unknown architecture {arch!r}; valid tags: {', '.join(ARCHITECTURES)}")
    if args.command == "gradcheck" and not 1e-5 <= args.h <= 1e-2:
        raise UsageError("--h must lie in [1e-5, 1e-2]")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        _validate(args)
        return args.func(args)
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except CheckpointFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, SchemaError, ConfigError, nx.ContractError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
