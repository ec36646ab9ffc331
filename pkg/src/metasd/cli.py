"""Command-line entry point: ``metasd train|eval|export|data-stats``.

Every failure prints one line ``metasd: error[CODE]: message`` on stderr and
exits nonzero; CODE is one of the keys of :data:`EXIT_CODES`.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import EmptySplitError, evaluate, long_tail_report, write_report
from .graph import (TripleParseError, VocabularyError, build_filter_index, load_dataset,
                    long_tail_relations, relation_counts, resolve_dataset_dir)
from .pruning import SparseFormatError, export_sparse, load_sparse, sparsity_stats
from .training import ConfigError, TrainConfig, TrainingDiverged, student_params, train

log = logging.getLogger("metasd")

EXIT_CODES = {"E_USAGE": 2, "E_CONFIG": 3, "E_DATA": 4, "E_CHECKPOINT": 5, "E_DIVERGED": 6,
              "E_IO": 7}

_PAPER = dict(backbone="ComplEx", dim=2000, gamma=0.9, alpha=0.5, beta=0.5, lam=0.1, mu=1e-4,
              optimizer="adagrad", mask_mode="dynamic", meta_enabled=True)

PRESETS = {
    "fb15k237-paper": dict(_PAPER),
    "wn18rr-paper": dict(_PAPER),
    "toy-smoke": dict(dim=16, gamma=0.9, epochs=3, batch_size=256, quiz_size=100,
                      n3_weight=0.01, eval_every=1),
    # the desk-scale end-to-end configuration
    "toy-desk": dict(dim=64, gamma=0.9, epochs=100, batch_size=512, quiz_size=200,
                     n3_weight=0.02, eval_every=10),
    "wo-prune": dict(mask_mode="random_frozen", meta_enabled=True),
    "wo-meta": dict(mask_mode="dynamic", meta_enabled=False),
    "wo-prune-meta": dict(mask_mode="random_frozen", meta_enabled=False),
}

# flag name -> TrainConfig field
OVERRIDES = {"gamma": "gamma", "alpha": "alpha", "beta": "beta", "lambda": "lam", "mu": "mu",
             "dim": "dim", "backbone": "backbone", "epochs": "epochs",
             "batch-size": "batch_size", "quiz-size": "quiz_size"}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metasd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"metasd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train teacher and pruned student")
    t.add_argument("--data", required=True, help="dataset directory (or name under $METASD_DATA_DIR)")
    t.add_argument("--config", help="JSON file with TrainConfig keys")
    t.add_argument("--preset", action="append", choices=sorted(PRESETS), default=[],
                   help="apply a named preset; repeatable, later ones win")
    t.add_argument("--out", default="runs/latest", help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    for flag, field in OVERRIDES.items():
        kind = str if field == "backbone" else (int if field in ("dim", "epochs", "batch_size",
                                                                   "quiz_size") else float)
        t.add_argument(f"--{flag}", dest=field, type=kind)

    e = sub.add_parser("eval", help="evaluate a checkpoint or sparse export")
    e.add_argument("model", help="checkpoint (.msdk) or sparse export (.msds)")
    e.add_argument("--data", required=True)
    view = e.add_mutually_exclusive_group()
    view.add_argument("--student", action="store_true", help="evaluate the pruned student only")
    view.add_argument("--teacher", action="store_true", help="evaluate the dense teacher only")
    e.add_argument("--split", default="test", choices=("valid", "test"))
    e.add_argument("--long-tail", type=int, metavar="THRESHOLD",
                   help="also report relations with fewer training triples than THRESHOLD")
    e.add_argument("--out", help="write the report as JSON")
    e.add_argument("--threads", type=int, default=1)

    x = sub.add_parser("export", help="write the student of a checkpoint as a sparse file")
    x.add_argument("checkpoint")
    x.add_argument("--out", required=True)

    s = sub.add_parser("data-stats", help="dataset counts and long-tail histogram")
    s.add_argument("data")
    s.add_argument("--long-tail", type=int, default=1000, metavar="THRESHOLD")
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> TrainConfig:
    """Defaults <- presets <- config file <- --set <- dedicated flags."""
    values = {}
    for name in args.preset:
        values.update(PRESETS[name])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("E_CONFIG", f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError("E_CONFIG", f"{args.config}: expected a JSON object")
        values.update(loaded)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError("E_CONFIG", f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = _parse_value(raw)
    for field in list(OVERRIDES.values()) + ["seed", "threads"]:
        if getattr(args, field, None) is not None:
            values[field] = getattr(args, field)
    try:
        return TrainConfig.from_dict(values)
    except (ConfigError, ValueError, TypeError) as exc:
        raise CliError("E_CONFIG", str(exc)) from exc


def _load_data(path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise CliError("E_DATA", str(exc)) from exc
    except (TripleParseError, VocabularyError) as exc:
        raise CliError("E_DATA", str(exc).strip("'\"")) from exc


def _json_line(record) -> str:
    def fix(x):
        if isinstance(x, dict):
            return {str(k): fix(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [fix(v) for v in x]
        if isinstance(x, (np.floating, np.integer)):
            return x.item()
        return x
    return json.dumps(fix(record), sort_keys=True)


def _epoch_summary(record) -> str:
    s, t = record["student"], record["teacher"]
    line = (f"epoch {record['epoch']:4d}  student ce {s.get('ce', math.nan):.4f}  "
            f"teacher ce {t.get('ce', math.nan):.4f}  flips {record['mask_flips']}")
    if "valid" in record:
        v = record["valid"]
        line += f"  valid mrr T {v['teacher']['mrr']:.4f} S {v['student']['mrr']:.4f}"
    return line


def cmd_train(args) -> int:
    config = resolve_config(args)
    data = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state = _load_checkpoint(args.resume)
        if state.params.entity_count != data.entity_count:
            raise CliError("E_CHECKPOINT", f"{args.resume} was trained on a different dataset")
    try:
        splits = data.splits(config.quiz_size, config.seed, config.quiz_overlap)
    except ValueError as exc:
        raise CliError("E_CONFIG", str(exc)) from exc

    manifest = {
        "config": config.to_dict(),
        "dataset": {"path": str(resolve_dataset_dir(args.data)), "digest": data.digest,
                    "entities": data.entity_count, "relations": data.relation_count},
        "code_version": __version__,
        "start_time": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "output_dir": str(out.resolve()),
        "threads": config.threads,
        "presets": args.preset,
        "resumed_from": args.resume,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    metrics = out / "metrics.jsonl"
    mode = "a" if state is not None else "w"
    checkpoint = out / "checkpoint.msdk"
    started = time.time()

    with open(metrics, mode) as fh, threadpool_limits(limits=config.threads):
        def on_epoch(st, record):
            fh.write(_json_line(record) + "\n")
            fh.flush()
            save_checkpoint(checkpoint, st)
            print(_epoch_summary(record), flush=True)

        try:
            state = train(splits, config, state=state, on_epoch=on_epoch)
        except TrainingDiverged as exc:
            raise CliError("E_DIVERGED", f"{exc} (artifacts so far kept in {out})") from exc
        except ConfigError as exc:
            raise CliError("E_CONFIG", str(exc)) from exc

    # the trainer's config is what ran; the manifest must agree with it
    assert state.config.to_dict() == manifest["config"]
    if state.mask is not None:
        save_checkpoint(checkpoint, state)
        stored = export_sparse(student_params(state), state.mask, out / "student.msds", config)
        stats = sparsity_stats(state.mask)
        print(f"done in {time.time() - started:.1f}s: {state.epoch} epochs, student keeps "
              f"{stored} of {stats['size']} weights ({1 - stats['sparsity']:.1%}); "
              f"artifacts in {out}")
    else:
        print(f"no training steps run; manifest and empty metrics in {out}")
    return 0


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError("E_CHECKPOINT", f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise CliError("E_CHECKPOINT", str(exc)) from exc


def _load_model(path):
    """``(params, student_params, mask)`` from a checkpoint or a sparse export."""
    p = Path(path)
    if not p.is_file():
        raise CliError("E_CHECKPOINT", f"model file not found: {path}")
    with open(p, "rb") as fh:
        magic = fh.read(4)
    if magic == b"MSDS":
        try:
            params, mask, _ = load_sparse(p)
        except SparseFormatError as exc:
            raise CliError("E_CHECKPOINT", str(exc)) from exc
        return None, params, mask
    state = _load_checkpoint(p)
    return state.params, student_params(state), state.mask


def cmd_eval(args) -> int:
    teacher, student, mask = _load_model(args.model)
    data = _load_data(args.data)
    splits = data.splits(0, 0)
    ref = student if teacher is None else teacher
    if (ref.entity_count, ref.relation_count) != (data.entity_count, data.relation_count):
        raise CliError("E_DATA", f"model has {ref.entity_count} entities/{ref.relation_count} "
                       f"relations, dataset {data.entity_count}/{data.relation_count}")
    views = []
    if not args.student and teacher is not None:
        views.append(("teacher", teacher, None))
    if not args.teacher:
        views.append(("student", student, mask))
    if not views:
        raise CliError("E_USAGE", "a sparse export holds only the student; drop --teacher")
    filt = build_filter_index(splits)
    reports = {}
    with threadpool_limits(limits=args.threads):
        for view, params, m in views:
            try:
                rep = evaluate(params, m, splits, filt, split=args.split, view=view)
            except EmptySplitError as exc:
                raise CliError("E_DATA", str(exc)) from exc
            reports[view] = rep
            extra = f"  params={rep.effective_params}" if rep.effective_params is not None else \
                f"  params={params.size}"
            print(rep.summary() + extra)
            if args.long_tail is not None:
                try:
                    lt = long_tail_report(params, m, splits, filt, args.long_tail, args.split,
                                          train=data.train)
                except EmptySplitError as exc:
                    raise CliError("E_DATA", str(exc)) from exc
                reports[f"{view}_long_tail"] = lt["student" if m is not None else "teacher"]
                reports["long_tail_relations"] = lt["relations"]
                print(f"  long-tail ({len(lt['relations'])} relations < {args.long_tail}): "
                      + reports[f"{view}_long_tail"].summary())
    if args.out:
        write_report(args.out, reports)
    return 0


def cmd_export(args) -> int:
    state = _load_checkpoint(args.checkpoint)
    if state.mask is None:
        raise CliError("E_CHECKPOINT", f"{args.checkpoint} has no mask (no training steps run)")
    stored = export_sparse(student_params(state), state.mask, args.out, state.config)
    print(f"wrote {args.out}: {stored} of {state.params.size} weights")
    return 0


def cmd_data_stats(args) -> int:
    data = _load_data(args.data)
    counts = relation_counts(data.train, data.relation_count)
    tail = long_tail_relations(data.train, args.long_tail, data.relation_count)
    print(f"dataset    {resolve_dataset_dir(args.data)}")
    print(f"entities   {data.entity_count}")
    print(f"relations  {data.relation_count}")
    print(f"train      {len(data.train)}")
    print(f"valid      {len(data.valid)}")
    print(f"test       {len(data.test)}")
    print(f"long-tail  {len(tail)} relations with < {args.long_tail} training triples")
    per_rel = np.array([counts.get(r, 0) for r in range(data.relation_count)])
    edges = [0, 1, 10, 100, 1000, 10000, 100000, np.inf]
    print("training triples per relation:")
    for lo, hi in zip(edges[:-1], edges[1:]):
        n = int(np.count_nonzero((per_rel >= lo) & (per_rel < hi)))
        label = f"[{lo}, {hi})" if np.isfinite(hi) else f"[{lo}, inf)"
        print(f"  {label:>16} {n:6d} {'#' * min(n, 60)}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export,
            "data-stats": cmd_data_stats}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"metasd: error[{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.code]
    except OSError as exc:
        print(f"metasd: error[E_IO]: {exc}", file=sys.stderr)
        return EXIT_CODES["E_IO"]


if __name__ == "__main__":
    sys.exit(main())
