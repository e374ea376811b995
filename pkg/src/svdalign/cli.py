"""Command-line entry points: train, eval, diagnose, cost.

All errors surface on stderr with a nonzero exit code; argparse handles
usage errors itself (exit 2).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import checkpoint as ckpt
from .config import DATASETS, load_config, validate_config
from .errors import ConfigError, CorruptCheckpointError, DataFormatError
from .trainer import (
    config_from_fingerprint,
    evaluate,
    load_dataset,
    restore_state,
    run_training,
)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svdalign",
                                description="Train low-rank factored networks "
                                            "with local feedback-driven updates.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run training, write metrics CSV and checkpoint")
    t.add_argument("--config", required=True, help="path to a key = value config file")
    t.add_argument("--method", default=None,
                   help="override the config's training method")
    t.add_argument("--seed", type=int, default=None, help="override the config's seed")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")

    e = sub.add_parser("eval", help="print test accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, choices=DATASETS,
                   help="dataset to evaluate on")
    e.add_argument("--data-dir", default=None)

    d = sub.add_parser("diagnose",
                       help="alignment study: ssa vs dfa vs bp on the 3-layer MLP")
    d.add_argument("--epochs", type=int, default=5)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-dir", default="./runs")

    c = sub.add_parser("cost", help="print per-layer parameter and MAC counts")
    c.add_argument("--checkpoint", required=True)
    return p


def _restore_from_checkpoint(path: str):
    """Rebuild (config, network state) from a checkpoint's own fingerprint."""
    raw = ckpt.load_checkpoint(path)
    cfg = config_from_fingerprint(raw["fingerprint"])
    dataset = load_dataset(cfg)
    state = restore_state(cfg, dataset, path)
    return cfg, state


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.method is not None:
        cfg = dataclasses.replace(cfg, method=args.method)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    validate_config(cfg)
    result = run_training(cfg, resume_path=args.resume, write_outputs=True,
                          log=lambda s: print(s, flush=True))
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"final test accuracy: {last.test_accuracy:.4f}")
    print(f"metrics: {result.csv_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    raw = ckpt.load_checkpoint(args.checkpoint)
    cfg = config_from_fingerprint(raw["fingerprint"])
    if args.data_dir is not None:
        cfg = dataclasses.replace(cfg, data_dir=args.data_dir)
    # rebuild the network against its own training dataset geometry,
    # then score on the requested dataset
    train_ds = load_dataset(cfg)
    state = restore_state(cfg, train_ds, args.checkpoint)
    if args.dataset == cfg.dataset:
        ds = train_ds
    else:
        ds = load_dataset(dataclasses.replace(cfg, dataset=args.dataset))
        if ds.x_test.shape[1:] != train_ds.x_test.shape[1:]:
            raise ConfigError(
                f"dataset {args.dataset} has input shape {ds.x_test.shape[1:]} "
                f"but the checkpoint was trained on {cfg.dataset} with input "
                f"shape {train_ds.x_test.shape[1:]}")
    acc = evaluate(state.net, ds.x_test, ds.y_test)
    print(f"test accuracy: {acc:.4f}")
    return 0


def _cmd_diagnose(args) -> int:
    from .config import RunConfig
    base = RunConfig(dataset="synthetic-spiral", architecture="mlp3",
                     epochs=args.epochs, seed=args.seed, out_dir=args.out_dir,
                     diag_probe=True)
    dataset = load_dataset(base)
    for method in ("ssa", "dfa", "bp"):
        cfg = dataclasses.replace(base, method=method)
        validate_config(cfg)
        result = run_training(cfg, dataset=dataset, write_outputs=True,
                              run_name=f"diagnose_{method}")
        final = result.records[-1]
        angles = [f"{lm.grad_alignment_deg:.2f}"
                  for lm in final.layers if lm.grad_alignment_deg is not None]
        print(f"{method}: final-epoch alignment angles [deg]: {', '.join(angles)}"
              f"  (csv: {result.csv_path})")
    return 0


def cost_table(net) -> str:
    rows = [("layer", "kind", "rank", "params", "macs_per_sample")]
    total_p = total_m = 0
    for i, layer in enumerate(net.layers):
        if not layer.trainable:
            continue
        p, m = layer.cost()
        total_p += p
        total_m += m
        rank = str(layer.fw.rank) if layer.factored else "-"
        rows.append((str(i), layer.kind, rank, str(p), str(m)))
    rows.append(("total", "", "", str(total_p), str(total_m)))
    widths = [max(len(r[k]) for r in rows) for k in range(5)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    return "\n".join(lines)


def _cmd_cost(args) -> int:
    _, state = _restore_from_checkpoint(args.checkpoint)
    print(cost_table(state.net))
    return 0


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval,
             "diagnose": _cmd_diagnose, "cost": _cmd_cost}


def cli_run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        field = f" (field: {exc.field})" if getattr(exc, "field", None) else ""
        print(f"error: {exc}{field}", file=sys.stderr)
        return 1
    except (CorruptCheckpointError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(cli_run(sys.argv[1:]))
