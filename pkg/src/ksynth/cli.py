"""Command-line entry point.

Subcommands: verify | gen-data | train | grid | export-heatmap, each taking
--config PATH, --seed N, --out DIR.  KSYNTH_THREADS caps the BLAS thread
pools (set before numpy loads).  Every command writes a resolved-config
snapshot into the output directory and is byte-reproducible per seed.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("KSYNTH_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


_apply_thread_cap()  # must precede any numpy import


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ksynth",
                                description="kernel-synthesis toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, doc in [
        ("verify", "run the full property suite; nonzero exit on any failure"),
        ("gen-data", "generate the synthetic benchmark clips"),
        ("train", "train the toy network on the synthetic benchmark"),
        ("grid", "grid search over maximum receptive fields"),
        ("export-heatmap", "write per-stage fusion importance CSVs from a checkpoint"),
    ]:
        q = sub.add_parser(name, help=doc)
        q.add_argument("--config", type=Path, default=None,
                       help="flat key=value configuration file")
        q.add_argument("--seed", type=int, default=None,
                       help="overrides train.seed")
        q.add_argument("--out", type=Path, default=Path("out"),
                       help="output directory")
        if name == "export-heatmap":
            q.add_argument("--checkpoint", type=Path, required=True,
                           help="checkpoint directory (manifest + tensor dumps)")
    return p


def _load(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    return cfg


def cmd_verify(args) -> int:
    from .verification import run_checks

    cfg = _load(args)
    inject = bool(os.environ.get("KSYNTH_INJECT_FAULT"))
    results = run_checks(seed=cfg["train.seed"], inject_fault=inject)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(out)
    lines = ["form,check,deviation,threshold,status"]
    for r in results:
        lines.append(r.row())
        print(r.row())
    (out / "verify_report.csv").write_text("\n".join(lines) + "\n")
    n_fail = sum(not r.passed for r in results)
    summary = f"{len(results) - n_fail}/{len(results)} checks passed"
    (out / "verify_report.txt").write_text(
        "\n".join(r.row().replace(",", "  ") for r in results)
        + f"\n{summary}\n")
    print(summary)
    return 1 if n_fail else 0


def cmd_gen_data(args) -> int:
    from .config import templates_from
    from .data import generate_dataset, save_dataset

    cfg = _load(args)
    out = Path(args.out)
    train, val = generate_dataset(templates_from(cfg), cfg["data.n_train"],
                                  cfg["data.n_val"], seed=cfg["train.seed"])
    save_dataset(train, out / "train")
    save_dataset(val, out / "val")
    cfg.write_snapshot(out)
    print(f"wrote {len(train)} train / {len(val)} val clips under {out}")
    return 0


def cmd_train(args) -> int:
    from .config import templates_from, train_config_from
    from .data import generate_dataset
    from .trainer import network_from_config, save_checkpoint, train

    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = train_config_from(cfg)
    train_ds, val_ds = generate_dataset(templates_from(cfg), cfg["data.n_train"],
                                        cfg["data.n_val"], seed=tcfg.seed)
    net = network_from_config(tcfg, train_ds.num_classes)
    result = train(net, train_ds, val_ds, tcfg, log_path=out / "train_log.csv")
    save_checkpoint(net, out / "checkpoint")
    cfg.write_snapshot(out)
    print(f"val top-1 {result['val_top1']:.4f} after {result['epochs_run']} epochs; "
          f"log at {out / 'train_log.csv'}")
    return 0


def cmd_grid(args) -> int:
    from dataclasses import replace

    from .config import templates_from, train_config_from
    from .data import generate_dataset
    from .trainer import grid_search_rfs

    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = replace(train_config_from(cfg),
                   feature_proportion=cfg["grid.feature_proportion"],
                   epochs=cfg["grid.epochs"])
    train_ds, val_ds = generate_dataset(templates_from(cfg), cfg["data.n_train"],
                                        cfg["data.n_val"], seed=tcfg.seed)
    rows = grid_search_rfs(cfg["grid.candidates"], tcfg, train_ds, val_ds)
    with open(out / "grid_results.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["max_spatial", "max_temporal", "pool", "val_top1", "epochs"])
        for r in rows:
            wr.writerow([r["spatial"], r["temporal"], int(r["pool"]),
                         f"{r['val_top1']:.12g}", r["epochs"]])
    cfg.write_snapshot(out)
    for r in rows:
        print(f"{r['spatial']}x{r['spatial']}x{r['temporal']}"
              f"{' +pool' if r['pool'] else ''}: {r['val_top1']:.4f}")
    return 0


def cmd_export_heatmap(args) -> int:
    import numpy as np

    from .io import load_arrays

    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arrays = load_arrays(args.checkpoint)
    wrote = 0
    for name, arr in sorted(arrays.items()):
        if not (name.startswith("block") and name.endswith(".fusion")):
            continue
        stage = name[len("block"):].split(".", 1)[0]
        imp = np.abs(arr).sum(axis=-1)
        path = out / f"heatmap_stage{stage}.csv"
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["i", "j", "l1"])
            for i in range(imp.shape[0]):
                for j in range(imp.shape[1]):
                    wr.writerow([i + 1, j + 1, f"{imp[i, j]:.12g}"])
        wrote += 1
        print(f"wrote {path}")
    if wrote == 0:
        print("checkpoint holds no fusion matrices (no inserted blocks)",
              file=sys.stderr)
        return 1
    cfg.write_snapshot(out)
    return 0


COMMANDS = {
    "verify": cmd_verify,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "grid": cmd_grid,
    "export-heatmap": cmd_export_heatmap,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    from .errors import KsynthError

    try:
        return COMMANDS[args.command](args)
    except KsynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
