"""Command-line entry point: train, sample, distill, eval, profile."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fmsd import FmsdConfig, fmsd_run
from .io.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .io.config import RunConfig, allowed_keys, from_dict
from .io.datasets import DATASETS, DatasetError, dataset
from .io.sinks import CsvMetricsSink, image_grid, read_points, write_manifest, write_ppm, write_rows
from .metrics import evaluate
from .model import model_state, noise_encoder_from_state, velocity_net_from_state
from .rk import build_scheme, truncation_order_probe
from .sampler import SOLVERS, sample
from .trainer import ConfigError, fit_cost_profile, train

log = logging.getLogger("catchup")

CHECKPOINT_NAME = "checkpoint.cuck"


class UsageError(Exception):
    pass


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = _parse_value(raw)
    return out


def _load_data(name: str, n: int, seed: int, path: Optional[str]) -> np.ndarray:
    return dataset(name, n, np.random.default_rng(seed), path=path)


def _load_net(path, use_ema: bool = False):
    state = load_checkpoint(path)
    prefix = "ema." if use_ema else "net."
    if not any(k.startswith(prefix) for k in state):
        raise CheckpointError(f"{path}: no '{prefix}' tensors in checkpoint")
    return velocity_net_from_state(state, prefix), state


def cmd_train(args) -> int:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    doc.update(_overrides(args.set))
    doc["seed"] = args.seed
    if args.iters is not None:
        doc["total_iters"] = args.iters
    if args.out is not None:
        doc["output_dir"] = args.out
    cfg: RunConfig = from_dict(doc)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = _load_data(cfg.dataset, cfg.n_data, cfg.data_seed, cfg.dataset_path)
    ckpt = out / CHECKPOINT_NAME

    def save(res):
        extra = {"iterations": res.iterations, "collapsed": float(res.status == "collapse")}
        save_checkpoint(ckpt, model_state(res.net, res.encoder, res.ema, extra))

    with CsvMetricsSink(out / "metrics.csv", out / "timing.csv") as sink:
        res = train(cfg.train, data, [sink], checkpoint_fn=save)
    save(res)
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), {"seed": cfg.train.seed, "data_seed": cfg.data_seed},
                   {"status": res.status, "iterations": res.iterations, "message": res.message})
    print(f"status={res.status} iterations={res.iterations} checkpoint={ckpt}")
    if res.message:
        print(res.message)
    return 0


def cmd_sample(args) -> int:
    net, _ = _load_net(args.checkpoint, args.ema)
    rng = np.random.default_rng(args.seed)
    traj = sample(net, args.solver, args.steps, n=args.n, rng=rng)
    header = f"solver={args.solver} steps={args.steps} nfe={traj.nfe} n={args.n} seed={args.seed}"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = [f"x{k}" for k in range(traj.final.shape[1])]
    write_rows(out, cols, traj.final.tolist(), comments=[header])
    if args.ppm:
        write_ppm(args.ppm, image_grid(traj.final[: args.grid]))
    write_manifest(out.with_suffix(".manifest.json"), "sample", vars_clean(args),
                   {"seed": args.seed}, {"nfe": traj.nfe})
    print(header)
    return 0


def cmd_distill(args) -> int:
    teacher, state = _load_net(args.teacher)
    stages = tuple(int(s) for s in args.stages.split(",") if s.strip())
    cfg = FmsdConfig(stages=stages, n_steps=args.n_steps, n_pairs=args.n_pairs,
                     iters_per_stage=args.iters_per_stage, batch_size=args.batch_size,
                     learning_rate=args.lr, sam=args.sam, seed=args.seed)
    reference = None
    if args.dataset:
        reference = _load_data(args.dataset, args.n_reference, args.data_seed, args.dataset_path)
    res = fmsd_run(teacher, cfg, reference)
    enc = noise_encoder_from_state(state)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model_state(res.student, enc, res.ema))
    rows = [[r.stage, r.final_loss, "" if r.one_step_sliced_w2 is None else r.one_step_sliced_w2]
            for r in res.reports]
    stage_csv = out.with_suffix(".stages.csv")
    comments = [f"pairs={len(res.pairs)} skipped={res.pairs.skipped}"]
    if res.initial_sliced_w2 is not None:
        comments.append(f"initial_one_step_sliced_w2={res.initial_sliced_w2!r}")
    write_rows(stage_csv, ["stage", "final_loss", "one_step_sliced_w2"], rows, comments)
    cfg_doc = asdict(cfg)
    cfg_doc["teacher"] = str(args.teacher)
    write_manifest(out.with_suffix(".manifest.json"), "distill", cfg_doc, {"seed": args.seed, "data_seed": args.data_seed})
    for line in comments:
        print(line)
    for r in rows:
        print(f"stage={r[0]} loss={r[1]:.6g} one_step_sliced_w2={r[2]}")
    return 0


def cmd_eval(args) -> int:
    reference = _load_data(args.dataset, args.n, args.data_seed, args.dataset_path)
    rows = []
    for path in args.samples:
        pts = read_points(path)
        rep = evaluate(pts, reference, args.n_projections, args.metric_seed, args.n)
        row = rep.as_row()
        row = {"file": str(path), **row}
        rows.append(row)
        print(f"{path}: sliced_w2={rep.sliced_w2:.6g} energy={rep.energy_distance:.6g} "
              f"exact_w2={'n/a' if rep.exact_w2 is None else f'{rep.exact_w2:.6g}'} n={rep.n_samples}",
              file=sys.stderr)
    header = list(rows[0])
    if args.out:
        write_rows(args.out, header, [list(r.values()) for r in rows])
        write_manifest(Path(args.out).with_suffix(".manifest.json"), "eval", vars_clean(args),
                       {"data_seed": args.data_seed, "metric_seed": args.metric_seed})
    else:
        print(",".join(header))
        for r in rows:
            print(",".join(repr(v) if isinstance(v, float) else str(v) for v in r.values()))
    return 0


def cmd_profile(args) -> int:
    if not args.scheme and not args.checkpoint:
        raise UsageError("profile needs --scheme and/or --checkpoint")
    out_rows = []
    if args.scheme:
        scheme = build_scheme(args.scheme)
        rows = []
        for j in range(1, scheme.n_align + 1):
            r = truncation_order_probe(scheme, j)
            rows.append([scheme.label, j, r.slope, int(r.reliable)] + r.errors)
        header = ["scheme", "j", "slope", "reliable"] + [f"err_h{k}" for k in range(len(rows[0]) - 4)]
        out_rows.append(("truncation", header, rows))
    if args.checkpoint:
        net, state = _load_net(args.checkpoint)
        enc = noise_encoder_from_state(state)
        if enc is None:
            raise CheckpointError(f"{args.checkpoint}: fit-cost profile needs encoder tensors")
        data = _load_data(args.dataset, args.n, args.data_seed, args.dataset_path)
        bins = fit_cost_profile(net, enc, data, n_bins=args.bins, seed=args.seed)
        out_rows.append(("fitcost", ["t_low", "t_high", "mean_loss"],
                         [[b.t_low, b.t_high, b.mean_loss] for b in bins]))
    for tag, header, rows in out_rows:
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_rows(Path(args.out) / f"{tag}.csv", header, rows)
            write_manifest(Path(args.out) / "manifest.json", "profile", vars_clean(args),
                           {"seed": args.seed, "data_seed": args.data_seed})
        print(",".join(header))
        for row in rows:
            print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    return 0


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="catchup", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a velocity model")
    t.add_argument("--config", help="JSON run config; keys: " + ", ".join(allowed_keys()))
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--iters", type=int)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--solver", choices=SOLVERS, default="euler")
    s.add_argument("--steps", type=int, default=16)
    s.add_argument("--n", type=int, default=4096)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="CSV of sample coordinates")
    s.add_argument("--ema", action="store_true", help="use the EMA weights")
    s.add_argument("--ppm", help="also write a PPM image grid (square image data)")
    s.add_argument("--grid", type=int, default=64, help="images in the PPM grid")
    s.set_defaults(func=cmd_sample)

    d = sub.add_parser("distill", help="final multi-step distillation")
    d.add_argument("--teacher", required=True)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--stages", default="8,11,14")
    d.add_argument("--n-steps", type=int, default=16)
    d.add_argument("--iters-per-stage", type=int, default=2000)
    d.add_argument("--n-pairs", type=int, default=4096)
    d.add_argument("--batch-size", type=int, default=256)
    d.add_argument("--lr", type=float, default=5e-4)
    d.add_argument("--sam", action="store_true", help="add the EMA output alignment term")
    d.add_argument("--dataset", choices=DATASETS, help="reference data for per-stage metrics")
    d.add_argument("--dataset-path")
    d.add_argument("--n-reference", type=int, default=4096)
    d.add_argument("--data-seed", type=int, default=999)
    d.add_argument("--out", required=True, help="output checkpoint path")
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="distances between sample files and reference data")
    e.add_argument("--samples", nargs="+", required=True)
    e.add_argument("--dataset", choices=DATASETS, default="two_moons")
    e.add_argument("--dataset-path")
    e.add_argument("--n", type=int, default=4096)
    e.add_argument("--data-seed", type=int, default=999)
    e.add_argument("--n-projections", type=int, default=128)
    e.add_argument("--metric-seed", type=int, default=1234)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("profile", help="truncation-order and fit-cost tables")
    pr.add_argument("--scheme", choices=["rk12", "rk23", "rk34", "RK12", "RK23", "RK34"])
    pr.add_argument("--checkpoint")
    pr.add_argument("--dataset", choices=DATASETS, default="two_moons")
    pr.add_argument("--dataset-path")
    pr.add_argument("--n", type=int, default=4096)
    pr.add_argument("--data-seed", type=int, default=999)
    pr.add_argument("--bins", type=int, default=10)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", help="directory for CSV tables")
    pr.set_defaults(func=cmd_profile)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, DatasetError, ValueError, OSError,
            FloatingPointError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
