"""``crow`` command line: synth, train, generate, density, analyze, verify.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage error.
Every subcommand is a pure function of its arguments and seed, so repeated
runs write byte-identical files.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from crow import presets
from crow.errors import CrowError
from crow.flow import FlowConfig, init_model, sequence_generate, sequence_log_density
from crow.harness import io
from crow.harness.frames import write_frames_pgm
from crow.harness.stats import GroupStats, group_analysis
from crow.harness.synth import Dataset, synth_moving_blob, synth_regime
from crow.harness.verify import run_all
from crow.numerics import Rng
from crow.training import METRIC_FIELDS, TrainConfig, train

log = logging.getLogger("crow")


class UsageError(Exception):
    """Bad arguments discovered after parsing; maps to exit code 2."""


def load_config(path) -> tuple[dict, dict]:
    """``{"flow": {...}, "train": {...}}`` JSON; field names mirror FlowConfig/TrainConfig.

    A bare name such as ``blob-toy`` that is not a file resolves to a shipped preset.
    """
    if not Path(path).exists():
        try:
            path = presets.path(str(path))
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "flow" not in raw:
        raise UsageError(f"{path}: config needs a 'flow' section")
    unknown = set(raw) - {"flow", "train", "description"}
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    for section, cls in (("flow", FlowConfig), ("train", TrainConfig)):
        extra = set(raw.get(section, {})) - set(cls.__dataclass_fields__)
        if extra:
            raise UsageError(f"{path}: unknown {section} fields {sorted(extra)}")
    return dict(raw["flow"]), dict(raw.get("train", {}))


def frame_grid(cfg: FlowConfig, grid=None) -> tuple[int, int]:
    if grid:
        return int(grid[0]), int(grid[1])
    if cfg.split.kind == "checkerboard":
        return cfg.split.rows, cfg.split.cols
    side = math.isqrt(cfg.d_x)
    if side * side != cfg.d_x:
        raise UsageError(f"d_x={cfg.d_x} is not square; pass --grid ROWS COLS")
    return side, side


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    rng = Rng(args.seed)
    if args.kind == "blob":
        ds = synth_moving_blob(args.n, args.t, tuple(args.grid or (12, 12)), rng,
                               random_rows=args.random_rows)
    else:
        ds = synth_regime(args.n, args.t, args.d, rng, delta=args.delta, noise=args.noise)
    io.save_dataset(ds, args.out)
    print(f"wrote {args.kind} dataset: n={args.n}, T={args.t}, d_x={ds.meta['d_x']} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    flow_d, train_d = load_config(args.config)
    ds = io.load_dataset(args.data)
    flow_d.setdefault("d_x", ds.meta["d_x"])
    flow_d.setdefault("d_y", ds.meta["d_y"])
    if args.seed is not None:
        flow_d["seed"] = train_d["seed"] = args.seed
    if args.max_steps is not None:
        train_d["max_steps"] = args.max_steps
    flow = FlowConfig.from_dict(flow_d)
    tcfg = TrainConfig.from_dict(train_d)
    model = init_model(flow, Rng(flow.seed))
    ckpt = Path(str(args.out) + ".last-good")

    def checkpoint(m, epoch):
        io.save_model(m, ckpt)
        return str(ckpt)

    model, metrics = train(model, ds, tcfg, Rng(tcfg.seed).spawn(1),
                           checkpoint=checkpoint if args.checkpoint else None)
    io.save_model(model, args.out)
    metrics_path = args.metrics or str(args.out) + ".metrics.csv"
    io.write_rows_csv(metrics_path, METRIC_FIELDS,
                      [[r["epoch"]] + [float(r[k]) for k in METRIC_FIELDS[1:]] for r in metrics])
    last = metrics[-1] if metrics else {}
    print(f"trained {len(metrics)} epoch(s); final "
          + ", ".join(f"{k}={last[k]:.4g}" for k in METRIC_FIELDS[1:] if k in last)
          + f" -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    model = io.load_model(args.model)
    cfg = model.config
    cond = io.read_conditions_csv(args.conditions)
    if cond.shape[1] != cfg.d_y:
        raise UsageError(f"conditions have {cond.shape[1]} columns, model expects d_y={cfg.d_y}")
    frames = sequence_generate(model, cond, Rng(args.seed), n=args.n)
    covs = np.broadcast_to(cond, frames.shape[:2] + (cfg.d_y,)).copy()
    meta = {"kind": "generated", "seed": args.seed, "source_model": Path(args.model).name}
    if args.frames:
        rows, cols = frame_grid(cfg, args.grid)
        clipped = 0
        for i, seq in enumerate(frames):
            clipped += write_frames_pgm(seq, (rows, cols), Path(args.frames) / f"seq_{i}")["clipped_pixels"]
        meta["pgm_clipped_pixels"] = clipped
        meta.update(rows=rows, cols=cols)
    io.save_dataset(Dataset(frames, covs, meta), args.out)
    print(f"generated {frames.shape[0]} sequence(s) of T={frames.shape[1]} -> {args.out}")
    return 0


def cmd_density(args) -> int:
    model = io.load_model(args.model)
    ds = io.load_dataset(args.data)
    if ds.meta["d_x"] != model.config.d_x:
        raise UsageError(f"data d_x={ds.meta['d_x']} does not match model d_x={model.config.d_x}")
    logdet, dens = sequence_log_density(model, ds.frames)
    rows = [(i, t + 1, float(logdet[i, t]), float(dens[i, t]))
            for i in range(logdet.shape[0]) for t in range(logdet.shape[1])]
    io.write_rows_csv(args.out, ("seq_id", "t", "logdet", "log_density"), rows)
    print(f"wrote {len(rows)} density rows -> {args.out}")
    return 0


def cmd_analyze(args) -> int:
    a, b = io.load_dataset(args.group_a), io.load_dataset(args.group_b)
    T = min(a.meta["T"], b.meta["T"])
    if not 1 <= args.t_index <= T:
        raise UsageError(f"--t-index must be in 1..{T}")
    k = args.t_index - 1
    stats = group_analysis(a.frames[:, k], b.frames[:, k], args.alpha)
    io.write_rows_csv(args.out, GroupStats.HEADER, stats.rows())
    print(f"{len(stats.flagged)} of {stats.t.size} features significant at "
          f"Bonferroni alpha={args.alpha}: {stats.flagged} -> {args.out}")
    return 0


def cmd_verify(args) -> int:
    config = None
    if args.config:
        flow_d, _ = load_config(args.config)
        config = FlowConfig.from_dict(flow_d)
    checks = run_all(config, seed=args.seed)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"verification FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(checks)} checks passed")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crow", description="Conditional recurrent normalizing flow toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--kind", choices=("blob", "regime"), required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--t", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"), help="blob grid (default 12 12)")
    s.add_argument("--random-rows", action="store_true", help="blob: random row per sequence")
    s.add_argument("--d", type=int, default=82, help="regime feature count")
    s.add_argument("--delta", type=float, default=0.5, help="regime drift per step")
    s.add_argument("--noise", type=float, default=0.1, help="regime noise sigma")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int, help="override train.max_steps")
    s.add_argument("--metrics", help="metrics CSV path (default <out>.metrics.csv)")
    s.add_argument("--checkpoint", action="store_true", help="keep <out>.last-good after each epoch")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("generate", help="sample sequences for a covariate path")
    s.add_argument("--model", required=True)
    s.add_argument("--conditions", required=True, help="CSV with header t,y_1,...,y_k")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", help="directory for PGM frames (seq_<i>/frame_<t>.pgm)")
    s.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"))
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("density", help="per-step exact log-density of a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_density)

    s = sub.add_parser("analyze", help="per-feature Welch t-test between two generated groups")
    s.add_argument("--group-a", required=True)
    s.add_argument("--group-b", required=True)
    s.add_argument("--t-index", type=int, required=True, help="1-based time step to compare")
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("verify", help="run the invariant and oracle suite")
    s.add_argument("--config", help="also round-trip a random model of this config")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"crow: error: {exc}", file=sys.stderr)
        return 2
    except (CrowError, OSError, ValueError) as exc:
        print(f"crow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
