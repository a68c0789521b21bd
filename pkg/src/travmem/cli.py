"""Command line entry point: ``travmem {run,compare,sweep-lambda,annotate,inspect-memory}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .scene_sim import ConfigError, SessionError

log = logging.getLogger("travmem")

OUT_ENV = "TRAVMEM_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _default_out(args, sub: str) -> Path | None:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV)
    if root and getattr(args, "config", None):
        return Path(root) / f"{Path(args.config).stem}-{sub}"
    return None


def _load(args):
    from .experiment import load_config

    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "strategy", None):
        over["strategy"] = args.strategy
    if getattr(args, "lam", None) is not None:
        over["lam"] = args.lam
    return cfg.with_overrides(**over) if over else cfg


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args)
    out = _default_out(args, "run") or cfg.out or Path("runs") / Path(args.config).stem
    r = run_experiment(cfg, out)
    if not args.quiet:
        agg = r.report.aggregate
        print(f"{r.strategy}: clusters={r.stats['clusters']} stored={r.stats['stored_nodes']} "
              f"auroc={agg['auroc']} iou={agg['iou']} -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .experiment import compare_strategies

    cfg = _load(args)
    out = _default_out(args, "compare") or cfg.out or Path("runs") / f"{Path(args.config).stem}-compare"
    results = compare_strategies(cfg, out)
    if not args.quiet:
        print((out / "comparison.csv").read_text(), end="")
    return EXIT_OK if results else EXIT_RUNTIME


def cmd_sweep(args) -> int:
    from .experiment import sweep_lambda

    cfg = _load(args)
    out = _default_out(args, "sweep") or cfg.out or Path("runs") / f"{Path(args.config).stem}-sweep"
    lambdas = [float(x) for x in args.lambdas.split(",")] if args.lambdas else None
    rows = sweep_lambda(cfg, lambdas, train=args.train or None, out=out)
    if not args.quiet:
        for row in rows:
            print("  ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_annotate(args) -> int:
    from .experiment import annotate
    from .scene_sim import load_recorded_session, save_session
    from ._io import atomic_write_json

    frames, report = [], []
    for f in load_recorded_session(args.session):
        mask = annotate(f, args.mode)
        ok = mask is not None
        report.append({"frame": f.index, "scene_id": f.scene_id, "ok": ok,
                       "mask_pixels": int(mask.sum()) if ok else 0, "prompts": len(f.prompts)})
        f.truth_mask = mask if ok else np.zeros_like(f.truth_mask)
        frames.append(f)
    out = Path(args.out or Path(args.session).with_suffix(".masks.trav"))
    save_session(out, frames)
    atomic_write_json(out.with_suffix(".json"), {"schema": "travmem.annotate", "version": 1,
                                                 "mode": args.mode, "frames": report})
    if not args.quiet:
        failed = sum(not r["ok"] for r in report)
        print(f"annotated {len(report)} frames ({failed} without usable mask) -> {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    snap = json.loads(Path(args.snapshot).read_text())
    if snap.get("schema") != "travmem.memory":
        raise ConfigError("snapshot", "not a travmem memory snapshot")
    lines = [f"strategy={snap['strategy']} version={snap['version']} "
             f"inserted={snap['total_inserted']} clusters={len(snap['clusters'])}"]
    for c in snap["clusters"]:
        scenes = sorted({n["scene_id"] for n in c["nodes"]})
        frames = [n["frame_index"] for n in c["nodes"]]
        lines.append(f"  cluster {c['id']}: {c['size']} nodes, scenes {scenes}, "
                     f"frames {min(frames)}..{max(frames)}")
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="travmem", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="YAML or JSON experiment config")
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<config>-<cmd> or runs/)")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("run", help="train one strategy on a stream and write reports")
    common(sp)
    sp.add_argument("--strategy", choices=("idm", "fifo", "unbounded_random"))
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare", help="run the config's strategies on one frozen stream")
    common(sp)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("sweep-lambda", help="cluster count per divergence threshold")
    common(sp)
    sp.add_argument("--lambdas", help="comma separated values (default from config)")
    sp.add_argument("--train", action="store_true", help="also train and evaluate each point")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("annotate", help="recorded session -> masks (oracle on stored prompts or stored masks)")
    common(sp, config=False)
    sp.add_argument("--session", required=True)
    sp.add_argument("--mode", choices=("oracle", "recorded"), default="oracle")
    sp.set_defaults(func=cmd_annotate)

    sp = sub.add_parser("inspect-memory", help="summarize a memory snapshot")
    sp.add_argument("snapshot")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from .experiment import RunError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, SessionError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
