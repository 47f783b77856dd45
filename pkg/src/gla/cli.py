"""Command-line entry point: ``gla <command> ...``.

Exit codes: 0 success, 1 validation error (bad config, arguments or
inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from gla.config import ConfigError, ExperimentConfig, parse_config
from gla.tensor import ShapeError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


def _load_config(path) -> ExperimentConfig:
    return parse_config(path) if path else ExperimentConfig()


def parse_frames(text: str) -> list:
    """``"3,17,20-22"`` -> ``[3, 17, 20, 21, 22]``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"bad frame list entry {part!r}") from None
    if not out:
        raise UsageError("empty frame list")
    return out


def _need_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {p}")
    return p


def cmd_gen_data(args) -> int:
    from gla.experiment import generate

    cfg = _load_config(args.config)
    m = generate(cfg, args.out)
    n_train, n_test = len(m.split("train")), len(m.split("test"))
    print(f"wrote {m.frame_count} frames to {args.out} (train {n_train}, test {n_test})")
    return EXIT_OK


def cmd_train(args) -> int:
    from gla.experiment import train

    cfg = _load_config(args.config)
    _need_dir(args.data, "dataset")
    every = max(1, cfg.steps // 20) if cfg.steps else 1

    def progress(step, vals):
        if not args.quiet and (step % every == 0 or step == cfg.steps - 1):
            print(f"step {step:6d}  loss {vals[0]:.5f}  cls {vals[1]:.5f}  box {vals[2]:.5f}", flush=True)

    out = train(cfg, args.data, args.out, progress=progress)
    print(f"checkpoint written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from gla.experiment import cmd_eval as run

    _need_dir(args.ckpt, "checkpoint")
    _need_dir(args.data, "dataset")
    res = run(args.ckpt, args.data, args.out, label=args.label)
    print((Path(args.out) / "results.txt").read_text(), end="")
    print(f"overall mAP {100 * res.map():.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from gla.experiment import cmd_ablate as run

    cfg = _load_config(args.config)
    _need_dir(args.data, "dataset")
    txt, _runs, errors = run(args.suite, cfg, args.data, args.out)
    print(txt, end="")
    for label, err in errors.items():
        print(f"arm {label!r} failed: {err}", file=sys.stderr)
    return EXIT_RUNTIME if errors and len(errors) == len(_runs) else EXIT_OK


def cmd_export_attn(args) -> int:
    from gla.experiment import cmd_export_attn as run

    _need_dir(args.ckpt, "checkpoint")
    _need_dir(args.data, "dataset")
    files = run(args.ckpt, args.data, parse_frames(args.frames), args.out)
    for f in files:
        print(f)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gla", description="Global-local attention fusion detector on simulated adverse weather.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic multimodal dataset")
    g.add_argument("--config", help="experiment config (defaults if omitted)")
    g.add_argument("--out", default="data", help="dataset directory (default: data)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--label", help="row label in the results table")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate an ablation suite")
    a.add_argument("--suite", required=True, choices=["baselines", "partitions", "attention-mode"])
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    x = sub.add_parser("export-attn", help="write attention heatmaps for chosen frames")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--frames", required=True, help="comma list of frame ids, ranges allowed (3,7-9)")
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_attn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.fn(args)
    except (ConfigError, UsageError, ShapeError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
