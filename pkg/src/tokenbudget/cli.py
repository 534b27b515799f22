"""Command-line surface: run, synth, grad-check, train-toy, sweep, stats.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.  Every
command is deterministic given its flags and seed; report files are
JSON, human-readable tables go to stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bvtk
from .autodiff import Tensor
from .errors import BudgetError, ConfigError, DimensionError, FormatError, TrainingError
from .gradcheck import run_checks
from .pipeline import (
    PipelineConfig,
    PipelineParams,
    PipelineTrace,
    run,
    synth_generate,
    synth_stream,
    sweep,
    train_toy,
)
from .selector import TextContext, VideoTokens

_DEFAULTS = PipelineConfig()
_GRAD_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse, but argument problems are validation failures (exit 1)."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_json(path: str, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_video(directory: str) -> VideoTokens:
    d = Path(directory)
    return VideoTokens(
        cls=Tensor(bvtk.read_tensor(d / "cls.bvtk")),
        body=Tensor(bvtk.read_tensor(d / "body.bvtk")),
    )


def _cmd_run(args) -> int:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    video = _load_video(args.video)
    text = TextContext(tokens=Tensor(bvtk.read_tensor(args.text)))
    if args.params:
        params, cfg = PipelineParams.load(args.params)
    else:
        params = PipelineParams.create(cfg)
    sequence, trace = run(video, text, params, cfg)
    bvtk.write_tensor(args.out, sequence.data)
    trace.save(args.trace)
    print(f"wrote {sequence.shape[0]} rows ({trace.final_token_count} visual tokens) to {args.out}")
    return 0


def _cmd_synth(args) -> int:
    planted = [int(p) for p in args.planted.split(",") if p != ""]
    instance = synth_generate(
        seed=args.seed,
        frames=args.frames,
        tokens=args.tokens,
        dim=args.dim,
        planted=planted,
        noise=args.noise,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bvtk.write_tensor(out / "cls.bvtk", instance.video.cls.data)
    bvtk.write_tensor(out / "body.bvtk", instance.video.body.data)
    bvtk.write_tensor(out / "text.bvtk", instance.text.tokens.data)
    _write_json(out / "labels.json", {"planted": instance.planted, "seed": instance.seed})
    print(f"wrote {args.frames} frames x {args.tokens} tokens (dim {args.dim}) to {out}")
    return 0


def _cmd_grad_check(args) -> int:
    errors = run_checks(args.module, seed=args.seed)
    worst = 0.0
    for name in sorted(errors):
        print(f"{name:55s} max rel err {errors[name]:.3e}")
        worst = max(worst, errors[name])
    if worst >= _GRAD_TOLERANCE:
        print(f"FAIL: max relative error {worst:.3e} >= {_GRAD_TOLERANCE:.0e}")
        return 1
    print(f"OK: all gradients within {_GRAD_TOLERANCE:.0e} (worst {worst:.3e})")
    return 0


def _cmd_train_toy(args) -> int:
    cfg = PipelineConfig(
        select_frames=args.select_frames,
        spatial_tokens=_DEFAULTS.spatial_tokens,
        dim=args.dim,
        seed=args.seed,
        mode="soft",
    )
    params = PipelineParams.create(cfg)
    stream = synth_stream(args.seed + 1, args.frames, args.tokens, args.dim, args.planted_count)
    report = train_toy(stream, params, cfg, steps=args.steps, lr=args.lr)
    payload = report.to_json_dict()
    payload.update({"steps": args.steps, "lr": args.lr, "seed": args.seed})
    _write_json(args.report, payload)
    print(
        f"trained {args.steps} steps (lr {args.lr}); final selection accuracy {report.final_accuracy:.3f}"
    )
    return 0


def _parse_grid(spec: str) -> tuple[list[int], list[int]]:
    try:
        left, right = spec.lower().split("x")
        return [int(v) for v in left.split(",")], [int(v) for v in right.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--grid {spec!r}: expected e.g. 4,8,16x4,8,16,32") from exc


def _cmd_sweep(args) -> int:
    select_grid, spatial_grid = _parse_grid(args.grid)
    base = PipelineConfig(seed=args.seed, dim=args.dim)
    rows = sweep(
        select_grid,
        spatial_grid,
        base,
        frames=args.frames,
        tokens=max(args.tokens, max(spatial_grid)),
        steps=args.steps,
        lr=args.lr,
    )
    _write_json(args.report, {"grid": rows})
    print(f"{'frames':>8} {'tokens':>8} {'accuracy':>10} {'pre-budget':>12} {'budgeted':>10}")
    for row in rows:
        print(
            f"{row['select_frames']:>8} {row['spatial_tokens']:>8} {row['accuracy']:>10.3f}"
            f" {row['tokens_before_budget']:>12} {row['token_count']:>10}"
        )
    return 0


def _cmd_stats(args) -> int:
    trace = PipelineTrace.from_file(args.trace)
    counts = trace.stage_counts
    print("stage token counts:")
    print(f"  input                 {counts['input']}")
    print(f"  selected (pre-merge)  {counts['selected']}")
    print(f"  merged                {counts['merged']}")
    print(f"  sampled               {counts['sampled']}")
    print(f"  final                 {counts['final']}")
    print(f"halving rounds: {trace.halving_rounds}")
    uniform = counts["input"]
    final = counts["final"]
    pct = 100.0 * final / uniform if uniform else 0.0
    print(
        f"uniform sampling would feed {uniform} visual tokens; "
        f"the budgeted pipeline feeds {final} ({pct:.1f}% of uniform)"
    )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tokenbudget", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="compress a video/text pair under the token budget")
    p.add_argument("--video", required=True, help="directory holding cls.bvtk and body.bvtk")
    p.add_argument("--text", required=True, help="BVTK file of pre-embedded text rows")
    p.add_argument("--config", default=None, help="pipeline config JSON (defaults when omitted)")
    p.add_argument("--params", default=None, help="parameter checkpoint directory (fresh seeded init when omitted)")
    p.add_argument("--out", required=True, help="output BVTK for the assembled sequence")
    p.add_argument("--trace", required=True, help="output JSON trace")
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("synth", help="generate a synthetic planted-frame instance")
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed, help="rng seed (default %(default)s)")
    p.add_argument("--frames", type=int, default=40, help="video frames L (default %(default)s)")
    p.add_argument("--tokens", type=int, default=16, help="body tokens per frame M (default %(default)s)")
    p.add_argument("--dim", type=int, default=_DEFAULTS.dim, help="embedding dim (default %(default)s)")
    p.add_argument("--planted", required=True, help="comma-separated 0-based frame indices")
    p.add_argument("--noise", type=float, default=0.1, help="cluster spread (default %(default)s)")
    p.add_argument("--out-dir", required=True, help="directory for cls/body/text BVTK and labels.json")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("grad-check", help="compare tape gradients against finite differences")
    p.add_argument(
        "--module",
        choices=["selector", "sampler", "merger", "all"],
        default="all",
        help="which gradients to verify (default %(default)s)",
    )
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed, help="rng seed (default %(default)s)")
    p.set_defaults(handler=_cmd_grad_check)

    p = sub.add_parser("train-toy", help="train the selector on the planted-frame task")
    p.add_argument("--steps", type=int, default=2000, help="training steps (default %(default)s)")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate (default %(default)s)")
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed, help="rng seed (default %(default)s)")
    p.add_argument("--report", required=True, help="output JSON report")
    p.add_argument("--frames", type=int, default=40, help="video frames L (default %(default)s)")
    p.add_argument("--tokens", type=int, default=8, help="body tokens per frame M (default %(default)s)")
    p.add_argument("--dim", type=int, default=_DEFAULTS.dim, help="embedding dim (default %(default)s)")
    p.add_argument(
        "--select-frames",
        type=int,
        default=_DEFAULTS.select_frames,
        help="selection perspectives (default %(default)s)",
    )
    p.add_argument("--planted-count", type=int, default=4, help="planted frames per instance (default %(default)s)")
    p.set_defaults(handler=_cmd_train_toy)

    p = sub.add_parser("sweep", help="accuracy/token table over a select x spatial grid")
    p.add_argument("--grid", required=True, help="grid spec, e.g. 4,8,16x4,8,16,32")
    p.add_argument("--report", required=True, help="output JSON table")
    p.add_argument("--seed", type=int, default=_DEFAULTS.seed, help="rng seed (default %(default)s)")
    p.add_argument("--dim", type=int, default=_DEFAULTS.dim, help="embedding dim (default %(default)s)")
    p.add_argument("--frames", type=int, default=40, help="video frames L (default %(default)s)")
    p.add_argument("--tokens", type=int, default=16, help="body tokens per frame M (default %(default)s)")
    p.add_argument("--steps", type=int, default=400, help="training steps per grid point (default %(default)s)")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate (default %(default)s)")
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("stats", help="print stage token counts from a trace")
    p.add_argument("--trace", required=True, help="trace JSON produced by run")
    p.set_defaults(handler=_cmd_stats)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (OSError, FormatError) as exc:
        print(f"tokenbudget {args.verb}: I/O failure: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"tokenbudget {args.verb}: I/O failure: cannot parse JSON: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"tokenbudget {args.verb}: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DimensionError, BudgetError, ValueError) as exc:
        print(f"tokenbudget {args.verb}: validation failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
