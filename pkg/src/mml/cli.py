"""Command-line front door for the whole experimental protocol.

    mml pretrain --strategy average --config cfg.json
    mml compare --run runs/<id> --finetune-fraction 0.1
    mml gradcheck
    mml dataset generate --seed 7 --count 20 --out data/
    mml serve --listen 127.0.0.1:8787

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Config is one JSON file ({"train": {...}, "pipeline": {...}}); a handful of
flags override file values. MML_RUN_DIR sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _run_root(args) -> Path:
    if getattr(args, "run_root", None):
        return Path(args.run_root)
    return Path(os.environ.get("MML_RUN_DIR", "runs"))


def _load_config(path: str | None, overrides: dict):
    from .orchestrator import OrchestratorError, TrainConfig
    from .protocol import pipeline_config_from_dict

    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}")
    train = dict(doc.get("train", {}))
    for key, value in overrides.items():
        if value is not None:
            train[key] = value
    try:
        cfg = TrainConfig.from_dict(train)
        pipe = pipeline_config_from_dict(doc.get("pipeline", {}))
    except (OrchestratorError, TypeError) as exc:
        raise CliError(f"bad config: {exc}")
    return cfg, pipe


def cmd_pretrain(args) -> int:
    from .orchestrator import DivergenceError, MergeStrategy, OrchestratorError
    from .protocol import pretrain_run

    cfg, pipe = _load_config(
        args.config,
        {"seed": args.seed, "rounds": args.rounds, "mini_epoch": args.mini_epoch},
    )
    strategy = MergeStrategy(args.strategy)

    def report(event: dict) -> None:
        if event.get("type") == "round":
            models = event["models"]
            mean_pre = sum(m["pre_val_map"] for m in models) / len(models)
            mean_post = sum(m["post_val_map"] for m in models) / len(models)
            print(
                f"round {event['round']}: val mAP {mean_pre:.4f} -> {mean_post:.4f} (merged)"
            )

    try:
        run_dir = pretrain_run(
            cfg,
            strategy,
            _run_root(args),
            pipe=pipe,
            run_id=args.run_id,
            with_baseline=not args.no_baseline,
            on_event=report,
        )
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OrchestratorError as exc:
        raise CliError(str(exc))
    print(f"run complete: {run_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .orchestrator import DivergenceError, OrchestratorError
    from .protocol import compare_run

    try:
        report = compare_run(
            args.run,
            finetune_fraction=args.finetune_fraction,
            finetune_passes=args.passes,
        )
    except DivergenceError as exc:
        print(f"fine-tuning diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OrchestratorError as exc:
        raise CliError(str(exc))
    print(report.to_markdown())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .modules import PipelineConfig
    from .protocol import grad_check_all_assemblies

    pipe = PipelineConfig(
        channels=args.channels,
        image_size=args.image_size,
        grid_size=args.grid_size,
        n_queries=args.queries,
    )
    reports = grad_check_all_assemblies(
        pipe, seed=args.seed, eps=args.eps, tol=args.tol,
        max_samples_per_param=args.samples,
    )
    ok = True
    for aid, rep in reports.items():
        status = "pass" if rep.passed else "FAIL"
        print(f"{status}  {aid}  max-rel-err {rep.max_rel_err:.2e}")
        ok = ok and rep.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_dataset_generate(args) -> int:
    from .world import default_rig, export_sequence, sequence_for_id

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rig = default_rig()
    rig.save(out / "rig.json")
    for i in range(args.count):
        seq = sequence_for_id(args.seed, i)
        export_sequence(seq, rig, out / f"seq-{i}")
    print(f"wrote {args.count} sequences to {out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    host, _, port_s = args.listen.rpartition(":")
    if not host or not port_s.isdigit():
        raise CliError(f"bad listen address {args.listen!r}, expected host:port")
    ui_dir = args.ui or _default_ui_dir()
    app = create_app(_run_root(args), ui_dir=ui_dir)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, int(port_s)))
    except OSError as exc:
        raise CliError(f"cannot bind {args.listen}: {exc}")
    bound = sock.getsockname()
    print(f"listening on {bound[0]}:{bound[1]}")
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning"))
    server.run(sockets=[sock])
    return EXIT_OK


def _default_ui_dir() -> str | None:
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return str(candidate) if candidate.is_dir() else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="round-based pretraining of all assemblies")
    p.add_argument("--strategy", choices=["average", "softmax", "greedy"], default="average")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--run-root", help="output root (default $MML_RUN_DIR or ./runs)")
    p.add_argument("--run-id")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--mini-epoch", type=int, dest="mini_epoch")
    p.add_argument("--no-baseline", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("compare", help="fine-tune and evaluate a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--finetune-fraction", type=float, default=None)
    p.add_argument("--passes", type=int, default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference suite over all assemblies")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--image-size", type=int, default=16, dest="image_size")
    p.add_argument("--grid-size", type=int, default=8, dest="grid_size")
    p.add_argument("--queries", type=int, default=8)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    g = dsub.add_parser("generate", help="materialize seeded sequences to disk")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_dataset_generate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--listen", default="127.0.0.1:8787")
    p.add_argument("--run-root")
    p.add_argument("--ui", help="directory of the built UI bundle")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
