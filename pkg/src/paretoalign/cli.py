"""Command-line client for the pipeline service.

Verbs mirror the five strategy stages plus `pipeline` for the whole run.
By default commands execute in-process; with --server URL they are sent
to a running service instance instead (the run directory must be visible
to the server). Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_STAGE_VERBS = ("generate", "train", "eval-offline", "simulate", "analyze", "pipeline")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run config (defaults used if omitted)")
    common.add_argument("--out", metavar="DIR", default="runs/default", help="run directory")
    common.add_argument("--seed", type=int, metavar="N", help="override the master seed")
    common.add_argument("--threads", type=int, metavar="N", help="cap numeric worker threads")
    common.add_argument("--alpha", type=float, metavar="F", help="significance level override")
    common.add_argument("--server", metavar="URL", help="send the command to a running service")
    common.add_argument("--print-config", action="store_true",
                        help="print the effective config as YAML and exit")

    parser = argparse.ArgumentParser(prog="paretoalign", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="sample world + train/test datasets")
    p_train = sub.add_parser("train", parents=[common], help="train the model")
    p_train.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    sub.add_parser("eval-offline", parents=[common], help="offline metric sweep over preferences")
    sub.add_parser("simulate", parents=[common], help="run the simulated A/B experiment")
    sub.add_parser("analyze", parents=[common], help="hypothesis tests and report")
    sub.add_parser("pipeline", parents=[common], help="all five stages in order")
    p_rec = sub.add_parser("recommend", parents=[common], help="top-k items for a session prefix")
    p_rec.add_argument("--checkpoint", required=True)
    p_rec.add_argument("--items", required=True, help="comma-separated item ids, oldest first")
    p_rec.add_argument("--preference", default="0.5,0.5", help="pi_click,pi_order")
    p_rec.add_argument("-k", type=int, default=20)
    p_api = sub.add_parser("serve-api", parents=[common], help="launch the HTTP service")
    p_api.add_argument("--host", default="127.0.0.1")
    p_api.add_argument("--port", type=int, default=8000)
    sub.add_parser("print-schema", parents=[common], help="print the config JSON schema")
    return parser


def _set_thread_cap(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if overrides:
        cfg = cfg.model_copy(update=overrides)
    return cfg


def _print_stage_summary(command: str, summary: dict) -> None:
    if command == "analyze":
        print(summary.get("table", ""), end="")
        return
    if command == "pipeline":
        for stage in ("generate", "train", "eval-offline", "simulate"):
            key = stage if stage in summary else stage.replace("-", "_")
            print(f"[{stage}] ok")
            _ = summary.get(key)
        print(summary.get("analyze", {}).get("table", ""), end="")
        return
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))


def _run_local(args) -> int:
    from .config import ConfigError
    from . import pipeline as pl

    try:
        cfg = _load_config(args)
    except Exception as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        from .config import dump_config
        print(dump_config(cfg), end="")
        return EXIT_OK
    try:
        if args.command == "generate":
            summary = pl.generate(cfg, args.out)
        elif args.command == "train":
            summary = pl.train(cfg, args.out, resume=getattr(args, "resume", None))
        elif args.command == "eval-offline":
            summary = pl.eval_offline(cfg, args.out)
        elif args.command == "simulate":
            summary = pl.simulate(cfg, args.out)
        elif args.command == "analyze":
            summary = pl.analyze(cfg, args.out, alpha=args.alpha)
        else:
            summary = pl.run_pipeline(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _print_stage_summary(args.command, summary)
    return EXIT_OK


def _run_remote(args) -> int:
    import httpx

    try:
        cfg = _load_config(args)
    except Exception as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        from .config import dump_config
        print(dump_config(cfg), end="")
        return EXIT_OK
    body = {"config": cfg.model_dump(), "out_dir": args.out}
    if args.command == "train" and getattr(args, "resume", None):
        body["resume"] = args.resume
    if args.command == "analyze" and args.alpha is not None:
        body["alpha"] = args.alpha
    endpoint = f"/runs/{args.command}"
    try:
        resp = httpx.post(args.server.rstrip("/") + endpoint, json=body, timeout=None)
    except httpx.HTTPError as exc:
        print(f"error: cannot reach server: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if resp.status_code in (400, 422):
        print(f"config error: {resp.text}", file=sys.stderr)
        return EXIT_CONFIG
    if resp.status_code != 200:
        print(f"error: server returned {resp.status_code}: {resp.text}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = resp.json()
    if args.command == "pipeline":
        summary = {**summary, "analyze": summary.get("analyze", {})}
    _print_stage_summary(args.command, summary)
    return EXIT_OK


def _run_recommend(args) -> int:
    try:
        prefix = [int(tok) for tok in args.items.split(",") if tok.strip() != ""]
        preference = [float(tok) for tok in args.preference.split(",")]
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.server:
        import httpx

        resp = httpx.post(args.server.rstrip("/") + "/recommend", timeout=None, json={
            "checkpoint": args.checkpoint, "prefix": prefix,
            "preference": preference, "k": args.k,
        })
        if resp.status_code != 200:
            print(f"error: {resp.text}", file=sys.stderr)
            return EXIT_CONFIG if resp.status_code in (400, 422) else EXIT_RUNTIME
        print(json.dumps(resp.json(), indent=2))
        return EXIT_OK
    from . import absim, model as model_mod

    try:
        params, hp, _ = model_mod.load_checkpoint(args.checkpoint)
        items = absim.serve(params, preference, prefix, args.k, hp.max_prefix_len)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"items": items}))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("config error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        _set_thread_cap(args.threads)
    if args.command == "print-schema":
        from .config import config_schema
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.command == "serve-api":
        import uvicorn
        from .service import create_app
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK
    if args.command == "recommend":
        return _run_recommend(args)
    if args.server:
        return _run_remote(args)
    return _run_local(args)


if __name__ == "__main__":
    sys.exit(main())
