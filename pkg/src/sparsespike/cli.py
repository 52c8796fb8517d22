"""Thin command-line client for the pipeline service.

Each subcommand reads a key-value config file, merges SPARSESPIKE_* env
overrides and CLI flags into a request, and posts it to the service: an
in-process ASGI mount by default, or a remote server via --server. The
`serve` subcommand runs the service under uvicorn.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

STAGES = ("pretrain", "prune", "convert", "finetune", "evaluate", "energy")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsespike",
        description="Robust sparse ANN-to-SNN conversion pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")
        p.add_argument("--server", help="remote service URL (default: in-process)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a single config key (repeatable)")
        p.add_argument("--json", action="store_true", help="print the full JSON response")
    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8421)
    serve.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")
    return parser


def _set_thread_env(threads: int):
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


def _payload(args) -> dict:
    from .configio import ConfigError, deep_merge, env_overrides, load_config, nest, parse_value

    payload: dict = {}
    if args.config:
        payload = load_config(args.config)
    payload = deep_merge(payload, env_overrides())
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        payload = deep_merge(payload, nest({key.strip(): parse_value(value)}))
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.out is not None:
        payload["out"] = args.out
    return payload


def _client(args):
    import httpx

    if args.server:
        return httpx.Client(base_url=args.server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _summarize(stage: str, body: dict) -> str:
    lines = [f"stage: {stage}"]
    if body.get("checkpoint"):
        lines.append(f"checkpoint: {body['checkpoint']}")
        lines.append(f"sha256: {body['checkpoint_sha256']}")
    if stage == "evaluate":
        lines.append(f"clean_acc: {body['clean_acc']:.4f}")
        for row in body["rows"]:
            lines.append(
                f"{row['attack']} eps={row['eps']:.6f}: robust_acc={row['robust_acc']:.4f}"
                f" ({row['fooled']}/{row['n']} fooled)"
            )
    elif stage == "energy":
        rep = body["report"]
        lines.append(f"spikes/sample: {rep['total_spikes_per_sample']:.1f}")
        lines.append(f"spike_ratio: {rep['spike_ratio']:.4f}")
        lines.append(f"energy/sample: {rep['energy_per_sample']:.1f} (E_AC units)")
        if rep.get("reference"):
            lines.append(
                f"vs {rep['reference']['name']}: spikes_ratio={rep['reference']['spikes_ratio']:.3f}"
                f" energy_ratio={rep['reference']['energy_ratio']:.3f}"
            )
    elif body.get("metrics"):
        lines.append("metrics: " + json.dumps(body["metrics"], sort_keys=True, default=str))
    for name, path in (body.get("files") or {}).items():
        lines.append(f"{name}: {path}")
    return "\n".join(lines)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _set_thread_env(getattr(args, "threads", 1))
    if args.command == "serve":
        import uvicorn

        uvicorn.run("sparsespike.service:app", host=args.host, port=args.port)
        return 0
    from .configio import ConfigError

    try:
        payload = _payload(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    with _client(args) as client:
        resp = client.post(f"/v1/{args.command}", json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail")
        except Exception:
            detail = resp.text
        print(f"error ({resp.status_code}): {json.dumps(detail, default=str)}", file=sys.stderr)
        return 1
    body = resp.json()
    print(json.dumps(body, indent=2, sort_keys=True) if args.json else _summarize(args.command, body))
    return 0


if __name__ == "__main__":
    sys.exit(main())
