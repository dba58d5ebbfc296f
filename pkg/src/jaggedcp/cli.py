"""Command-line client for the experiment service.

Every subcommand builds the same pydantic request the HTTP API accepts and
either executes it in-process (default) or posts it to a running server
(``--server http://host:port``). Payload output goes to stdout as
canonical JSON (sorted keys) or fixed-column CSV; status chatter goes to
stderr, so repeated invocations with identical flags emit identical bytes.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

from pydantic import BaseModel, ValidationError

from .service.app import handle_bench, handle_fixtures, handle_sweep, handle_verify
from .service.schemas import (
    ExperimentRequest,
    FixtureRequest,
    SweepRequest,
    VerifyRequest,
)

BENCH_CSV_COLUMNS = [
    "cp_size",
    "protocol",
    "balance_mode",
    "dtype",
    "seed",
    "rank",
    "resident_tokens",
    "redistribute_bytes_sent",
    "redistribute_bytes_received",
    "redistribute_peak_resident_bytes",
    "ring_bytes_sent",
    "ring_bytes_received",
    "restore_bytes_sent",
    "restore_bytes_received",
    "peak_resident_bytes",
    "flops",
    "flops_max_mean_ratio",
    "max_abs_error",
    "max_rel_error",
    "memory_reduction_ratio",
]

SWEEP_CSV_COLUMNS = ["cp_size", "max_supported_length"]


def canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2)


def _dispatch(args, path: str, request: BaseModel, handler) -> dict:
    """Run locally through the service handler or POST to a remote server."""
    if args.server:
        import httpx

        resp = httpx.post(
            args.server.rstrip("/") + path,
            json=request.model_dump(mode="json"),
            timeout=300.0,
        )
        if resp.status_code != 200:
            raise RuntimeError(f"server returned {resp.status_code}: {resp.text}")
        return resp.json()
    return handler(request).model_dump(mode="json")


def _csv_lines(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(str(row[c]) for c in columns) + "\n")
    return buf.getvalue()


def _bench_csv(report: dict) -> str:
    cfg = report["config"]
    rows = []
    for r, _ in enumerate(report["comm"]["redistribute"]):
        redist = report["comm"]["redistribute"][r]
        ring = report["comm"]["ring"][r]
        restore = report["comm"]["restore"][r]
        rows.append(
            {
                "cp_size": cfg["cp_size"],
                "protocol": cfg["protocol"],
                "balance_mode": cfg["balance_mode"],
                "dtype": cfg["dtype"],
                "seed": cfg["seed"],
                "rank": r,
                "resident_tokens": report["resident_tokens_per_rank"][r],
                "redistribute_bytes_sent": redist["bytes_sent"],
                "redistribute_bytes_received": redist["bytes_received"],
                "redistribute_peak_resident_bytes": redist["peak_resident_bytes"],
                "ring_bytes_sent": ring["bytes_sent"],
                "ring_bytes_received": ring["bytes_received"],
                "restore_bytes_sent": restore["bytes_sent"],
                "restore_bytes_received": restore["bytes_received"],
                "peak_resident_bytes": report["per_rank_peak_resident_bytes"][r],
                "flops": report["flops"]["per_rank"][r],
                "flops_max_mean_ratio": report["flops"]["max_mean_ratio"],
                "max_abs_error": report["max_abs_error"],
                "max_rel_error": report["max_rel_error"],
                "memory_reduction_ratio": report["memory_reduction_ratio"],
            }
        )
    return _csv_lines(BENCH_CSV_COLUMNS, rows)


def _parse_cp_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid cp list {text!r}") from exc


def _add_config_flags(p: argparse.ArgumentParser, *, seed_required: bool) -> None:
    p.add_argument("--cp", type=int, default=2, help="CP group size")
    p.add_argument("--batch-size", type=int, default=2, help="sequences per rank")
    p.add_argument("--length-dist", choices=["uniform", "lognormal"], default="uniform")
    p.add_argument("--min-len", type=int, default=1)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--lognorm-mu", type=float, default=3.0)
    p.add_argument("--lognorm-sigma", type=float, default=0.8)
    p.add_argument("--max-length", type=int, default=128, help="declared sequence length bound")
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--num-buckets", type=int, default=16)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    p.add_argument("--protocol", choices=["allgather_split", "alltoall"], default="alltoall")
    p.add_argument(
        "--balance", choices=["balanced_minichunk", "naive_contiguous"], default="balanced_minichunk"
    )
    p.add_argument("--scheduling", choices=["sequential", "threaded"], default="sequential")
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)


def _experiment_request(args) -> ExperimentRequest:
    return ExperimentRequest(
        cp_size=args.cp,
        batch_size=args.batch_size,
        length_dist=args.length_dist,
        min_len=args.min_len,
        max_len=args.max_len,
        lognorm_mu=args.lognorm_mu,
        lognorm_sigma=args.lognorm_sigma,
        max_length=args.max_length,
        embed_dim=args.embed_dim,
        num_buckets=args.num_buckets,
        dtype=args.dtype,
        protocol=args.protocol,
        balance_mode=args.balance,
        seed=args.seed,
        scheduling=args.scheduling,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jaggedcp",
        description="Context-parallel jagged attention experiments",
    )
    parser.add_argument("--server", default=None, help="base URL of a running service; default runs in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run the equivalence/property grid; nonzero exit on failure")
    p_verify.add_argument("--cp", type=_parse_cp_list, default=[1, 2, 4, 8], help="comma-separated CP sizes")
    p_verify.add_argument("--protocol", choices=["allgather_split", "alltoall"], default=None)
    p_verify.add_argument(
        "--balance", choices=["balanced_minichunk", "naive_contiguous"], default=None
    )
    p_verify.add_argument("--dtype", choices=["f32", "f64"], default=None)
    p_verify.add_argument("--scheduling", choices=["sequential", "threaded"], default="sequential")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--output", choices=["text", "json"], default="text")

    p_bench = sub.add_parser("bench", help="run one experiment and emit the report")
    _add_config_flags(p_bench, seed_required=True)
    p_bench.add_argument("--output", choices=["json", "csv"], default="json")

    p_sweep = sub.add_parser("sweep", help="max supported length per CP size under a memory budget")
    p_sweep.add_argument("--budget", type=int, required=True, help="modeled per-rank byte budget")
    p_sweep.add_argument("--cp", type=_parse_cp_list, default=[1, 2, 4, 8])
    p_sweep.add_argument("--embed-dim", type=int, default=8)
    p_sweep.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p_sweep.add_argument("--seed", type=int, required=True)
    p_sweep.add_argument("--output", choices=["csv", "json"], default="csv")

    p_gen = sub.add_parser("gen", help="write synthetic fixture files")
    _add_config_flags(p_gen, seed_required=False)
    p_gen.add_argument("--out", required=True, help="output directory for fixture files")

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)

    return parser


def _cmd_verify(args) -> int:
    req = VerifyRequest(
        seed=args.seed,
        cp_sizes=args.cp,
        protocols=[args.protocol] if args.protocol else ["allgather_split", "alltoall"],
        balance_modes=[args.balance] if args.balance else ["balanced_minichunk", "naive_contiguous"],
        dtypes=[args.dtype] if args.dtype else ["f32", "f64"],
        scheduling=args.scheduling,
    )
    payload = _dispatch(args, "/v1/verify", req, handle_verify)
    if args.output == "json":
        print(canonical_json(payload))
    else:
        for case in payload["cases"]:
            c = case["config"]
            label = (
                f"cp={c['cp_size']} protocol={c['protocol']} balance={c['balance_mode']} "
                f"dtype={c['dtype']}"
            )
            status = "PASS" if case["passed"] else "FAIL " + "; ".join(case["failures"])
            print(f"{status:4s}  {label}  abs={case['max_abs_error']:.3e} rel={case['max_rel_error']:.3e}")
        print(f"{'PASS' if payload['all_passed'] else 'FAIL'}: {len(payload['cases'])} cases")
    return 0 if payload["all_passed"] else 1


def _cmd_bench(args) -> int:
    payload = _dispatch(args, "/v1/bench", _experiment_request(args), handle_bench)
    if args.output == "json":
        print(canonical_json(payload))
    else:
        sys.stdout.write(_bench_csv(payload))
    return 0


def _cmd_sweep(args) -> int:
    req = SweepRequest(
        budget_bytes=args.budget,
        cp_sizes=args.cp,
        embed_dim=args.embed_dim,
        dtype=args.dtype,
        seed=args.seed,
    )
    payload = _dispatch(args, "/v1/sweep", req, handle_sweep)
    if args.output == "json":
        print(canonical_json(payload))
    else:
        sys.stdout.write(_csv_lines(SWEEP_CSV_COLUMNS, payload["rows"]))
    return 0


def _cmd_gen(args) -> int:
    req = FixtureRequest(config=_experiment_request(args))
    payload = _dispatch(args, "/v1/fixtures", req, handle_fixtures)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rank, records in sorted(payload["ranks"].items(), key=lambda kv: int(kv[0])):
        path = out_dir / f"fixture_rank{rank}.json"
        path.write_text(canonical_json({"config": payload["config"], **records}))
        written.append(str(path))
    for path in written:
        print(path)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    commands = {
        "verify": _cmd_verify,
        "bench": _cmd_bench,
        "sweep": _cmd_sweep,
        "gen": _cmd_gen,
        "serve": _cmd_serve,
    }
    try:
        return commands[args.command](args)
    except (ValidationError, ValueError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
