"""Command-line entry point: ``python -m saps <command>``.

Exit codes: 0 success, 1 invalid input (usage errors included) or a failed
run, 2 verification suite failure.
"""
import argparse
import asyncio
import json
import logging
import sys
from typing import List, Optional

from .analysis import export_csv
from .config import get_settings
from .coordinator.cost import Algorithm, CostModelInput, comm_cost
from .coordinator.run import CoordinatorServer, run_coordinator, serving
from .errors import InvalidInput, SapsError
from .experiment import (
    build_bandwidth,
    build_coordinator,
    build_problem,
    build_workers,
    estimate_for_config,
    load_config,
    run_experiment,
    run_verification_suite,
)
from .utils import configure_logging
from .worker.run import TcpWorker, run_worker

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SUITE_FAILED = 2


def _print(data) -> None:
    print(json.dumps(data, indent=2, default=str))


# ---- Commands ----
def cmd_run(args) -> int:
    config = load_config(args.config, transport=args.transport, master_seed=args.seed)
    result = run_experiment(config, out=args.out)
    _print(result.summary.as_dict())
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_verification_suite(quick=args.quick, inject_fault=args.inject_fault)
    print(report.as_text())
    return EXIT_OK if report.passed else EXIT_SUITE_FAILED


def cmd_rho(args) -> int:
    estimate = estimate_for_config(load_config(args.config), args.samples)
    _print({"rho": estimate.rho, "std_error": estimate.std_error, "n_samples": estimate.n_samples})
    return EXIT_OK


def cmd_cost(args) -> int:
    try:
        inp = CostModelInput(algorithm=args.algo, N=args.N, n=args.n, T=args.T, c=args.c, n_p=args.np)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from exc
    server, worker = comm_cost(inp)
    _print({"algorithm": inp.algorithm.value, "server_cost": server, "worker_cost": worker})
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    settings = get_settings()
    uvicorn.run("saps.main:app", host=args.host or settings.API_HOST, port=args.port or settings.API_PORT)
    return EXIT_OK


def cmd_coordinator(args) -> int:
    config = load_config(args.config, master_seed=args.seed)
    state = build_coordinator(config, build_bandwidth(config))

    async def _serve():
        async with serving(CoordinatorServer(state, args.host, args.port)) as server:
            return await run_coordinator(server, config.T)

    records, _ = asyncio.run(_serve())
    if args.out:
        export_csv(records, args.out)
    _print({"rounds": len(records), "comm_time": state.cum_time, "model_bytes": state.model_bytes_received})
    return EXIT_OK


def cmd_worker(args) -> int:
    config = load_config(args.config, master_seed=args.seed)
    if not 0 <= args.rank < config.n:
        raise InvalidInput(f"rank must lie in 0..{config.n - 1}")
    state = build_workers(config, build_problem(config))[args.rank]
    settings = get_settings()
    port = args.port if args.port is not None else settings.WORKER_BASE_PORT + args.rank
    worker = TcpWorker(state, args.coordinator_host, args.coordinator_port, host=args.host, port=port)
    asyncio.run(run_worker(worker))
    return EXIT_OK


# ---- Parser ----
class SapsArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with EXIT_ERROR; 2 stays reserved for a failed suite."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = SapsArgumentParser(prog="saps", description="Sparsified bandwidth-aware decentralized SGD")
    parser.add_argument("--log", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="log level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="CSV path for per-round records")
    p.add_argument("--transport", choices=["sim", "tcp"], default=None)
    p.add_argument("--seed", type=int, default=None, help="override master_seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the verification suite")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--inject-fault", action="store_true", help="add a malformed gossip matrix (negative control)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("rho", help="estimate the mixing rate of a configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.set_defaults(func=cmd_rho)

    p = sub.add_parser("cost", help="closed-form communication cost")
    p.add_argument("--algo", required=True, choices=[a.value for a in Algorithm])
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--np", type=int, default=None)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("coordinator", help="run the TCP coordinator for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("worker", help="run one TCP worker for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--host", default=None, help="address peers use to reach this worker")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--coordinator-host", default=None)
    p.add_argument("--coordinator-port", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_worker)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log)
    try:
        return args.func(args)
    except InvalidInput as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_ERROR
    except SapsError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
