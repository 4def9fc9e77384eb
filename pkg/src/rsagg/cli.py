"""Command-line entry point (``rsagg``).

Exit codes: 0 success, 1 usage error, 2 parameter validation failure,
3 run finished outside tolerance (too many aborted rounds, a wrong
aggregate, or a failed property check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bfv import validate_params
from .compression import monte_carlo_suite
from .config import SEED_ENV, resolve
from .errors import ParameterError, ProtocolError
from .protocol.runner import Availability, build_client, build_server, default_input_fn, run_simulation, summarize
from .timing import Clock

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_TOLERANCE = 0, 1, 2, 3

log = logging.getLogger("rsagg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, *, run: bool = True) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--seed", type=int, help=f"master seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--preset", choices=("production", "toy"))
    p.add_argument("--ring-n", dest="n", type=int, help="ring dimension override")
    p.add_argument("--plaintext-modulus", dest="p", type=int)
    p.add_argument("--smudging-bound", dest="smudging_bound", type=int)
    if run:
        p.add_argument("--clients", type=int)
        p.add_argument("--threshold", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--dim", type=int)


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rsagg", description="Dropout-tolerant secure aggregation toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="end-to-end run in the network simulator")
    _common(p)
    p.add_argument("--dropout", type=float)
    p.add_argument("--mode", choices=("rsa", "asa"))
    p.add_argument("--clock", choices=("simulated", "wall"))
    p.add_argument("--max-aborts", type=int, default=None, help="exit 3 when more rounds abort")
    p.add_argument("--csv", help="write the per-round CSV here instead of stdout")

    p = sub.add_parser("server", help="serve one run over TCP")
    _common(p)
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--mode", choices=("rsa", "asa"))
    p.add_argument("--deadline", type=float, help="seconds before a phase closes")
    p.add_argument("--max-aborts", type=int, default=None)
    p.add_argument("--csv")

    p = sub.add_parser("client", help="join a TCP run as one client")
    _common(p)
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--id", dest="client_id", type=int, required=True)

    p = sub.add_parser("train", help="federated logistic regression over the secure protocol")
    p.add_argument("--seed", type=int)
    p.add_argument("--clients", type=int, default=8)
    p.add_argument("--threshold", type=int, default=4)
    p.add_argument("--rounds", type=int, default=300)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--scale", type=float, default=1e3)
    p.add_argument("--clip", type=float, default=1e3)
    p.add_argument("--dim", type=int, default=1000)
    p.add_argument("--samples-per-client", type=int, default=250)
    p.add_argument("--compressor", choices=("rlc", "none"), default="rlc")
    p.add_argument("--mode", choices=("contract", "unbiased"), default="contract")
    p.add_argument("--no-error-feedback", action="store_true")
    p.add_argument("--quantize-order", choices=("sketch_first", "quantize_first"), default="sketch_first")
    p.add_argument("--ring-n", type=int, default=128)
    p.add_argument("--clock", choices=("simulated", "wall"), default="simulated")
    p.add_argument("--max-aborts", type=int, default=None)
    p.add_argument("--csv")
    p.add_argument("--json")

    p = sub.add_parser("bench-compress", help="Monte-Carlo checks of the sketch compressors")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--sketch", type=int, required=True)
    p.add_argument("--p-entry", type=float, required=True)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("validate", help="check ring parameters against the decryption-noise limit")
    _common(p, run=False)
    p.add_argument("--clients", type=int)
    p.add_argument("--threshold", type=int)
    p.add_argument("--min-smudging-bits", type=float, default=40.0)

    p = sub.add_parser("adduser", help="simulate adding a client after key setup")
    _common(p)
    p.add_argument("--point", type=int, required=True, help="evaluation point requested by the new client")
    p.add_argument("--csv")
    return parser


def _settings(args, keys):
    overrides = {k: getattr(args, k, None) for k in keys}
    return resolve(getattr(args, "config", None), overrides)


_RUN_KEYS = ("seed", "preset", "n", "p", "smudging_bound", "clients", "threshold", "rounds", "dim")


def _report(report) -> None:
    for line in report.lines():
        print(line, file=sys.stderr)


def _check_params(s) -> None:
    report = validate_params(s.ring_params(), s.clients, s.threshold)
    if not report.ok:
        _report(report)
        raise ParameterError("parameter validation failed")
    for w in report.warnings:
        log.warning(w)


def _run_verdict(result, max_aborts) -> int:
    ok = sum(r.ok for r in result.rounds)
    print(
        f"rounds {len(result.rounds)}: ok {ok}, aborted {result.aborted}, wrong {result.wrong}, "
        f"setup messages {result.setup_messages}",
        file=sys.stderr,
    )
    if result.server.setup_error:
        print(f"setup failed: {result.server.setup_error}", file=sys.stderr)
        return EXIT_TOLERANCE
    if result.wrong:
        return EXIT_TOLERANCE
    if max_aborts is not None and result.aborted > max_aborts:
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_simulate(args) -> int:
    s = _settings(args, _RUN_KEYS + ("dropout", "mode", "clock"))
    _check_params(s)
    result = run_simulation(s.run_config())
    _write(result.to_csv(), args.csv)
    return _run_verdict(result, args.max_aborts)


def cmd_server(args) -> int:
    from .transport.tcp import TcpServer, parse_address

    s = _settings(args, _RUN_KEYS + ("mode", "deadline"))
    _check_params(s)
    cfg = s.run_config()
    cfg.clock = "wall"
    server = build_server(cfg, clock=Clock("wall", cfg.params.n))
    host, port = parse_address(args.listen)
    srv = TcpServer(server, host, port, deadline_s=s.deadline)
    print(f"listening on {srv.address[0]}:{srv.address[1]}", file=sys.stderr, flush=True)
    srv.run()
    result = summarize(cfg, server, [], default_input_fn(cfg))
    _write(result.to_csv(), args.csv)
    return _run_verdict(result, args.max_aborts)


def cmd_client(args) -> int:
    from .transport.tcp import parse_address, run_client

    s = _settings(args, _RUN_KEYS)
    cfg = s.run_config()
    node = build_client(cfg, args.client_id, clock=Clock("wall", cfg.params.n), always_online=True)
    host, port = parse_address(args.connect)
    run_client(node, host, port)
    if node.errors:
        for e in node.errors:
            print(f"client {args.client_id}: {e}", file=sys.stderr)
        return EXIT_TOLERANCE
    done = sum(1 for r in node.results.values() if r.aggregate is not None)
    print(f"client {args.client_id}: {len(node.results)} round results, {done} with an aggregate", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import default_seed
    from .trainer import TrainConfig, TrainingHalted, train_loop

    cfg = TrainConfig(
        n_clients=args.clients,
        threshold=args.threshold,
        rounds=args.rounds,
        dropout=args.dropout,
        gamma=args.gamma,
        ratio=args.ratio,
        alpha=args.alpha,
        compressor=args.compressor,
        mode=args.mode,
        error_feedback=not args.no_error_feedback,
        scale=args.scale,
        clip=args.clip,
        seed=args.seed if args.seed is not None else default_seed(),
        ring_n=args.ring_n,
        clock=args.clock,
        max_aborts=args.max_aborts,
        quantize_order=args.quantize_order,
    )
    try:
        res = train_loop(cfg, samples_per_client=args.samples_per_client, dim=args.dim)
    except TrainingHalted as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_TOLERANCE
    _write(res.to_csv(), args.csv)
    summary = res.summary_json() + "\n"
    if args.json:
        Path(args.json).write_text(summary)
    else:
        sys.stderr.write(summary)
    return EXIT_OK if res.all_exact else EXIT_TOLERANCE


def cmd_bench(args) -> int:
    from .config import default_seed

    if args.samples < 2:
        raise UsageError("--samples must be at least 2")
    if not 1 <= args.sketch <= args.dim:
        raise UsageError("--sketch must lie between 1 and --dim")
    seed = args.seed if args.seed is not None else default_seed()
    checks = monte_carlo_suite(args.dim, args.sketch, args.p_entry, args.samples, seed)
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_TOLERANCE


def cmd_validate(args) -> int:
    s = _settings(args, ("seed", "preset", "n", "p", "smudging_bound", "clients", "threshold"))
    report = validate_params(s.ring_params(), s.clients, s.threshold, min_smudging_bits=args.min_smudging_bits)
    p = s.ring_params()
    print(f"n={p.n} q={p.q} p={p.p} sigma={p.sigma} B={p.error_bound} B_smg={p.smudging_bound}")
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_adduser(args) -> int:
    s = _settings(args, _RUN_KEYS)
    if args.rounds is None and s.rounds < 2:
        s.rounds = 2
    if s.rounds < 2:
        raise UsageError("adduser needs at least two rounds (the join happens before round 1)")
    if s.mode != "rsa":
        raise UsageError("adduser only applies to the share-once protocol")
    _check_params(s)
    new_id = s.clients
    old = list(range(s.clients))
    # round 1 is decrypted by the newcomer plus the k-1 lowest existing ids
    pattern = {1: [new_id] + old[: s.threshold - 1]}
    cfg = s.run_config(
        joins={1: new_id},
        join_points={new_id: args.point},
        availability=Availability(rate=s.dropout, seed=s.seed, pattern=pattern),
    )
    result = run_simulation(cfg)
    _write(result.to_csv(), args.csv)
    join = result.server.joins.get(1)
    if join is not None:
        status = "joined" if join.ok else f"failed ({join.error})"
        print(f"new client {new_id} at x={join.x_new} via helpers {list(join.helpers)}: {status}", file=sys.stderr)
    r1 = result.rounds[1] if len(result.rounds) > 1 else None
    if r1 is not None:
        print(f"round 1 selection {list(r1.selected)} correct={r1.correct}", file=sys.stderr)
    code = _run_verdict(result, None)
    if join is None or not join.ok or r1 is None or not r1.ok or new_id not in r1.selected:
        code = EXIT_TOLERANCE
    return code


COMMANDS = {
    "simulate": cmd_simulate,
    "server": cmd_server,
    "client": cmd_client,
    "train": cmd_train,
    "bench-compress": cmd_bench,
    "validate": cmd_validate,
    "adduser": cmd_adduser,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0; parse errors exit with the usage code
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rsagg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParameterError, ValueError) as exc:
        print(f"rsagg: invalid parameters: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"rsagg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProtocolError as exc:
        print(f"rsagg: protocol failure: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
