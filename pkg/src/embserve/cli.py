"""Command-line driver: ``embserve <command> ...``.

Reports are canonical JSON (sorted keys, shortest round-trip floats). Every
command that evaluates invariants exits 0 iff they all hold.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from embserve.errors import EmbServeError
from embserve.orchestrator import EmbeddingsOrchestrator
from embserve.scenario import load_scenario
from embserve.service import serve_eo, serve_recs
from embserve.sim import (
    Simulation,
    canonical_json,
    oracle_check,
    replay,
    report_bytes,
    sweep,
    write_trace,
)
from embserve.store import EmbeddingStore
from embserve.trainer import ModelKind

log = logging.getLogger("embserve")


def _seed_range(text: str) -> range:
    lo, sep, hi = text.partition("..")
    try:
        if not sep:
            return range(int(lo), int(lo) + 1)
        a, b = int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected <a>..<b>, got {text!r}") from None
    if b < a:
        raise argparse.ArgumentTypeError("seed range end is before its start")
    return range(a, b + 1)  # inclusive on both ends


def _emit(report: dict, path: str | None) -> None:
    data = report_bytes(report)
    if path:
        Path(path).write_bytes(data)
    else:
        sys.stdout.write(data.decode("utf-8"))


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    sim = Simulation(scenario, args.seed, record_trace=bool(args.trace))
    report = sim.run()
    if args.trace:
        write_trace(args.trace, scenario, sim.seed, sim.trace, report)
    _emit(report, args.report)
    return 0 if report["ok"] else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    report = sweep(load_scenario(args.scenario), args.seeds)
    _emit(report, args.report)
    return 0 if report["ok"] else 1


def cmd_replay(args: argparse.Namespace) -> int:
    report = replay(args.trace)
    _emit(report, args.report)
    return 0 if report["ok"] else 1


def cmd_oracle(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario) if args.scenario else None
    report = oracle_check(scenario, args.instances, seed=args.seed)
    _emit(report, args.report)
    return 0 if report["ok"] else 1


def _finished_simulation(args: argparse.Namespace) -> Simulation:
    sim = Simulation(load_scenario(args.scenario), args.seed, record_trace=False)
    report = sim.run()
    log.info("scenario finished: ok=%s in-use=%s", report["ok"], report["final_state"])
    return sim


def _eo_from_snapshot(path: str, model_kind: str) -> EmbeddingsOrchestrator:
    store = EmbeddingStore()
    store.load_snapshot(path)
    types = {r.version.type_id for r in store.records()}
    eo = EmbeddingsOrchestrator(store, {t: ModelKind(model_kind) for t in types})
    eo.poll_all()
    return eo


def _serve(server, what: str) -> int:
    # the chosen port goes to stdout so callers can use --port 0
    print(json.dumps({"serving": what, "host": server.server_address[0], "port": server.port}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_serve_eo(args: argparse.Namespace) -> int:
    if args.snapshot:
        eo = _eo_from_snapshot(args.snapshot, args.model_kind)
    else:
        eo = _finished_simulation(args).eo
    return _serve(serve_eo(eo, args.host, args.port), "eo")


def cmd_serve_recs(args: argparse.Namespace) -> int:
    sim = _finished_simulation(args)
    return _serve(serve_recs(sim.eo, sim.engine, sim.serving, args.host, args.port), "recs")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="embserve", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one seeded interleaving")
    run.add_argument("--scenario", required=True)
    run.add_argument("--seed", type=int, default=None, help="defaults to the scenario's interleaving_seed")
    run.add_argument("--trace", help="write the NDJSON trace here")
    run.add_argument("--report", help="write the report here instead of stdout")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="run a range of seeds and aggregate")
    sw.add_argument("--scenario", required=True)
    sw.add_argument("--seeds", type=_seed_range, required=True, help="inclusive range, e.g. 0..999")
    sw.add_argument("--report")
    sw.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("replay", help="re-execute a recorded trace")
    rp.add_argument("--trace", required=True)
    rp.add_argument("--report")
    rp.set_defaults(func=cmd_replay)

    oc = sub.add_parser("oracle-check", help="engine vs brute-force oracle on random queries")
    oc.add_argument("--scenario", help="takes the first embedding type from here")
    oc.add_argument("--instances", type=int, default=1000)
    oc.add_argument("--seed", type=int, default=0)
    oc.add_argument("--report")
    oc.set_defaults(func=cmd_oracle)

    for name, func, text in (
        ("serve-eo", cmd_serve_eo, "serve the EO line protocol"),
        ("serve-recs", cmd_serve_recs, "serve the recommend line protocol"),
    ):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--port", type=int, required=True, help="0 picks a free port")
        sp.add_argument("--host", default="127.0.0.1")
        sp.add_argument("--scenario", help="run this scenario to completion and serve its final state")
        sp.add_argument("--seed", type=int, default=None)
        if name == "serve-eo":
            sp.add_argument("--snapshot", help="serve a store snapshot instead of a scenario")
            sp.add_argument("--model-kind", default="DirectDirect", choices=[k.value for k in ModelKind])
        sp.set_defaults(func=func)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    if args.command.startswith("serve-") and not args.scenario and not getattr(args, "snapshot", None):
        parser.error(f"{args.command} needs --scenario" + (" or --snapshot" if args.command == "serve-eo" else ""))
    try:
        return args.func(args)
    except EmbServeError as exc:
        print(canonical_json({"ok": False, "error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"embserve: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
