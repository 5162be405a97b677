"""Command line front end.

Three subcommands::

    stwa run <scenario.scn> [--out trace.jsonl] [--seed N] [...]
    stwa check <trace.jsonl> [--json]
    stwa demo [--seed N]

Exit codes: 0 success, 1 a verification check failed, 2 unusable input
(bad arguments, unreadable files, malformed scenario or trace), 3 the run
itself broke down (step budget exhausted, unimplemented attack model).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .adversary import NotImplementedAttack
from .scenario import (
    DEFAULT_MAX_STEPS,
    LivelockError,
    ScenarioError,
    load_scenario,
    run_scenario,
    trace_lines,
    write_trace,
)
from .verifier import TraceFormatError, verify_file

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

_DEMO_SCENARIO = """
name: walkthrough
crypto-mode: transparent

actor manufacturer m1 maker-id=MFG-01
actor kdc kdc
actor cks cks
actor device d1 maker=m1 machine-id=M-001 dmn=DMN-9
actor device d2 maker=m1 machine-id=M-002 dmn=DMN-9
actor sp sp-pay services=payment

register-device d1
register-device d2
register-user d1 alice
register-user d2 bob
connect d1 bob
request-service d1 payment open-sesame
"""

_DEMO_SECTIONS = [
    ("initialization", "device identity provisioning", "complete:initialization", [
        "maker -> key service: machine identity and naming data, sealed",
        "key service -> maker: device token over the secured channel",
        "key service -> relay hub: identity record for the new device",
    ]),
    ("registration", "user signup on a provisioned device", "complete:registration", [
        "device -> relay hub: stored machine credentials, sealed",
        "relay hub -> device: device check value plus a one-time code",
        "user hands the one-time code back through the device",
        "device -> relay hub: account id and the one-time code, sealed",
        "relay hub -> device: account check value plus a temporary id",
    ]),
    ("connection", "authenticated call setup", "complete:connection", [
        "caller -> relay hub: connect request under the temporary id",
        "relay hub -> callee: alerting notice (identities in the clear)",
        "callee -> relay hub: consent with the callee's credentials",
        "relay hub -> both parties: a fresh one-time session key",
    ]),
    ("service", "brokered provider handshake", "complete:service", [
        "user picks a service and a private pass-phrase",
        "device -> relay hub: the service request, sealed",
        "relay hub selects a provider, mints a key and a relay secret",
        "relay hub -> device: the grant, echoing the pass-phrase",
        "device checks the echo: only the real hub could know it",
        "device -> provider: a ticket carrying the sealed relay secret",
        "provider -> relay hub: verification with a fresh challenge",
        "relay hub matches the relay secret and stores the session",
        "relay hub -> provider: session key plus requester address",
        "provider -> device: the completion forward",
    ]),
]


def _arg_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="stwa",
                                  description="three-way authentication sandbox")
    sub = top.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario and record its trace")
    run.add_argument("scenario")
    run.add_argument("--out", help="trace file (default: stdout)")
    run.add_argument("--seed", type=int, default=None,
                     help="overrides STWA_SEED and the scenario header")
    run.add_argument("--crypto-mode", choices=["opaque", "transparent"])
    run.add_argument("--hash-alg")
    run.add_argument("--ttl", type=int)
    run.add_argument("--drop-rate", type=float)
    run.add_argument("--max-steps", type=int, default=DEFAULT_MAX_STEPS)
    run.add_argument("--snapshot", help="also dump registry state to this file")

    check = sub.add_parser("check", help="verify a recorded trace")
    check.add_argument("trace")
    check.add_argument("--json", action="store_true", help="machine verdict")

    demo = sub.add_parser("demo", help="run the full protocol and narrate it")
    demo.add_argument("--seed", type=int, default=None)
    return top


def _pick_seed(flag_seed, header_seed: int) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("STWA_SEED", "")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ScenarioError(f"line 0: STWA_SEED is not an integer: {env!r}")
    return header_seed


def _cmd_run(args) -> int:
    scn = load_scenario(args.scenario)
    scn.seed = _pick_seed(args.seed, scn.seed)
    if args.crypto_mode:
        scn.crypto_mode = args.crypto_mode
    if args.hash_alg:
        scn.hash_alg = args.hash_alg
    if args.ttl is not None:
        scn.ttl = args.ttl
    if args.drop_rate is not None:
        scn.drop_rate = args.drop_rate
    result = run_scenario(scn, max_steps=args.max_steps)
    if args.out:
        write_trace(result.rows, args.out)
        print(f"{scn.name}: {result.net.steps} steps, "
              f"{len(result.rows)} trace rows -> {args.out}")
    else:
        sys.stdout.write(trace_lines(result.rows))
    if args.snapshot:
        _write_snapshot(result, args.snapshot)
    return EXIT_OK


def _write_snapshot(result, path: str) -> None:
    doc = {}
    for label, actor in sorted(result.actors.items()):
        state = {}
        if hasattr(actor, "db"):
            state["registry"] = actor.db.snapshot()
        if hasattr(actor, "log"):
            state["device_log"] = actor.log.snapshot()
        if hasattr(actor, "sessions"):
            state["sessions"] = actor.sessions.snapshot()
        if state:
            doc[label] = state
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _cmd_check(args) -> int:
    report = verify_file(args.trace)
    if args.json:
        print(report.to_json())
    else:
        print(report.summary())
    return EXIT_OK if report.ok else EXIT_CHECK_FAILED


def _cmd_demo(args) -> int:
    from .scenario import parse_scenario

    scn = parse_scenario(_DEMO_SCENARIO, name="walkthrough")
    scn.seed = _pick_seed(args.seed, scn.seed)
    result = run_scenario(scn)
    outcomes = result.outcome_kinds()
    print(f"three-way authentication walkthrough (seed {scn.seed})")
    for key, title, completes, steps in _DEMO_SECTIONS:
        hits = outcomes.count(completes)
        print(f"\n[{key}] {title} -- {len(steps)} steps")
        for i, line in enumerate(steps, start=1):
            print(f"  {i:2d}. {line}")
        suffix = f" x{hits}" if hits > 1 else ""
        status = "confirmed" if hits else "MISSING"
        print(f"  outcome: {completes}{suffix} {status}")
    frames = sum(1 for r in result.rows if r["kind"] == "delivered")
    print(f"\n{frames} frames delivered over {result.net.steps} events; "
          f"no rejections, no violations"
          if not any(o.startswith(("reject", "violation")) for o in outcomes)
          else f"\n{frames} frames delivered; some flows refused, see trace")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help; pass both through
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "check":
            return _cmd_check(args)
        return _cmd_demo(args)
    except (ScenarioError, TraceFormatError) as exc:
        print(f"stwa {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"stwa {args.command}: cannot read {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (LivelockError, NotImplementedAttack) as exc:
        print(f"stwa {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
