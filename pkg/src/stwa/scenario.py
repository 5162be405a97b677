"""Scenario files: a small line language that drives full protocol runs.

A scenario declares headers (seed, crypto mode, TTL, ...), a cast of actors,
and an ordered list of steps.  The driver builds the crypto suite and the
simulated network, executes each step, lets the network go quiescent between
steps, and returns the trace rows ready for JSON-lines output.

Grammar, one directive per line ('#' comments and blank lines skipped)::

    name: happy-path            headers, before any actor/step line
    seed: 7
    crypto-mode: transparent    opaque | transparent
    hash-alg: sha2-256
    ttl: 600
    drop-rate: 0.0
    latency: 1
    jitter: 0

    actor manufacturer m1 maker-id=MFG-01
    actor kdc kdc
    actor cks cks
    actor device d1 maker=m1 machine-id=M-001 dmn=DMN-9
    actor sp sp-pay services=payment,escrow
    actor adversary eve

    register-device d1
    register-user d1 alice
    connect d1 bob
    request-service d1 payment open-sesame
    app-message d1 bob hello
    advance 601
    attack replay tag=0x41 nth=1 delay=0

Unknown directives, bad field counts, and malformed values raise
``ScenarioError`` carrying the offending line number.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .actors import Cks, Device, Kdc, Manufacturer, ServiceProvider
from .adversary import Action, Adversary, AttackScriptError
from .crypto import CryptoConfig, CryptoError, CryptoSuite
from .registries import RegistryError, SpRecord
from .simnet import Simnet, SimnetError

DEFAULT_TTL = 600
DEFAULT_MAX_STEPS = 10_000

_HEADER_KEYS = ("name", "seed", "crypto-mode", "hash-alg", "ttl",
                "drop-rate", "latency", "jitter")
_ROLES = ("manufacturer", "kdc", "cks", "device", "sp", "adversary")
_STEP_WORDS = ("register-device", "register-user", "connect",
               "request-service", "app-message", "advance", "attack")
_ATTACK_KINDS = ("eavesdrop", "replay", "tamper", "fake-user", "fake-sp",
                 "fake-cks", "synflood")


class ScenarioError(Exception):
    """Parse or build problem; message begins with the line number."""


class LivelockError(Exception):
    """The step budget ran out before the network went quiescent."""


@dataclass
class ActorDecl:
    role: str
    label: str
    opts: dict[str, str]
    line: int


@dataclass
class Step:
    word: str
    args: list[str]
    opts: dict[str, str]
    line: int


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    crypto_mode: str = "transparent"
    hash_alg: str = "sha2-256"
    ttl: int = DEFAULT_TTL
    drop_rate: float = 0.0
    latency: int = 1
    jitter: int = 0
    actors: list[ActorDecl] = field(default_factory=list)
    steps: list[Step] = field(default_factory=list)


def _fail(line: int, why: str) -> None:
    raise ScenarioError(f"line {line}: {why}")


def _opts(parts: list[str], line: int) -> dict[str, str]:
    out = {}
    for part in parts:
        if "=" not in part:
            _fail(line, f"expected key=value, got {part!r}")
        key, _, value = part.partition("=")
        if not key or key in out:
            _fail(line, f"bad or repeated option {key!r}")
        out[key] = value
    return out


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    scn = Scenario(name=name)
    seen_body = False
    labels: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head = line.split()[0]

        if head.rstrip(":") in _HEADER_KEYS and head.endswith(":"):
            if seen_body:
                _fail(lineno, "headers must come before actors and steps")
            key, _, value = line.partition(":")
            value = value.strip()
            try:
                if key == "name":
                    scn.name = value
                elif key == "seed":
                    scn.seed = int(value)
                elif key == "crypto-mode":
                    if value not in ("opaque", "transparent"):
                        _fail(lineno, f"crypto-mode must be opaque or transparent, got {value!r}")
                    scn.crypto_mode = value
                elif key == "hash-alg":
                    scn.hash_alg = value
                elif key == "ttl":
                    scn.ttl = int(value)
                elif key == "drop-rate":
                    scn.drop_rate = float(value)
                elif key == "latency":
                    scn.latency = int(value)
                elif key == "jitter":
                    scn.jitter = int(value)
            except ValueError:
                _fail(lineno, f"bad value for {key}: {value!r}")
            continue

        seen_body = True
        parts = line.split()

        if head == "actor":
            if len(parts) < 3:
                _fail(lineno, "actor needs a role and a label")
            role, label = parts[1], parts[2]
            if role not in _ROLES:
                _fail(lineno, f"unknown role {role!r}")
            if label in labels:
                _fail(lineno, f"duplicate actor label {label!r}")
            labels.add(label)
            scn.actors.append(ActorDecl(role, label, _opts(parts[3:], lineno), lineno))
            continue

        if head in _STEP_WORDS:
            args = [p for p in parts[1:] if "=" not in p]
            opts = _opts([p for p in parts[1:] if "=" in p], lineno)
            scn.steps.append(Step(head, args, opts, lineno))
            continue

        _fail(lineno, f"unknown directive {head!r}")

    _check_shape(scn)
    return scn


def load_scenario(path: str) -> Scenario:
    import os
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stem = os.path.splitext(os.path.basename(path))[0]
    scn = parse_scenario(text, name=stem)
    return scn


def _check_shape(scn: Scenario) -> None:
    roles: dict[str, list[str]] = {}
    for decl in scn.actors:
        roles.setdefault(decl.role, []).append(decl.label)
    for singleton in ("kdc", "cks"):
        if len(roles.get(singleton, [])) > 1:
            _fail(scn.actors[-1].line, f"more than one {singleton} actor")
    if len(roles.get("adversary", [])) > 1:
        _fail(scn.actors[-1].line, "more than one adversary actor")

    device_labels = set(roles.get("device", []))
    maker_labels = set(roles.get("manufacturer", []))
    for decl in scn.actors:
        if decl.role == "device":
            maker = decl.opts.get("maker")
            if maker not in maker_labels:
                _fail(decl.line, f"device {decl.label!r} needs maker=<manufacturer label>")
        if decl.role == "sp" and not decl.opts.get("services"):
            _fail(decl.line, f"sp {decl.label!r} needs services=<comma list>")

    have_adv = bool(roles.get("adversary"))
    for step in scn.steps:
        if step.word == "attack":
            if not step.args:
                _fail(step.line, "attack needs a kind")
            if step.args[0] not in _ATTACK_KINDS:
                _fail(step.line, f"unknown attack kind {step.args[0]!r}")
            if not have_adv:
                _fail(step.line, "attack step requires an adversary actor")
        elif step.word == "register-device":
            if len(step.args) != 1 or step.args[0] not in device_labels:
                _fail(step.line, "register-device needs one device label")
        elif step.word == "register-user":
            if len(step.args) != 2 or step.args[0] not in device_labels:
                _fail(step.line, "register-user needs a device label and a user id")
        elif step.word == "connect":
            if len(step.args) != 2 or step.args[0] not in device_labels:
                _fail(step.line, "connect needs a device label and a target user id")
        elif step.word == "request-service":
            if len(step.args) != 3 or step.args[0] not in device_labels:
                _fail(step.line, "request-service needs device, service, passphrase")
        elif step.word == "app-message":
            if len(step.args) < 3:
                _fail(step.line, "app-message needs source, peer, text")
        elif step.word == "advance":
            if len(step.args) != 1 or not step.args[0].isdigit():
                _fail(step.line, "advance needs a tick count")


@dataclass
class RunResult:
    scenario: Scenario
    net: Simnet
    rows: list[dict]
    actors: dict
    quiescent: bool

    def outcome_kinds(self) -> list[str]:
        """The decision stream: outcome strings of every handled frame, in order."""
        return [r["outcome"] for r in self.rows
                if r["kind"] in ("delivered", "injected") and r["outcome"]]


class _World:
    """Built actors plus the lookup tables the step executor needs."""

    def __init__(self):
        self.actors: dict = {}
        self.devices: dict[str, Device] = {}
        self.maker_of: dict[str, Manufacturer] = {}
        self.device_spec: dict[str, tuple[str, str]] = {}  # label -> (machine_id, dmn)
        self.user_device: dict[str, str] = {}  # user id -> device label
        self.adversary: Optional[Adversary] = None
        self.cks_label = "cks"


def _build(scn: Scenario, net: Simnet) -> _World:
    try:
        suite = CryptoSuite(CryptoConfig(mode=scn.crypto_mode, hash_alg=scn.hash_alg))
    except CryptoError as exc:
        raise ScenarioError(f"line 0: bad crypto configuration: {exc}") from exc

    world = _World()
    rng_for = lambda label: random.Random(f"{scn.seed}:{label}")

    cks_decl = next((d for d in scn.actors if d.role == "cks"), None)
    kdc_decl = next((d for d in scn.actors if d.role == "kdc"), None)
    cks_label = cks_decl.label if cks_decl else "cks"
    kdc_label = kdc_decl.label if kdc_decl else "kdc"
    world.cks_label = cks_label
    kp_kdc = suite.generate_keypair(scn.seed, kdc_label)
    kp_cks = suite.generate_keypair(scn.seed, cks_label)

    cks = None
    for decl in scn.actors:
        rng = rng_for(decl.label)
        if decl.role == "manufacturer":
            maker_id = decl.opts.get("maker-id", f"MFG-{decl.label}")
            actor = Manufacturer(decl.label, suite, rng, maker_id, kdc_label,
                                 kp_kdc.public, recorder=net)
        elif decl.role == "kdc":
            actor = Kdc(decl.label, suite, rng, kp_kdc, cks_label, kp_cks.public,
                        recorder=net)
        elif decl.role == "cks":
            actor = Cks(decl.label, suite, rng, kp_cks, scn.ttl, recorder=net)
            cks = actor
        elif decl.role == "device":
            actor = Device(decl.label, suite, rng, scn.ttl, cks_label,
                           kp_cks.public, recorder=net)
            world.devices[decl.label] = actor
            world.device_spec[decl.label] = (
                decl.opts.get("machine-id", f"M-{decl.label}"),
                decl.opts.get("dmn", f"DMN-{decl.label}"),
            )
        elif decl.role == "sp":
            services = tuple(s for s in decl.opts["services"].split(",") if s)
            actor = ServiceProvider(decl.label, suite, rng, scn.ttl, services,
                                    cks_label, kp_cks.public, recorder=net)
        elif decl.role == "adversary":
            actor = Adversary(decl.label, suite, rng,
                              suite.generate_keypair(scn.seed, decl.label),
                              kp_cks.public, cks_label, recorder=net)
            world.adversary = actor
        world.actors[decl.label] = actor
        if decl.role == "adversary":
            actor.attach(net)
        else:
            net.add_actor(actor)

    for decl in scn.actors:
        if decl.role == "device":
            maker = world.actors[decl.opts["maker"]]
            maker.devices[decl.label] = world.devices[decl.label]
            world.maker_of[decl.label] = maker
        if decl.role == "sp" and cks is not None:
            sp = world.actors[decl.label]
            cks.db.register_sp(SpRecord(sp_id=decl.label, services=sp.services))
    return world


def _attack_action(step: Step) -> Action:
    kind = step.args[0]
    opts = step.opts

    def num(key, default=None):
        if key not in opts:
            if default is None:
                _fail(step.line, f"attack {kind} needs {key}=")
            return default
        try:
            return int(opts[key], 0)
        except ValueError:
            _fail(step.line, f"bad number for {key}: {opts[key]!r}")

    action = Action(kind=kind)
    if kind == "replay":
        action.tag = num("tag")
        action.nth = num("nth", 1)
        action.delay = num("delay", 0)
    elif kind == "tamper":
        action.tag = num("tag")
        action.nth = num("nth", 1)
        action.byte_index = num("byte")
        action.new_byte = num("value")
        action.suppress = "suppress" in step.args[1:] or opts.get("suppress") == "1"
    elif kind in ("fake-sp", "fake-cks"):
        action.tag = num("tag", 0x33 if kind == "fake-sp" else 0x31)
        action.nth = num("nth", 1)
    elif kind == "fake-user":
        if "target" not in opts:
            _fail(step.line, "fake-user needs target=<user id>")
        action.target = opts["target"]
    return action


def run_scenario(scn: Scenario, seed: Optional[int] = None,
                 max_steps: int = DEFAULT_MAX_STEPS) -> RunResult:
    """Execute every step; raises LivelockError if the budget runs out."""
    if seed is not None:
        scn.seed = seed
    net = Simnet(seed=scn.seed, latency=scn.latency,
                 drop_rate=scn.drop_rate, jitter=scn.jitter)
    world = _build(scn, net)

    net.rows.append({
        "kind": "meta", "scenario": scn.name, "seed": scn.seed,
        "crypto_mode": scn.crypto_mode, "hash_alg": scn.hash_alg,
        "ttl": scn.ttl, "drop_rate": scn.drop_rate,
        "actors": {d.label: d.role for d in scn.actors},
        "adversary": world.adversary.label if world.adversary else "",
    })

    quiescent = True
    for step in scn.steps:
        _run_step(step, world, net)
        if not net.run_until_quiescent(max_steps):
            quiescent = False
            break

    net.rows.append({
        "kind": "end", "steps": net.steps, "quiescent": quiescent,
        "final_tick": net.now,
    })
    result = RunResult(scn, net, net.rows, world.actors, quiescent)
    if not quiescent:
        raise LivelockError(
            f"step budget {max_steps} exhausted with traffic still queued "
            f"(scenario {scn.name!r})")
    return result


def _run_step(step: Step, world: _World, net: Simnet) -> None:
    word, args = step.word, step.args
    try:
        if word == "register-device":
            label = args[0]
            machine_id, dmn = world.device_spec[label]
            mfr = world.maker_of[label]
            res = mfr.register_device(machine_id, dmn, label, net.now)
            for send in res.sends:
                net.submit(mfr.label, send)
        elif word == "register-user":
            label, user_id = args
            res = world.devices[label].begin_registration(user_id, net.now)
            world.user_device[user_id] = label
            for send in res.sends:
                net.submit(label, send)
        elif word == "connect":
            label, target = args
            res = world.devices[label].request_connection(target, net.now)
            for send in res.sends:
                net.submit(label, send)
        elif word == "request-service":
            label, service, phrase = args
            res = world.devices[label].request_service(service, phrase.encode(), net.now)
            for send in res.sends:
                net.submit(label, send)
        elif word == "app-message":
            src, peer = args[0], args[1]
            body = " ".join(args[2:]).encode()
            peer_id, address = _resolve_peer(world, peer)
            res = world.actors[src].send_app_data(peer_id, address, body, net.now)
            for send in res.sends:
                net.submit(src, send)
        elif word == "advance":
            net.call_at(net.now + int(args[0]), lambda: None)
        elif word == "attack":
            world.adversary.arm(_attack_action(step))
    except (KeyError, AttributeError) as exc:
        raise ScenarioError(f"line {step.line}: step refers to something the "
                            f"scenario never set up ({exc!r})") from exc
    except (RegistryError, SimnetError, CryptoError) as exc:
        raise ScenarioError(f"line {step.line}: {exc}") from exc
    except AttackScriptError:
        raise


def _resolve_peer(world: _World, peer: str) -> tuple[str, str]:
    """App traffic names either a user id or an actor label; sessions are
    keyed by the former for devices and by sender address for providers."""
    if peer in world.user_device:
        return peer, world.user_device[peer]
    return peer, peer


def trace_lines(rows: list[dict]) -> str:
    import json
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                   for r in rows)


def write_trace(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(trace_lines(rows))
