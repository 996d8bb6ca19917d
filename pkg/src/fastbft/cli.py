"""Command-line entry point: run one scenario file or sweep over replica counts.

Exit codes: 0 clean run, 1 invariant violated, 2 usage or validation error,
3 requests left incomplete at the horizon.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import yaml

from .config import ProtocolConfig
from .simnet import DelayModel, FaultSpec, Scenario, ScenarioError, run

SEED_ENV = "FASTBFT_SEED"

_number = {"type": "number", "minimum": 0}
SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["n"],
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "f": {"type": "integer", "minimum": 0},
        "branching": {"type": "integer", "minimum": 1},
        "clients": {"type": "integer", "minimum": 1},
        "requests": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "delay": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"delta": _number, "jitter": _number, "gst": _number, "chaos": _number},
        },
        "faults": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["target", "kind"],
                "properties": {
                    "target": {"type": "integer", "minimum": 0},
                    "kind": {"type": "string"},
                    "start": _number,
                    "end": _number,
                    "factor": _number,
                },
            },
        },
        "protocol": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                fld.name: ({"type": "string"} if fld.type == "str" else {"type": "number"})
                for fld in fields(ProtocolConfig)
            },
        },
    },
}


class UsageError(Exception):
    pass


def scenario_from_dict(doc: dict, seed: int | None = None) -> Scenario:
    """Schema-check a scenario document and build a validated :class:`Scenario`."""
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise UsageError(f"scenario field {path}: {err.message}")
    proto = dict(doc.get("protocol", {}))
    for fld in fields(ProtocolConfig):
        if fld.name in proto and fld.type == "int":
            proto[fld.name] = int(proto[fld.name])
    branching = doc.get("branching", proto.get("branching", 2))
    proto["branching"] = branching
    try:
        protocol = ProtocolConfig(**proto)
    except ValueError as exc:
        raise UsageError(f"scenario field protocol: {exc}") from None
    scn = Scenario(
        n=doc["n"],
        f=doc.get("f"),
        branching=branching,
        delay=DelayModel(**doc.get("delay", {})),
        faults=tuple(FaultSpec(**spec) for spec in doc.get("faults", [])),
        clients=doc.get("clients", 1),
        requests=doc.get("requests", 10),
        seed=seed if seed is not None else doc.get("seed", 0),
        horizon=doc.get("horizon", 5000.0),
        protocol=protocol,
    )
    scn.validate()
    return scn


def load_scenario(path: str, seed: int | None = None) -> Scenario:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read scenario {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("scenario field <root>: expected a mapping")
    return scenario_from_dict(doc, seed)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an unsigned integer") from None


def cmd_run(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    scn = load_scenario(args.scenario, seed)
    result = run(scn)
    rep = result.report
    if args.trace:
        Path(args.trace).write_text(result.trace_text())
    Path(args.metrics).write_text(rep.to_json() + "\n")
    if not rep.safety:
        print(f"invariant violated: {rep.violation}", file=sys.stderr)
        return 1
    if not rep.liveness:
        print(f"liveness: {rep.completed}/{rep.expected} requests completed by the horizon", file=sys.stderr)
        return 3
    print(
        f"ok: {rep.completed} requests, {rep.messages_per_request:g} msgs/request, "
        f"view_changes={rep.view_changes}, new_trees={rep.new_trees}"
    )
    return 0


PROFILES = {
    "none": lambda n: (),
    "one-wrong-share": lambda n: (FaultSpec(1, "wrong-shares"),),
    "one-silent": lambda n: (FaultSpec(1, "silent-shares"),),
    "crash-primary": lambda n: (FaultSpec(0, "crash", start=5.0),),
    "passive-reboot": lambda n: (FaultSpec(n - 1, "unscheduled-reboot", start=5.0),),
}


def parse_n_list(raw: str) -> list[int]:
    items = [x for x in raw.replace(" ", "").split(",") if x]
    if not items:
        raise UsageError("--n-list needs at least one replica count")
    try:
        return [int(x) for x in items]
    except ValueError:
        raise UsageError(f"--n-list: not an integer list: {raw!r}") from None


def sweep_rows(n_list: list[int], profile: str, seeds: int, requests: int = 10) -> list[dict]:
    rows = []
    for n in n_list:
        reps = []
        for seed in range(seeds):
            scn = Scenario(n=n, faults=PROFILES[profile](n), requests=requests, seed=seed)
            try:
                scn.validate()
            except ScenarioError as exc:
                raise UsageError(str(exc)) from None
            reps.append(run(scn).report)
        lat = [x for r in reps for x in r.latencies.values()]
        rows.append(
            {
                "n": n,
                "f": (n - 1) // 2,
                "seeds": seeds,
                "msgs_per_request": round(sum(r.messages_per_request for r in reps) / len(reps), 6),
                "mean_latency": round(sum(lat) / len(lat), 6) if lat else 0.0,
                "view_changes": round(sum(r.view_changes for r in reps) / len(reps), 6),
                "new_trees": round(sum(r.new_trees for r in reps) / len(reps), 6),
                "safe_runs": sum(r.safety for r in reps),
                "live_runs": sum(r.liveness for r in reps),
            }
        )
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_sweep(args) -> int:
    n_list = parse_n_list(args.n_list)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    rows = sweep_rows(n_list, args.faults, args.seeds, args.requests)
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    text = f"# generated_at: {stamp}\n" + rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0 if all(r["safe_runs"] == r["seeds"] for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastbft", description="Simulate the FastBFT protocol.")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one scenario file")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int, default=None, help=f"overrides the file; default from ${SEED_ENV}")
    r.add_argument("--trace")
    r.add_argument("--metrics", required=True)
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="aggregate metrics over replica counts and seeds")
    s.add_argument("--n-list", required=True, help="comma-separated replica counts, e.g. 5,9,17")
    s.add_argument("--faults", default="none", choices=sorted(PROFILES))
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--requests", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
