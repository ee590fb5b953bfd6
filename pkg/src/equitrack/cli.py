"""Command line entry point.

    equitrack <command> [--config job.json] [--key value ...]

Flags mirror the job dataclass fields in :mod:`equitrack.experiments`; a JSON
config supplies defaults and flags override it.  ``replay manifest.json``
re-runs a finished job and checks its output hashes.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, asdict, fields

from .experiments import JOBS, job_from_dict, replay, run_job


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s}")


def _add_job_flags(p: argparse.ArgumentParser, cls, prefix: str = "") -> None:
    for f in fields(cls):
        default = f.default if f.default is not MISSING else f.default_factory()
        flag = "--" + (prefix + f.name).replace("_", "-")
        dest = prefix + f.name
        if hasattr(default, "__dataclass_fields__"):
            _add_job_flags(p, type(default), prefix=f.name + ".")
        elif isinstance(default, bool):
            p.add_argument(flag, dest=dest, type=_parse_bool, default=None, metavar="BOOL")
        elif isinstance(default, tuple):
            kind = type(default[0]) if default else str
            p.add_argument(flag, dest=dest, type=kind, nargs="*", default=None)
        else:
            p.add_argument(flag, dest=dest, type=type(default), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="equitrack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, cls in JOBS.items():
        p = sub.add_parser(name, help=(cls.__doc__ or name).splitlines()[0])
        p.add_argument("--config", help="JSON file with job fields")
        _add_job_flags(p, cls)
    r = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    r.add_argument("manifest")
    r.add_argument("--out", default=None)
    return parser


def resolve_job(command: str, args: argparse.Namespace):
    cfg = asdict(JOBS[command]())
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
        for k, v in file_cfg.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    for key, value in vars(args).items():
        if value is None or key in ("command", "config", "verbose"):
            continue
        if "." in key:
            outer, inner = key.split(".", 1)
            cfg[outer][inner] = value
        else:
            cfg[key] = value
    return job_from_dict(command, cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "replay":
        result = replay(args.manifest, args.out)
        for name, ok in sorted(result.items()):
            print(f"{'same' if ok else 'DIFF'}  {name}")
        return 0 if all(result.values()) else 1
    job = resolve_job(args.command, args)
    manifest = run_job(args.command, job)
    print(f"wrote {manifest}")
    if args.command == "verify":
        print((manifest.parent / "verify.csv").read_text(), end="")
    if args.command in ("eval", "track"):
        print((manifest.parent / "summary.json").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
