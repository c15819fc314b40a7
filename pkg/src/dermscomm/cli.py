"""Command-line entry point.

Every flag can also come from an environment variable named
``DERMSCOMM_<FLAG>`` (upper case, dashes as underscores), e.g.
``DERMSCOMM_SEED=7`` or ``DERMSCOMM_JOBS=4``. Flags given on the command
line win over the environment.

Exit codes: 0 success / functional, 1 nonfunctional or no usable result,
2 invalid input or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .der import fleet_to_json
from .engine import run_scenario
from .metrics import (
    CAMPAIGN_HEADER,
    BaselineBroken,
    CampaignRow,
    Experiment,
    FunctionalityMetric,
    SearchRange,
    campaign_resolved,
    campaign_rows_csv,
    default_range,
    is_functional,
    limit_for,
    load_campaign,
    run_campaign,
)
from .scenario import (
    DEFAULT_BATTERY_C_RATE,
    DEFAULT_IMPEDANCE_SCALE,
    DEFAULT_VPP_SCALE,
    REFERENCE_VPP_AFTER,
    REFERENCE_VPP_BEFORE,
    ConfigError,
    default_scenario,
    desk_system,
    load_scenario,
)

ENV_PREFIX = "DERMSCOMM_"
log = logging.getLogger("dermscomm")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


class UsageError(Exception):
    pass


def _env(dest: str, default):
    return os.environ.get(ENV_PREFIX + dest.upper(), default)


def _add(p: argparse.ArgumentParser, *flags, **kw):
    dest = kw.get("dest") or flags[0].lstrip("-").replace("-", "_")
    if kw.get("action") == "store_true":
        kw["default"] = _env(dest, "").lower() in ("1", "true", "yes", "on")
    else:
        kw["default"] = _env(dest, kw.get("default"))
    p.add_argument(*flags, **kw)


def _provenance(command: str, config: dict) -> dict:
    return {"tool": "dermscomm", "version": __version__, "command": command, "config": config}


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)


# ---------------------------------------------------------------- scenario


def _scenario_from_args(args):
    sc = load_scenario(args.scenario) if args.scenario else default_scenario()
    over = {}
    if args.seed is not None:
        over["master_seed"] = int(args.seed)
    for dest, field in (
        ("horizon", "horizon"),
        ("dt_grid", "dt_grid"),
        ("coordinator_period", "coordinator_period"),
        ("measurement_period", "measurement_period"),
        ("der_period", "der_period"),
        ("alpha", "alpha"),
        ("beta", "beta"),
    ):
        val = getattr(args, dest, None)
        if val is not None:
            over[field] = float(val)
    if over:
        try:
            sc = replace(sc, **over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return sc


def _scenario_flags(p):
    _add(p, "--scenario", metavar="PATH", help="scenario JSON (defaults to the desk-scale scenario)")
    _add(p, "--horizon", type=float, help="override horizon, s")
    _add(p, "--dt-grid", type=float, help="override grid step, s")
    _add(p, "--coordinator-period", type=float, help="override coordinator period, s")
    _add(p, "--measurement-period", type=float, help="override grid-service measurement period, s")
    _add(p, "--der-period", type=float, help="override local-controller/DER period, s")
    _add(p, "--alpha", type=float, help="override dual step size")
    _add(p, "--beta", type=float, help="override primal step size")


# ---------------------------------------------------------------- commands


def cmd_generate_feeder(args) -> int:
    if args.nodes < 2:
        raise UsageError("--nodes must be at least 2")
    if args.pv < 0:
        raise UsageError("--pv must be nonnegative")
    if not 0.0 <= args.battery_fraction <= 1.0:
        raise UsageError("--battery-fraction must lie in [0, 1]")
    seed = int(args.seed) if args.seed is not None else 1
    try:
        feeder, fleet = desk_system(
            node_count=args.nodes,
            pv_count=args.pv,
            battery_fraction=args.battery_fraction,
            seed=seed,
            impedance_scale=args.impedance_scale,
            vpp_scale=args.vpp_scale,
            battery_c_rate=args.battery_c_rate,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    params = {
        "nodes": args.nodes,
        "pv": args.pv,
        "battery_fraction": args.battery_fraction,
        "seed": seed,
        "impedance_scale": args.impedance_scale,
        "vpp_scale": args.vpp_scale,
        "battery_c_rate": args.battery_c_rate,
    }
    prov = _provenance("generate-feeder", params)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    fdoc = feeder.to_json()
    fdoc["provenance"] = prov
    (out / "feeder.json").write_text(json.dumps(fdoc, indent=1, sort_keys=True) + "\n")
    (out / "fleet.json").write_text(
        json.dumps({"provenance": prov, "units": fleet_to_json(fleet)}, indent=1, sort_keys=True) + "\n"
    )
    sdoc = {
        "feeder": {"path": "feeder.json"},
        "fleet": {"path": "fleet.json"},
        "disturbance": {
            "before_mw": [args.vpp_scale * v for v in REFERENCE_VPP_BEFORE],
            "after_mw": [args.vpp_scale * v for v in REFERENCE_VPP_AFTER],
        },
        "master_seed": seed,
    }
    (out / "scenario.json").write_text(json.dumps(sdoc, indent=1, sort_keys=True) + "\n")
    log.info("wrote feeder.json, fleet.json and scenario.json to %s", out)
    return EXIT_OK


def cmd_run(args) -> int:
    sc = _scenario_from_args(args)
    log.info("running %g s horizon, %d DERs, seed %d", sc.horizon, len(sc.fleet), sc.master_seed)
    trace = run_scenario(sc, record_setpoints=args.verbose)
    metric = FunctionalityMetric.from_spec(sc.metric)
    verdict = is_functional(trace, metric)
    header = _provenance("run", sc.resolved())
    _write_text(args.out or "trace.csv", trace.to_csv(header, verbose=args.verbose))
    if verdict:
        print(f"FUNCTIONAL first_satisfied_s={verdict.first_satisfied!r}")
        return EXIT_OK
    print("NONFUNCTIONAL")
    return EXIT_FAIL


def _rows_to_csv(rows, header: dict) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CAMPAIGN_HEADER)
    w.writerows(campaign_rows_csv(rows))
    return buf.getvalue()


def _summary(rows) -> str:
    lines = [f"{'category':<16}{'kind':<14}{'secondary':>10}{'limit':>12}  bracket                 status"]
    for r, cells in zip(rows, campaign_rows_csv(rows)):
        br = f"[{cells[4]}, {cells[5]}]" if r.result else ""
        lines.append(f"{r.category:<16}{r.fault_kind:<14}{cells[2]:>10}{cells[3]:>12}  {br:<24}{r.status}")
    return "\n".join(lines) + "\n"


def cmd_find_limit(args) -> int:
    sc = _scenario_from_args(args)
    try:
        exp = Experiment(sc, args.experiment, args.category, args.secondary)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rng = default_range(args.experiment, sc)
    search = SearchRange(
        rng.lo if args.lo is None else args.lo,
        rng.hi if args.hi is None else args.hi,
        rng.resolution if args.resolution is None else args.resolution,
    )
    if not search.lo < search.hi or search.resolution <= 0:
        raise UsageError("need lo < hi and a positive resolution")
    seed = sc.master_seed
    base = dict(trials=args.trials, theta=args.theta, seed=seed)
    try:
        res = limit_for(exp, search, args.trials, args.theta, seed, jobs=args.jobs)
        row = CampaignRow(exp.category, exp.kind, exp.secondary, res, "unbounded" if res.unbounded else "ok", **base)
    except BaselineBroken as exc:
        log.error("%s", exc)
        row = CampaignRow(exp.category, exp.kind, exp.secondary, None, "baseline_broken", error=str(exc), **base)
    config = {
        "experiment": args.experiment,
        "category": args.category,
        "secondary": args.secondary,
        "search": {"lo": search.lo, "hi": search.hi, "resolution": search.resolution},
        "trials": args.trials,
        "theta": args.theta,
        "scenario": sc.resolved(),
    }
    text = _rows_to_csv([row], _provenance("find-limit", config))
    _write_text(args.out, text)
    if args.out not in (None, "-"):
        sys.stdout.write(_summary([row]))
    return EXIT_OK if row.result is not None else EXIT_FAIL


def cmd_campaign(args) -> int:
    if not args.campaign:
        raise UsageError("--campaign PATH is required")
    camp = load_campaign(args.campaign)
    over = {}
    if args.seed is not None:
        over["master_seed"] = int(args.seed)
    if args.trials is not None:
        over["trials"] = args.trials
    if args.theta is not None:
        over["theta"] = args.theta
    if over:
        camp = replace(camp, **over)
    log.info("campaign %s: %d points", camp.experiment, len(camp.points()))
    rows = run_campaign(camp, jobs=args.jobs)
    text = _rows_to_csv(rows, _provenance("campaign", campaign_resolved(camp)))
    _write_text(args.out or "campaign.csv", text)
    sys.stdout.write(_summary(rows))
    for r in rows:
        if r.error:
            log.warning("%s %s %s: %s", r.category, r.fault_kind, r.secondary_param, r.error)
    if rows and not any(r.result is not None for r in rows):
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add(common, "--out", metavar="PATH", help="output file (directory for generate-feeder)")
    _add(common, "--seed", type=int, metavar="U64", help="master seed")
    _add(common, "--jobs", type=int, default=1, metavar="N", help="worker processes")
    _add(common, "--verbose", action="store_true", help="debug logging; per-DER trace columns")

    parser = argparse.ArgumentParser(prog="dermscomm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-feeder", parents=[common], help="write feeder, fleet and scenario JSON")
    _add(g, "--nodes", type=int, default=96)
    _add(g, "--pv", type=int, default=24)
    _add(g, "--battery-fraction", type=float, default=0.5)
    _add(g, "--impedance-scale", type=float, default=DEFAULT_IMPEDANCE_SCALE)
    _add(g, "--vpp-scale", type=float, default=DEFAULT_VPP_SCALE)
    _add(g, "--battery-c-rate", type=float, default=DEFAULT_BATTERY_C_RATE)
    g.set_defaults(func=cmd_generate_feeder)

    r = sub.add_parser("run", parents=[common], help="run one scenario, write its trace")
    _scenario_flags(r)
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("find-limit", parents=[common], help="search one severity limit")
    _scenario_flags(f)
    _add(f, "--experiment", choices=["packet_loss", "link_failure", "delay"], default="delay")
    _add(f, "--category", default="pq_measurement")
    _add(f, "--secondary", type=float, help="channel fraction (packet loss) or downtime s (link failure)")
    _add(f, "--lo", type=float)
    _add(f, "--hi", type=float)
    _add(f, "--resolution", type=float)
    _add(f, "--trials", type=int, default=10)
    _add(f, "--theta", type=float, default=1.0)
    f.set_defaults(func=cmd_find_limit)

    c = sub.add_parser("campaign", parents=[common], help="run a limit-finding campaign")
    _add(c, "--campaign", metavar="PATH", help="campaign JSON")
    _add(c, "--trials", type=int)
    _add(c, "--theta", type=float)
    c.set_defaults(func=cmd_campaign)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except json.JSONDecodeError as exc:
        log.error("malformed JSON at line %d column %d: %s", exc.lineno, exc.colno, exc.msg)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
    except UsageError as exc:
        log.error("%s", exc)
    except OSError as exc:
        log.error("I/O error: %s", exc)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
