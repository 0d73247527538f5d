"""Command-line front end: ``adcp plan``, ``adcp compare`` and ``adcp validate``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import data_path
from .catalog import CatalogConfig, CatalogError
from .costmodel import DeviceError, load_device
from .demand import DemandError, demand_from_dict, load_demand
from .netgraph import NetworkError, load_network
from .neural import save_checkpoint
from .oracle import OracleError, SurrogateModel, make_oracle
from .orchestrator import (
    OPTIMIZERS,
    PlanDocument,
    SearchConfig,
    SearchError,
    check_plan_document,
    emit_plan,
    exhaustive_search,
    read_plan,
    write_plan,
)
from .plan import PlanError

log = logging.getLogger("adcp")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
INPUT_ERRORS = (NetworkError, DeviceError, DemandError, PlanError, SearchError, OracleError, CatalogError)


class CliError(Exception):
    pass


def resolve(path: str, kind: str) -> Path:
    """``path`` as given if it exists, else the bundled fixture of that name."""
    p = Path(path)
    if p.exists():
        return p
    if p.parent.parts:
        return p
    for name in (p.name, p.name + ".json"):
        bundled = Path(str(data_path(kind, name)))
        if bundled.exists():
            return bundled
    return p


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"{p}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: line {exc.lineno}: {exc.msg}") from None
    unknown = set(doc) - {"catalog", "search", "surrogate", "oracle"}
    if unknown:
        raise CliError(f"{p}: unknown config sections {sorted(unknown)}")
    return doc


def summary_line(doc: PlanDocument) -> str:
    """One-line summary computed from the plan document alone."""
    r, b = doc.report, doc.baseline
    status = "feasible" if doc.feasible else "INFEASIBLE"
    obj = "n/a" if doc.objective is None else f"{doc.objective:.4f}"
    parts = [f"{doc.optimizer} on {doc.network}/{doc.device}: {status}, objective {obj}, A {r['A']:.4f}"]
    if b:
        parts.append("vs all-Skip: " + ", ".join(
            f"{key} {_ratio(b[key], r[key]):.2f}x" for key in ("S_p", "C", "T", "E")))
    if doc.violations:
        parts.append("violations: " + "; ".join(
            f"{v['constraint']} margin {v['margin']:g}" for v in doc.violations))
    return " | ".join(parts)


def _ratio(base, value):
    return float("inf") if value == 0 else base / value


def cmd_plan(args) -> int:
    cfg_doc = load_config(args.config)
    net = load_network(resolve(args.net, "networks"))
    device = load_device(resolve(args.device, "devices"))
    demand = load_demand(resolve(args.demand, "demands"), device)
    catalog = CatalogConfig.from_dict(cfg_doc.get("catalog"))
    search = dict(cfg_doc.get("search", {}))
    if args.episodes is not None:
        search["dqn_episodes"] = search["ddpg_episodes"] = args.episodes
    config = SearchConfig.from_dict(search, seed=args.seed, rounds=args.rounds, workers=args.workers)
    surrogate = SurrogateModel.from_dict(cfg_doc.get("surrogate"), seed=config.seed)
    timeout = float(cfg_doc.get("oracle", {}).get("timeout", 600.0))
    oracle = make_oracle(args.oracle, surrogate, config.workers, timeout)
    try:
        if args.optimizer == "exhaustive" and args.pair_mode:
            result = exhaustive_search(net, demand, device, oracle, pair_mode=True, config=config, catalog=catalog)
        else:
            result = OPTIMIZERS[args.optimizer](net, demand, device, oracle, config=config, catalog=catalog)
    finally:
        oracle.close()
    doc = emit_plan(result, device, demand)
    out = write_plan(args.out, doc)
    if args.log_out:
        Path(args.log_out).write_text(json.dumps(result.log, indent=1) + "\n", encoding="utf-8")
    if args.checkpoint_dir:
        ckpt = Path(args.checkpoint_dir)
        ckpt.mkdir(parents=True, exist_ok=True)
        for name, agent in sorted(result.agents.items()):
            nets = [agent.actor] + agent.critic.nets() if name == "ddpg" else agent.net.nets()
            save_checkpoint(ckpt / f"{name}.ckpt", nets)
    print(summary_line(read_plan(out)))
    return EXIT_OK if doc.feasible else EXIT_INFEASIBLE


def compare_rows(docs: list, baseline: PlanDocument) -> list[dict]:
    networks = {d.network for _, d in docs} | {baseline.network}
    if len(networks) > 1:
        raise CliError(f"plans are for different networks: {', '.join(sorted(networks))}")
    b = baseline.report
    rows = []
    for name, d in docs:
        r = d.report
        rows.append({
            "plan": name,
            "optimizer": d.optimizer,
            "feasible": d.feasible,
            "A_loss_pct": round((b["A"] - r["A"]) * 100, 6),
            "S_p_x": round(_ratio(b["S_p"], r["S_p"]), 6),
            "T_x": round(_ratio(b["T"], r["T"]), 6),
            "E_x": round(_ratio(b["E"], r["E"]), 6),
        })
    return rows


def format_table(rows: list[dict], fmt: str) -> str:
    cols = ["plan", "optimizer", "feasible", "A_loss_pct", "S_p_x", "T_x", "E_x"]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, cols, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()
    head = ["plan", "optimizer", "feasible", "A loss (%)", "S_p (x)", "T (x)", "E (x)"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for row in rows:
        lines.append("| " + " | ".join(str(row[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    if len(args.plans) < 2:
        raise CliError("compare needs at least two plan files")
    docs = [(Path(p).name, read_plan(p)) for p in args.plans]
    baseline = read_plan(args.baseline) if args.baseline else docs[0][1]
    text = format_table(compare_rows(docs, baseline), args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _validate_one(path: Path, net_hint) -> list[str]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        return [f"{path}: {exc.strerror}"]
    except json.JSONDecodeError as exc:
        return [f"{path}: line {exc.lineno}: {exc.msg}"]
    if not isinstance(doc, dict):
        return [f"{path}: expected a JSON object"]
    try:
        if "layers" in doc:
            load_network(path)
        elif "macs_per_sec" in doc:
            load_device(path)
        elif "a_min" in doc:
            if doc.get("mu") == "auto":
                doc = dict(doc, mu=[0.5, 0.5, 0.5, 0.5])
            demand_from_dict(doc)
        elif "plan" in doc and "report" in doc:
            plan_doc = PlanDocument.from_dict(doc)
            net = net_hint
            if net is None:
                bundled = Path(str(data_path("networks", f"{plan_doc.network}.json")))
                net = load_network(bundled) if bundled.exists() else None
            return [f"{path}: {p}" for p in check_plan_document(plan_doc, net)]
        else:
            return [f"{path}: not a network, device, demand or plan document"]
    except INPUT_ERRORS as exc:
        msg = str(exc)
        return [msg if msg.startswith(str(path)) else f"{path}: {msg}"]
    return []


def cmd_validate(args) -> int:
    net = load_network(resolve(args.net, "networks")) if args.net else None
    paths = [Path(p) for p in args.paths]
    if not paths:
        paths = sorted(Path(str(data_path())).glob("*/*.json"))
    problems = []
    for p in paths:
        found = _validate_one(p, net)
        problems += found
        if not found:
            print(f"ok {p}")
    for msg in problems:
        print(f"violation: {msg}")
    return EXIT_ERROR if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adcp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="search for a compression plan")
    p.add_argument("--net", required=True, help="network JSON (bundled name or path)")
    p.add_argument("--device", required=True, help="device profile JSON")
    p.add_argument("--demand", required=True, help="demand JSON")
    p.add_argument("--optimizer", choices=sorted(OPTIMIZERS), default="two-phase")
    p.add_argument("--pair-mode", action="store_true", help="exhaustive: one conv x one fc technique")
    p.add_argument("--oracle", default="surrogate", help="'surrogate' or 'external:<command>'")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int, help="episodes per DQN and per DDPG phase")
    p.add_argument("--rounds", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--config", help="JSON with catalog/search/surrogate/oracle sections")
    p.add_argument("--out", default="plan.json")
    p.add_argument("--log-out", help="write the per-episode training log here")
    p.add_argument("--checkpoint-dir", help="write agent checkpoints here")
    p.set_defaults(func=cmd_plan)

    c = sub.add_parser("compare", help="tabulate plans against a baseline plan")
    c.add_argument("plans", nargs="+")
    c.add_argument("--baseline", help="baseline plan file (default: the first plan)")
    c.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="check network/device/demand/plan files")
    v.add_argument("paths", nargs="*", help="files to check (default: bundled fixtures)")
    v.add_argument("--net", help="network to check plan files against")
    v.set_defaults(func=cmd_validate)
    return parser


def _setup_logging():
    level = os.environ.get("ADCP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, OSError, *INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
