"""Command-line entry point: validate, reason, query, simulate, evaluate, sweep.

Exit codes: 0 success, 1 parse or domain error, 2 I/O or usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from nscr import __version__
from nscr.dsl import ParseError, parse_facts, parse_policies, parse_query, parse_rules, serialize_facts
from nscr.facts import Fact, FactStore, SchemaRegistry, default_registry, validate_fact
from nscr.governance import (
    GovernanceConfig,
    GovernanceError,
    Retention,
    dump_decisions_jsonl,
    dumps_canonical,
    export_trace,
    govern,
    pseudonymize,
)
from nscr.reasoner import CompileError, SupportConfig, SupportConfigError, compile_rule, dump_hypotheses_jsonl, reason
from nscr import evaluation as ev
from nscr import simgen
from nscr.query import QueryError, execute_query

log = logging.getLogger("nscr")

OK, DOMAIN, IO = 0, 1, 2


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _read(path: str | Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError(IO, f"cannot read {path}: {err.strerror or err}") from None


def _digest(path: str | Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as err:
        raise CliError(IO, f"cannot read {path}: {err.strerror or err}") from None


def _write(out: Path, name: str, text: str) -> str:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8")
    except OSError as err:
        raise CliError(IO, f"cannot write {out / name}: {err.strerror or err}") from None
    return name


def _manifest(out: Path, command: str, config: dict[str, Any], inputs: Sequence[str | Path],
              outputs: list[str], seed: int | None = None) -> None:
    doc = {
        "command": command,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs},
        "seed": seed,
        "version": __version__,
        "outputs": sorted(outputs),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    _write(out, "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _diag(path: str, errors: Sequence[ParseError]) -> str:
    return "\n".join(f"{path}:{e.span.line}:{e.span.column}: {e.message}" for e in errors)


def _registry(path: str | None) -> SchemaRegistry:
    if path is None:
        return default_registry()
    try:
        return SchemaRegistry.from_dict(json.loads(_read(path)))
    except (ValueError, KeyError) as err:
        raise CliError(DOMAIN, f"{path}: invalid registry: {err}") from None


def _load_facts(path: str, reg: SchemaRegistry) -> list[Fact]:
    facts, errors = parse_facts(_read(path), reg)
    if errors:
        raise CliError(DOMAIN, _diag(path, errors))
    return facts


def _json_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        return json.loads(_read(path))
    except json.JSONDecodeError as err:
        raise CliError(DOMAIN, f"{path}: invalid JSON: {err}") from None


# -- commands -----------------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    reg = _registry(args.registry)
    facts, errors = parse_facts(_read(args.facts), reg)
    lines = [_diag(args.facts, errors)] if errors else []
    for f in facts:
        lines += [f"{args.facts}: {f.id}: {v}" for v in validate_fact(f, reg)]
    if lines:
        print("\n".join(lines), file=sys.stderr)
        return DOMAIN
    print(f"{args.facts}: {len(facts)} facts ok")
    return OK


def _pick(args: argparse.Namespace, cfg: dict[str, Any], name: str, default: Any = None) -> Any:
    v = getattr(args, name)
    return cfg.get(name, default) if v is None else v


def cmd_reason(args: argparse.Namespace) -> int:
    cfg = _json_config(args.config)
    facts_path = _pick(args, cfg, "facts")
    rules_path = _pick(args, cfg, "rules")
    policies_path = _pick(args, cfg, "policies")
    tau_s = _pick(args, cfg, "tau_s")
    tau_delta = _pick(args, cfg, "tau_delta")
    retention = _pick(args, cfg, "retention")
    seed = _pick(args, cfg, "seed", 0)
    missing = [n for n, v in [("--facts", facts_path), ("--rules", rules_path), ("--tau-s", tau_s),
                              ("--tau-delta", tau_delta), ("--retention", retention)] if v is None]
    if missing:
        raise CliError(IO, f"missing required settings: {', '.join(missing)}")
    try:
        support = SupportConfig(**cfg.get("support", {}))
    except (TypeError, SupportConfigError) as err:
        raise CliError(DOMAIN, f"support: {err}") from None
    reg = _registry(args.registry)
    facts = _load_facts(facts_path, reg)
    rule_asts, rerr = parse_rules(_read(rules_path))
    if rerr:
        raise CliError(DOMAIN, _diag(rules_path, rerr))
    policies = []
    if policies_path:
        policies, perr = parse_policies(_read(policies_path))
        if perr:
            raise CliError(DOMAIN, _diag(policies_path, perr))
    try:
        gcfg = GovernanceConfig(float(tau_s), float(tau_delta), Retention(retention), tuple(policies), support)
        rules = [compile_rule(r, reg) for r in rule_asts]
    except (GovernanceError, CompileError, ValueError) as err:
        raise CliError(DOMAIN, str(err)) from None
    store = FactStore(facts, reg)
    hyps = reason(rules, store, support)
    decisions = govern(hyps, store, gcfg)
    log.info("%d facts, %d hypotheses, %d decisions", len(facts), len(hyps), len(decisions))

    out = Path(args.out)
    level = gcfg.retention
    if level is Retention.L2:
        names = pseudonymize({v for d in decisions if d.candidate for _, v in d.candidate.bindings
                              if isinstance(v, str)}, seed)
        hyp_text = ""  # hypothesis rows name entities; only aggregates survive at L2
        dec_text = dump_decisions_jsonl(decisions, names)
    else:
        hyp_text = dump_hypotheses_jsonl(hyps)
        dec_text = dump_decisions_jsonl(decisions)
    outputs = [_write(out, "hypotheses.jsonl", hyp_text), _write(out, "decisions.jsonl", dec_text)]
    trace = export_trace(facts, hyps, decisions, level, seed=seed)
    outputs.append(_write(out, "trace.json", dumps_canonical(trace) + "\n"))
    inputs = [p for p in (facts_path, rules_path, policies_path, args.registry, args.config) if p]
    resolved = {"facts": facts_path, "rules": rules_path, "policies": policies_path, "tau_s": gcfg.tau_s,
                "tau_delta": gcfg.tau_delta, "retention": level.value,
                "support": {"weight": support.weight, "lambda_v": support.lambda_v,
                            "lambda_p": support.lambda_p, "eps": support.eps}}
    _manifest(out, "reason", resolved, inputs, outputs + ["manifest.json"], seed)
    for d in decisions:
        what = d.candidate.label() if d.candidate else "-"
        print(f"{d.outcome.value:6} {what} {','.join(d.reasons)}".rstrip())
    return OK


def cmd_query(args: argparse.Namespace) -> int:
    reg = _registry(args.registry)
    store = FactStore(_load_facts(args.facts, reg), reg)
    text = args.query if args.query is not None else _read(args.query_file)
    try:
        q = parse_query(text.strip())
    except ParseError as err:
        raise CliError(DOMAIN, f"query:{err.span.line}:{err.span.column}: {err.message}") from None
    anchor = None
    if args.anchor is not None:
        if args.anchor not in store:
            raise CliError(DOMAIN, f"anchor {args.anchor} is not a fact id in {args.facts}")
        anchor = store.get(args.anchor)
    try:
        result = execute_query(q, store, anchor)
    except QueryError as err:
        raise CliError(DOMAIN, str(err)) from None
    sys.stdout.write(result.table())
    if args.out:
        out = Path(args.out)
        outputs = [_write(out, "result.json", json.dumps(result.to_json(), indent=2) + "\n")]
        inputs = [p for p in (args.facts, args.query_file, args.registry) if p]
        _manifest(out, "query", {"query": text.strip(), "anchor": args.anchor}, inputs,
                  outputs + ["manifest.json"])
    return OK


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.config is None:
        args.config = str(resources.files("nscr.data").joinpath("sim_default.json"))
    raw = _json_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = simgen.SimConfig.from_json(raw)
        ep = simgen.simulate(cfg)
    except simgen.SimConfigError as err:
        raise CliError(DOMAIN, f"{args.config}: {err}") from None
    out = Path(args.out)
    outputs = [
        _write(out, "gt.facts", serialize_facts(list(ep.gt.facts))),
        _write(out, "obs.facts", serialize_facts(list(ep.obs_facts))),
        _write(out, "labels.jsonl", simgen.dump_labels_jsonl(ep.gt.labels)),
    ]
    _manifest(out, "simulate", cfg.to_json(), [args.config], outputs + ["manifest.json"], cfg.seed)
    print(f"{len(ep.gt.facts)} ground-truth facts, {len(ep.obs_facts)} observed, {len(ep.gt.labels)} labels")
    return OK


# -- evaluate / sweep ---------------------------------------------------------------------


def _episode_dirs(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise CliError(IO, f"{root} is not a directory")
    subs = sorted(p for p in root.iterdir() if p.is_dir())
    return {p.name: p for p in subs} if subs else {".": root}


def _jsonl(path: Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in _read(path).splitlines() if line.strip()]


def _pred_side(d: Path, reg: SchemaRegistry) -> tuple[list[ev.Prediction], list[Fact] | None]:
    if (d / "decisions.jsonl").exists():
        preds = ev.predictions(_jsonl(d / "decisions.jsonl"))
    elif (d / "labels.jsonl").exists():
        preds = ev.predictions(_jsonl(d / "labels.jsonl"))
    else:
        raise CliError(IO, f"{d} holds neither decisions.jsonl nor labels.jsonl")
    facts = None
    if (d / "trace.json").exists():
        trace = json.loads(_read(d / "trace.json"))
        if "facts" in trace:
            facts = [Fact.from_json(f) for f in trace["facts"]]
    elif (d / "gt.facts").exists():
        facts = _load_facts(str(d / "gt.facts"), reg)
    return preds, facts


def _duration(facts: Sequence[Fact] | None, labels: Sequence[dict[str, Any]]) -> int:
    ends = [f.time.end for f in facts or ()] + [lb["time"]["end"] for lb in labels]
    return max(ends, default=0) + 1


def _evaluate(args: argparse.Namespace, grid: list[float], command: str) -> int:
    reg = _registry(args.registry)
    pred_root, gold_root = Path(args.pred), Path(args.gold)
    pred_eps, gold_eps = _episode_dirs(pred_root), _episode_dirs(gold_root)
    if set(pred_eps) != set(gold_eps):
        only_p = sorted(set(pred_eps) - set(gold_eps))
        only_g = sorted(set(gold_eps) - set(pred_eps))
        raise CliError(DOMAIN, f"episode sets differ: only in pred {only_p}, only in gold {only_g}")

    all_preds: list[ev.Prediction] = []
    records: list[ev.Record] = []
    pred_facts: list[Fact] = []
    gold_facts: list[Fact] = []
    have_facts = True
    n_gold = n_ans = n_match = 0
    warn = {"matched": 0, "false_alerts": 0, "leads": [], "ious": [], "gold": 0, "hours": 0.0}
    per_episode = {}
    for name in sorted(gold_eps):
        gdir = gold_eps[name]
        labels = _jsonl(gdir / "labels.jsonl")
        gfacts = _load_facts(str(gdir / "gt.facts"), reg) if (gdir / "gt.facts").exists() else None
        preds, pfacts = _pred_side(pred_eps[name], reg)
        scores = ev.label_scores(preds, labels, args.label_iou)
        per_episode[name] = scores
        n_gold += scores["gold"]
        n_ans += scores["answered"]
        n_match += scores["matched"]
        all_preds += preds
        records += ev.records_from(preds, labels, args.label_iou)
        if gfacts is None or pfacts is None:
            have_facts = False
        else:
            pred_facts += [f for f in pfacts if f.modality != "metadata"]
            gold_facts += [f for f in gfacts if f.modality != "metadata"]
        dur = _duration(gfacts, labels)
        w = ev.early_warning_metrics(ev.warnings_from(preds, "confusion_candidate"),
                                     ev.gold_episodes(labels, "confusion_candidate"), args.window, dur)
        warn["matched"] += w.matched
        warn["false_alerts"] += w.false_alerts
        warn["gold"] += len(ev.gold_episodes(labels, "confusion_candidate"))
        warn["hours"] += dur / ev.SECONDS_PER_HOUR
        if w.mean_lead_time is not None:
            warn["leads"].append((w.mean_lead_time, w.matched))
            warn["ious"].append((w.temporal_iou, w.matched))

    precision = n_match / n_ans if n_ans else 1.0
    recall = n_match / n_gold if n_gold else 1.0
    report: dict[str, Any] = {
        "episodes": sorted(gold_eps),
        "labels": {"precision": precision, "recall": recall,
                   "f1": 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall),
                   "answered": n_ans, "gold": n_gold, "matched": n_match, "iou_threshold": args.label_iou},
        "per_episode": per_episode,
    }
    points = ev.risk_coverage_curve(records, grid) if records else []
    report["risk_coverage"] = [p.to_json() for p in points]
    accepted = [r for r in records if not r.vetoed]
    report["ece"] = ev.ece(accepted) if accepted else None
    if have_facts and (pred_facts or gold_facts):
        report["grounding"] = ev.grounding_fidelity(pred_facts, gold_facts, ev.MatchCriterion(args.fact_iou),
                                                    reg).to_json()
    m = warn["matched"]
    report["early_warning"] = {
        "construct": "confusion_candidate",
        "window": args.window,
        "mean_lead_time": sum(a * n for a, n in warn["leads"]) / m if m else None,
        "temporal_iou": sum(a * n for a, n in warn["ious"]) / m if m else None,
        "false_alert_rate": warn["false_alerts"] / warn["hours"] if warn["hours"] else None,
        "missed_episode_rate": (warn["gold"] - m) / warn["gold"] if warn["gold"] else 0.0,
    }
    out = Path(args.out)
    outputs = [_write(out, "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n"),
               _write(out, "curve.csv", ev.curve_csv(points))]
    inputs = sorted(str(p) for d in list(pred_eps.values()) + list(gold_eps.values())
                    for p in d.iterdir() if p.is_file() and p.name != "manifest.json")
    _manifest(out, command, {"pred": str(pred_root), "gold": str(gold_root), "grid": grid,
                             "label_iou": args.label_iou, "fact_iou": args.fact_iou, "window": args.window},
              inputs, outputs + ["manifest.json"])
    print(f"precision {precision:.4f}  recall {recall:.4f}  records {len(records)}")
    for p in points:
        risk = "-" if p.selective_risk is None else f"{p.selective_risk:.4f}"
        print(f"tau {p.tau:<6g} coverage {p.coverage:.4f} risk {risk}")
    return OK


def _parse_grid(text: str) -> list[float]:
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
        return ev.tau_grid(lo, hi, step)
    except (ValueError, ev.EvaluationError) as err:
        raise CliError(IO, f"bad --grid {text!r}: expected lo:hi:step ({err})") from None


def cmd_evaluate(args: argparse.Namespace) -> int:
    return _evaluate(args, _parse_grid(args.grid), "evaluate")


def cmd_sweep(args: argparse.Namespace) -> int:
    return _evaluate(args, _parse_grid(args.grid), "sweep")


# -- parser -------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise CliError(IO, f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nscr", description="Classroom construct reasoning over symbolic facts.")
    p.add_argument("--version", action="version", version=f"nscr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", help="parse and validate a .facts file")
    s.add_argument("--facts", required=True)
    s.add_argument("--registry")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("reason", help="run rules and governance, write decisions and trace")
    s.add_argument("--config", help="JSON file with any of the flags below (flags win)")
    s.add_argument("--facts")
    s.add_argument("--rules")
    s.add_argument("--policies")
    s.add_argument("--registry")
    s.add_argument("--tau-s", dest="tau_s", type=float)
    s.add_argument("--tau-delta", dest="tau_delta", type=float)
    s.add_argument("--retention", choices=[r.value for r in Retention])
    s.add_argument("--seed", type=int, help="seed for L2 pseudonyms")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reason)

    s = sub.add_parser("query", help="run one aggregation query")
    s.add_argument("--facts", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--query")
    g.add_argument("--query-file", dest="query_file")
    s.add_argument("--anchor", help="fact id bound to `anchor`")
    s.add_argument("--registry")
    s.add_argument("--out")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("simulate", help="generate a synthetic episode")
    s.add_argument("--config", help="SimConfig JSON (default: the bundled illustrative config)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    for name, func, grid in (("evaluate", cmd_evaluate, "0:1:0.1"), ("sweep", cmd_sweep, "0:1:0.05")):
        s = sub.add_parser(name, help="score predictions against gold episodes")
        s.add_argument("--pred", required=True)
        s.add_argument("--gold", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--grid", default=grid, help="lo:hi:step, endpoints included")
        s.add_argument("--label-iou", dest="label_iou", type=float, default=ev.LABEL_IOU)
        s.add_argument("--fact-iou", dest="fact_iou", type=float, default=0.5)
        s.add_argument("--window", type=int, default=60, help="early-warning window in ticks")
        s.add_argument("--registry")
        s.set_defaults(func=func)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as err:
        print(err, file=sys.stderr)
        return err.code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as err:
        print(err, file=sys.stderr)
        return err.code
    except (SupportConfigError, ev.EvaluationError) as err:
        print(err, file=sys.stderr)
        return DOMAIN


if __name__ == "__main__":
    sys.exit(main())
