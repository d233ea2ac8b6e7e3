"""``chronicrl`` command line: generate, train, evaluate, study-a, study-b, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 acceptance failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from collections import Counter
from typing import List, Optional, Sequence

from . import __version__
from .acceptance import all_passed, format_checks, run_checks
from .behavior import BehaviorPolicy, generate_dataset
from .capability import DegenerateCapabilityError, infer_kappa
from .config import ConfigError, ExperimentConfig
from .dataset import DatasetError, read_dataset, spec_hash, write_dataset
from .evaluation import (
    STUDY_A_CONFIGS,
    TABLE1_LABELS,
    EvalReport,
    QPolicy,
    _evaluate,
    study_a,
    study_b,
)
from .offline_q import OfflineQLearner, QTable, QTableFormatError, _eps_min_vector

log = logging.getLogger("chronicrl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ACCEPTANCE = 0, 1, 2, 3
VARIANTS = {label: (kind, weighted) for label, kind, weighted in STUDY_A_CONFIGS if kind is not None}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path!r}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise DataError(f"output directory {path!r} is not writable")
    return path


def _out_file(path: str) -> str:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise DataError(f"output directory {parent!r} does not exist")
    return path


def _parse_seeds(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return list(range(int(lo), int(hi)))
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects 'a,b,c' or 'lo:hi', got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _seed_list(args, default: Sequence[int]) -> List[int]:
    seeds = _parse_seeds(args.seeds)
    return list(default) if seeds is None else seeds


def write_manifest(out_dir: str, cfg: ExperimentConfig, command: str, seeds, artifacts: dict,
                   extra: Optional[dict] = None) -> str:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "python": platform.python_version(),
        "config_source": cfg.source,
        "config": cfg.data,
        "seeds": list(seeds) if seeds is not None else None,
        "artifacts": {os.path.basename(p): _sha256(p) for p in artifacts.values() if os.path.exists(p)},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


# markdown / csv series -----------------------------------------------------
def table1_markdown(report: EvalReport, labels: Optional[Sequence[str]] = None) -> str:
    rows = report.summary()
    if labels is not None:
        order = {lab: i for i, lab in enumerate(labels)}
        rows = [r for r in rows if r["label"] in order]
        rows.sort(key=lambda r: (r["condition"], order[r["label"]], r["eps_deploy"]))
    lines = [
        "| Condition | Configuration | eps | TTG % | TTO % | TTC % | Mean reduction |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r['condition']} | {r['label']} | {r['eps_deploy']:g} "
            f"| {r['ttg_rate_mean']:.1f} ± {r['ttg_rate_std']:.1f} "
            f"| {r['tto_rate_mean']:.1f} ± {r['tto_rate_std']:.1f} "
            f"| {r['ttc_rate_mean']:.1f} ± {r['ttc_rate_std']:.1f} "
            f"| {r['mean_reduction_mean']:.3g} ± {r['mean_reduction_std']:.2g} {r['units']} |"
        )
    seeds = sorted({s for r in rows for s in r["seeds"]})
    n = rows[0]["n_patients"] if rows else 0
    lines.append("")
    lines.append(f"mean ± sample std over seeds {seeds}; n = {n} evaluation patients per seed")
    return "\n".join(lines) + "\n"


def write_series(report: EvalReport, out_dir: str) -> dict:
    """CSV series keyed by figure: capability (kappa), TTC bars, eps sweep."""
    import csv

    paths = {}
    summ = report.summary()
    if report.capability:
        p = os.path.join(out_dir, "fig1_kappa.csv")
        archs = sorted({k[len("kappa_"):] for row in report.capability for k in row if k.startswith("kappa_")})
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "archetype", "kappa_mean", "kappa_std", "n_seeds"])
            for cid in sorted({c["condition"] for c in report.capability}):
                for a in archs:
                    vals = [float(c[f"kappa_{a}"]) for c in report.capability if c["condition"] == cid]
                    m = sum(vals) / len(vals)
                    sd = (sum((v - m) ** 2 for v in vals) / (len(vals) - 1)) ** 0.5 if len(vals) > 1 else 0.0
                    w.writerow([cid, a, m, sd, len(vals)])
        paths["fig1"] = p
    if any(r["label"] in TABLE1_LABELS for r in summ):
        p = os.path.join(out_dir, "fig2_ttc.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "label", "ttc_rate_mean", "ttc_rate_std"])
            for r in summ:
                w.writerow([r["condition"], r["label"], r["ttc_rate_mean"], r["ttc_rate_std"]])
        paths["fig2"] = p
    if any(r["label"].startswith("eps_") for r in summ):
        p = os.path.join(out_dir, "fig3_eps_sweep.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "label", "eps_deploy", "mean_reduction_mean", "mean_reduction_std",
                        "ttc_rate_mean", "ttc_rate_std", "units"])
            for r in sorted(summ, key=lambda r: (r["condition"], r["label"], r["eps_deploy"])):
                w.writerow([r["condition"], r["label"], r["eps_deploy"], r["mean_reduction_mean"],
                            r["mean_reduction_std"], r["ttc_rate_mean"], r["ttc_rate_std"], r["units"]])
        paths["fig3"] = p
    return paths


# subcommands ------------------------------------------------------------------
def cmd_generate(args, cfg: ExperimentConfig) -> int:
    cid = args.condition
    spec = cfg.condition_spec(cid)
    eps = args.eps if args.eps is not None else float(cfg.data["generate"]["eps_gate"])
    n = args.n if args.n is not None else int(cfg.data["population"]["train"])
    seeds = _parse_seeds(args.seeds) or [cfg.data["seeds"][0]]
    if len(seeds) != 1:
        raise UsageError("generate takes a single seed")
    if n < 1:
        raise UsageError("--n must be >= 1")
    if not 0.0 < eps <= 1.0:
        raise UsageError("--eps must lie in (0, 1]")
    out = args.out or f"{cid.lower()}_eps{eps:g}_seed{seeds[0]}.csv"
    _out_file(out)
    disc = cfg.study_settings("A").discretization(cid)
    data = generate_dataset(n, spec, cfg.behavior(), eps, seeds[0], disc)
    digest = write_dataset(data, out)
    shares = Counter(r.archetype_id for traj in data.patients().values() for r in traj[:1])
    print(f"wrote {len(data.records)} records ({n} patients) to {out}")
    print("archetype shares: " + ", ".join(f"{a} {100 * c / n:.1f}%" for a, c in sorted(shares.items())))
    print(f"records sha256 {digest}")
    return EXIT_OK


def _load_dataset(path: str):
    if not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")
    return read_dataset(path)


def cmd_train(args, cfg: ExperimentConfig) -> int:
    data = _load_dataset(args.dataset)
    spec = cfg.condition_spec(data.condition)
    stored = data.header.get("condition_hash")
    if stored is not None and stored != spec_hash(spec):
        raise DataError(f"{args.dataset}: condition spec hash {stored} does not match the configured "
                        f"{data.condition} spec {spec_hash(spec)}")
    kind, weighted = VARIANTS[args.variant]
    if args.reward:
        kind = args.reward
    beta = args.beta if args.beta is not None else (float(cfg.data["capability"]["beta"]) if weighted else 0.0)
    seeds = _parse_seeds(args.seeds) or [cfg.data["seeds"][0]]
    out = args.out or os.path.splitext(args.dataset)[0] + f".{args.variant}.qtable"
    _out_file(out)
    estimate = None
    artifacts = {"qtable": out}
    if beta > 0:
        estimate = infer_kappa(data, beta=beta)
        kpath = os.path.splitext(out)[0] + ".kappa.csv"
        estimate.write_csv(kpath)
        artifacts["kappa"] = kpath
        print("kappa: " + ", ".join(f"{a} {k:+.3f}" for a, k in estimate.kappa.items()))
    disc = cfg.study_settings("A").discretization(data.condition, args.eps_aware)
    learner = OfflineQLearner.from_config(cfg.train(seeds[0], beta, args.eps_aware), cfg.reward(kind), disc)
    t0 = time.perf_counter()
    learner.fit(data, estimate)
    digest = learner.q_table_.save(out)
    diag = os.path.splitext(out)[0] + ".diagnostics.json"
    with open(diag, "w", encoding="utf-8") as fh:
        json.dump({"variant": args.variant, "reward": kind, "beta": beta, "eps_aware": args.eps_aware,
                   "seed": seeds[0], "dataset": os.path.abspath(args.dataset),
                   "dataset_records_sha256": data.header.get("records_sha256"),
                   "train_seconds": time.perf_counter() - t0,
                   "td_error_trace": learner.td_trace_.tolist()}, fh, indent=1)
    print(f"wrote q-table to {out} (sha256 {digest}); final mean |TD| {learner.td_trace_[-1]:.4g}")
    return EXIT_OK


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    if args.qtable:
        if not os.path.exists(args.qtable):
            raise DataError(f"q-table not found: {args.qtable}")
        table = QTable.load(args.qtable)
        cid = table.meta.get("condition", args.condition)
        eps_min = _eps_min_vector(table.meta.get("train", {}).get("eps_min", 0.0))
        label = os.path.basename(args.qtable)

        def make_policy():
            return QPolicy(table, eps_min, label)
    else:
        cid, label = args.condition, "behavior"

        def make_policy():
            return BehaviorPolicy(cfg.behavior())
    spec = cfg.condition_spec(cid)
    eps = args.eps if args.eps is not None else 1.0
    if not 0.0 < eps <= 1.0:
        raise UsageError("--eps must lie in (0, 1]")
    n = args.n if args.n is not None else int(cfg.data["population"]["eval"])
    seeds = _seed_list(args, cfg.data["seeds"])
    # fresh policy per seed so the fallback counters are per-seed
    rows = [_evaluate(make_policy(), label, spec, n, eps, seed) for seed in seeds]
    report = EvalReport("evaluate", rows)
    print(table1_markdown(report), end="")
    if args.out:
        _out_file(args.out)
        report.write_csv(args.out)
    return EXIT_OK


def _run_study(args, cfg: ExperimentConfig, which: str) -> int:
    default_seeds = cfg.data["seeds"] if which == "A" else cfg.data["study_b"]["seeds"]
    seeds = _seed_list(args, default_seeds)
    settings = cfg.study_settings(which, seeds)
    out_dir = _out_dir(args.out or os.path.join(cfg.data["output_dir"], f"study_{which.lower()}"))
    jobs = max(1, int(args.jobs or 1))

    def progress(row):
        log.info("%s seed %d %-20s eps=%.2f TTC %.1f%% reduction %.3f", row.condition, row.seed, row.label,
                 row.eps_deploy, row.ttc_rate, row.mean_reduction)

    runner = study_a if which == "A" else study_b
    report = runner(settings, progress=progress, jobs=jobs)
    stem = f"study_{which.lower()}"
    artifacts = {"csv": os.path.join(out_dir, f"{stem}.csv")}
    report.write_csv(artifacts["csv"])
    if which == "A":
        artifacts["table"] = os.path.join(out_dir, "table1.md")
        with open(artifacts["table"], "w", encoding="utf-8") as fh:
            fh.write(table1_markdown(report, TABLE1_LABELS))
        artifacts["kappa"] = os.path.join(out_dir, "kappa.csv")
        report.write_capability_csv(artifacts["kappa"])
        print(table1_markdown(report, TABLE1_LABELS), end="")
    else:
        artifacts["table"] = os.path.join(out_dir, "fig3.md")
        with open(artifacts["table"], "w", encoding="utf-8") as fh:
            fh.write(table1_markdown(report))
        print(table1_markdown(report), end="")
    artifacts.update(write_series(report, out_dir))
    status = EXIT_OK
    checks = None
    if args.check:
        checks = run_checks(report_a=report if which == "A" else None, report_b=report if which == "B" else None)
        artifacts["acceptance"] = os.path.join(out_dir, "acceptance.txt")
        with open(artifacts["acceptance"], "w", encoding="utf-8") as fh:
            fh.write(format_checks(checks) + "\n")
        print(format_checks(checks))
        if not all_passed(checks):
            status = EXIT_ACCEPTANCE
    write_manifest(out_dir, cfg, f"study-{which.lower()}", seeds, artifacts,
                   {"runtime_s": report.runtime_s, "jobs": jobs,
                    "acceptance_passed": None if checks is None else all_passed(checks)})
    print(f"outputs in {out_dir} ({report.runtime_s / 60:.1f} min)")
    return status


def cmd_study_a(args, cfg):
    return _run_study(args, cfg, "A")


def cmd_study_b(args, cfg):
    return _run_study(args, cfg, "B")


def _study_of(report: EvalReport) -> str:
    labels = {r.label for r in report.rows}
    if labels <= {"eps_naive", "eps_aware"}:
        return "B"
    if labels & {"eps_naive", "eps_aware"}:
        return "mixed"
    return "A"


def cmd_report(args, cfg: ExperimentConfig) -> int:
    if not args.reports:
        raise UsageError("report needs at least one study CSV")
    merged = EvalReport("")
    seen = set()
    studies = set()
    for path in args.reports:
        if not os.path.exists(path):
            raise DataError(f"report not found: {path}")
        try:
            rep = EvalReport.read_csv(path)
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: unreadable report ({exc})") from None
        studies.add(_study_of(rep))
        for r in rep.rows:
            key = (r.label, r.condition, r.eps_deploy, r.seed)
            if key in seen:
                raise DataError(f"{path}: duplicate row {key}")
            seen.add(key)
        merged.rows.extend(rep.rows)
        kappa = os.path.join(os.path.dirname(os.path.abspath(path)), "kappa.csv")
        if os.path.exists(kappa):
            extra = EvalReport("")
            extra.read_capability_csv(kappa)
            merged.capability.extend(extra.capability)
    if len(studies) != 1 or "mixed" in studies:
        raise DataError("report inputs mix Study A and Study B rows; report them separately")
    which = studies.pop()
    merged.study = which
    out_dir = _out_dir(args.out or cfg.data["output_dir"])
    md = table1_markdown(merged, TABLE1_LABELS if which == "A" else None)
    artifacts = {"table": os.path.join(out_dir, "table1.md" if which == "A" else "fig3.md"),
                 "csv": os.path.join(out_dir, f"summary_{which.lower()}.csv")}
    with open(artifacts["table"], "w", encoding="utf-8") as fh:
        fh.write(md)
    merged.write_csv(artifacts["csv"])
    artifacts.update(write_series(merged, out_dir))
    print(md, end="")
    status = EXIT_OK
    if args.check:
        checks = run_checks(report_a=merged if which == "A" else None, report_b=merged if which == "B" else None)
        print(format_checks(checks))
        status = EXIT_OK if all_passed(checks) else EXIT_ACCEPTANCE
    write_manifest(out_dir, cfg, "report", sorted({r.seed for r in merged.rows}), artifacts,
                   {"inputs": {os.path.abspath(p): _sha256(p) for p in args.reports}})
    return status


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults reproduce the reference settings)")
    common.add_argument("--seeds", help="seed list 'a,b,c' or half-open range 'lo:hi'")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for study runs")
    common.add_argument("--check", action="store_true", help="run acceptance checks; exit 3 on failure")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="chronicrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"chronicrl {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="roll out the behavior mixture to a dataset file")
    g.add_argument("--condition", choices=("HTN", "T2D"), default="HTN")
    g.add_argument("--eps", type=float, help="execution gate for medication changes (default from config)")
    g.add_argument("--n", type=int, help="patients (default population.train)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="offline Q-learning on a dataset file")
    t.add_argument("dataset")
    t.add_argument("--variant", choices=sorted(VARIANTS), default="capability_terminal")
    t.add_argument("--reward", choices=("tiered", "terminal"), help="override the variant's reward kind")
    t.add_argument("--beta", type=float, help="override the variant's capability temperature")
    t.add_argument("--eps-aware", action="store_true", help="add the eps bucket to the state")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="roll out a q-table or the behavior mixture")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--qtable")
    src.add_argument("--behavior", action="store_true")
    e.add_argument("--condition", choices=("HTN", "T2D"), default="HTN")
    e.add_argument("--eps", type=float, help="deployment eps (default 1)")
    e.add_argument("--n", type=int, help="patients per seed (default population.eval)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("study-a", parents=[common], help="uniform vs capability-weighted training against the behavior mixture")
    a.set_defaults(func=cmd_study_a)
    b = sub.add_parser("study-b", parents=[common], help="eps-naive vs eps-aware sweep")
    b.set_defaults(func=cmd_study_b)

    r = sub.add_parser("report", parents=[common], help="rebuild tables and CSV series from study CSVs")
    r.add_argument("reports", nargs="*")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version, usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    stage = args.command
    try:
        cfg = ExperimentConfig.load(args.config)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"chronicrl {stage}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetError, QTableFormatError, DegenerateCapabilityError) as exc:
        print(f"chronicrl {stage}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"chronicrl {stage}: I/O error{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
