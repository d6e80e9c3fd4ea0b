"""``kappatune`` command line.

Exit codes: 0 success, 1 a verification or experiment claim failed,
2 bad usage or unreadable input.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import KappaError
from .selection import STRATEGIES, EligibilityFilter, budget_from_fraction, eligible_tensors, make_plan
from .spectral import DEFAULT_SIGMA_CAP, DEFAULT_ZERO_TOL, summarize_view
from .tensor_io import ingest_raw, load_checkpoint

log = logging.getLogger("kappatune")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("KAPPA_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"KAPPA_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _filter(args):
    return EligibilityFilter().with_excludes(*(args.exclude or []))


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_analyze(args):
    view = load_checkpoint(args.checkpoint)
    names = eligible_tensors(view, _filter(args))
    summaries = summarize_view(
        view, names, args.zero_tol, threads=_threads(args),
        on_zero=lambda n: log.warning("%s: all-zero tensor skipped", n),
    )
    lines = "".join(s.to_json(args.sigma_cap) + "\n" for s in summaries)
    _write_text(args.out, lines)
    print(f"{len(summaries)} tensor(s) analyzed -> {args.out}")
    return EXIT_OK


def cmd_plan(args):
    view = load_checkpoint(args.checkpoint)
    filt = _filter(args)
    if args.k is not None:
        k = args.k
    else:
        k = budget_from_fraction(args.budget_fraction, len(eligible_tensors(view, filt)))
        if k == 0:
            raise UsageError("--budget-fraction 0 selects nothing; a plan needs K >= 1")
    if k < 1:
        raise UsageError("--k must be >= 1")
    plan = make_plan(view, filt, k, args.strategy, args.zero_tol, args.seed, threads=_threads(args))
    plan.save(args.out)
    n_params = sum(view.entries[n].numel for n in plan.names)
    for name, kappa in plan.selected:
        print(f"{name}\t{kappa:.6g}")
    print(f"selected {len(plan.selected)} tensor(s), {n_params} trainable parameters -> {args.out}")
    return EXIT_OK


def cmd_verify_theory(args):
    from .verify import verification_document

    doc = verification_document(args.samples, args.seed, args.max_dim)
    _write_text(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for check in doc["checks"]:
        print(f"{'PASS' if check['passed'] else 'FAIL'}  {check['name']}")
    print(f"{sum(c['passed'] for c in doc['checks'])}/{len(doc['checks'])} checks passed")
    return EXIT_OK if doc["all_passed"] else EXIT_FAILED


def cmd_demo_forgetting(args):
    from .toytrain import ExperimentConfig, default_config_path, forgetting_experiment

    cfg_path = args.config or default_config_path()
    cfg = ExperimentConfig.load(cfg_path)
    log.info("experiment config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    report = forgetting_experiment(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["kind"] = "forgetting"
    _write_text(out / "forgetting_report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if not args.no_csv:
        _write_text(out / "forgetting_report.csv", report.to_csv())
    for key, text in sorted(report.plans.items()):
        seed, strategy = key.split("/")
        _write_text(out / "plans" / f"seed{seed}_{strategy}.json", text)
    print(render_forgetting(doc))
    claim = report.claim()
    if not report.frozen_intact:
        print("frozen tensors changed during fine-tuning", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_FAILED if claim == "violated" else EXIT_OK


# ----------------------------------------------------------------------------
# report rendering


def _table(header, rows, fmt):
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue().rstrip("\n")
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_spectral(summaries, fmt="text", top=3):
    ranked = sorted(summaries, key=lambda s: (s["kappa"], s["name"]))
    n = len(ranked)
    rows = []
    for i, s in enumerate(ranked):
        mark = "low" if i < min(top, n) else ("high" if i >= n - min(top, n) else "")
        rows.append([s["name"], f"{s['m']}x{s['n']}", f"{s['kappa']:.6g}", f"{s['frobenius']:.6g}",
                     f"{s['log_volume']:.6g}", s["numerical_rank"], mark])
    return _table(["name", "shape", "kappa", "frobenius", "log_volume", "rank", "mark"], rows, fmt)


def render_forgetting(doc, fmt="text"):
    rows = [[s, f"{v['forgetting']:.6g}", f"{v['loss_a_after_b']:.6g}", f"{v['loss_b_final']:.6g}"]
            for s, v in sorted(doc["medians"].items())]
    text = _table(["strategy", "median_forgetting", "median_loss_a_after_b", "median_loss_b_final"],
                  rows, fmt)
    if fmt == "text":
        text += f"\nclaim (median forgetting lowest_kappa < highest_kappa): {doc['claim']}"
        text += f"\nfrozen tensors intact: {doc['frozen_intact']}"
    return text


def render_plan(doc, fmt="text"):
    rows = [[i + 1, s["name"], f"{s['kappa']:.6g}"] for i, s in enumerate(doc["selected"])]
    text = _table(["rank", "name", "kappa"], rows, fmt)
    if fmt == "text":
        text = f"strategy {doc['strategy']}, budget {doc['budget']}\n" + text
    return text


def render_verification(doc, fmt="text"):
    rows = [[c["name"], "pass" if c["passed"] else "FAIL"] for c in doc["checks"]]
    return _table(["check", "status"], rows, fmt)


SPECTRAL_KEYS = {"name", "m", "n", "kappa", "sigmas", "frobenius", "log_volume", "numerical_rank"}


def detect_report(text):
    """Return ``(kind, payload)`` for a report file's contents."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict):
        if doc.get("kind") == "verification" and "checks" in doc:
            return "verification", doc
        if "medians" in doc and "runs" in doc:
            return "forgetting", doc
        if "selected" in doc and "strategy" in doc:
            return "plan", doc
        if SPECTRAL_KEYS <= set(doc):
            return "spectral", [doc]
        raise UsageError("unrecognized report schema")
    rows = []
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            raise UsageError(f"line {i + 1}: not JSON") from None
        if not isinstance(row, dict) or not SPECTRAL_KEYS <= set(row):
            raise UsageError(f"line {i + 1}: not a spectral summary")
        rows.append(row)
    if not rows:
        raise UsageError("empty report")
    return "spectral", rows


def cmd_report(args):
    try:
        text = Path(args.inp).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(str(exc)) from None
    kind, payload = detect_report(text)
    if kind == "spectral":
        out = render_spectral(payload, args.format, args.top)
    elif kind == "forgetting":
        out = render_forgetting(payload, args.format)
    elif kind == "plan":
        out = render_plan(payload, args.format)
    else:
        out = render_verification(payload, args.format)
    if args.out:
        _write_text(args.out, out + "\n")
    else:
        print(out)
    return EXIT_OK


def cmd_ingest(args):
    path = ingest_raw(args.manifest, args.out)
    print(f"wrote {path}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="kappatune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"kappatune {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for per-tensor work (default: $KAPPA_THREADS or 1)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    def common_filter(sp):
        sp.add_argument("--zero-tol", type=float, default=DEFAULT_ZERO_TOL,
                        help="singular values <= tol * sigma_max count as zero")
        sp.add_argument("--exclude", action="append", metavar="GLOB",
                        help="extra name pattern to exclude (repeatable)")

    a = sub.add_parser("analyze", help="spectral report (JSON lines) for eligible tensors")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--sigma-cap", type=int, default=DEFAULT_SIGMA_CAP)
    common_filter(a)
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plan", help="emit a selection plan")
    pl.add_argument("--checkpoint", required=True)
    budget = pl.add_mutually_exclusive_group(required=True)
    budget.add_argument("--k", type=int, help="number of tensors to unfreeze")
    budget.add_argument("--budget-fraction", type=float, help="fraction of eligible tensors")
    pl.add_argument("--strategy", choices=STRATEGIES, default="lowest_kappa")
    pl.add_argument("--out", required=True)
    pl.add_argument("--seed", type=int, default=0)
    common_filter(pl)
    pl.set_defaults(func=cmd_plan)

    v = sub.add_parser("verify-theory", help="run the entropy verification suite")
    v.add_argument("--samples", type=int, default=100_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--max-dim", type=int, default=8)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_verify_theory)

    d = sub.add_parser("demo-forgetting", help="run the low- vs high-kappa forgetting experiment")
    d.add_argument("--config", help="experiment JSON (default: shipped config)")
    d.add_argument("--out-dir", required=True)
    d.add_argument("--no-csv", action="store_true")
    d.set_defaults(func=cmd_demo_forgetting)

    r = sub.add_parser("report", help="render a spectral, plan, verification or forgetting report")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--format", choices=("text", "csv"), default="text")
    r.add_argument("--top", type=int, default=3, help="rows to mark at each end of a kappa table")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("ingest", help="build a checkpoint from a raw-blob manifest")
    g.add_argument("--manifest", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_ingest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))
    try:
        return args.func(args)
    except (KappaError, UsageError, OSError, ValueError) as exc:
        print(f"kappatune {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
