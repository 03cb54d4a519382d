"""Command-line entry point: ``hyperdys {synth,featurize,run,report,convert-weights}``.

Exit codes: 0 success, 1 validation, 2 data, 3 internal.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ABLATION_OVERRIDES, TASKS, load_config
from .errors import ConfigError, HyperdysError, VersionError
from .experiment import METRICS, REPORT_SCHEMA_VERSION, Corpus, read_report, run_protocol
from .manifest import check_tasks, featurize, read_manifest, synth_corpus

log = logging.getLogger("hyperdys")

COLUMN_TITLES = {
    "precision": "Precision",
    "recall": "Recall",
    "f1": "F1-score",
    "accuracy": "Accuracy",
    "specificity": "Specificity",
}


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "task", None):
        out["task"] = args.task
    if getattr(args, "fusion", None):
        out["head"] = args.fusion
    if getattr(args, "ablation", None):
        out.update(ABLATION_OVERRIDES[args.ablation])
    return out


def cmd_synth(args) -> int:
    manifest = synth_corpus(args.out, n=args.n, tasks=check_tasks(args.tasks), seed=args.seed or 0)
    print(f"wrote {manifest} and {Path(args.out) / 'config.yaml'}")
    return 0


def cmd_featurize(args) -> int:
    cfg = load_config(args.config)
    manifest = args.manifest or cfg.paths.manifest
    if not manifest:
        raise ConfigError("no manifest given (--manifest or 'manifest' in the config file)")
    out_dir = args.out or cfg.paths.cache_dir
    kinds = tuple(args.kinds.split(",")) if args.kinds else cfg.input_kinds
    rows = read_manifest(manifest)
    result = featurize(rows, out_dir, cfg.dsp, kinds, workers=args.workers)
    print(f"featurized {result.written} images, {result.skipped} up to date, {len(result.errors)} errors")
    for e in result.errors:
        print(f"  error: {e}", file=sys.stderr)
    return 2 if result.errors else 0


def cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    corpus = Corpus.from_index(cfg.paths.cache_dir, cfg.paths.egemaps_csv)
    out_dir = Path(args.out or cfg.paths.out_dir)
    extra = {"ablation": args.ablation, "dsp": asdict(cfg.dsp)}
    report = run_protocol(cfg.run, corpus, out_dir, extra_meta=extra, log=log.info)
    print(format_table([(run_label(report), report)]))
    print(f"report: {out_dir / 'report.json'}")
    return 0


def run_label(report: dict) -> str:
    meta = report.get("meta", {})
    cfg = report.get("config", {})
    head = meta.get("head", cfg.get("head", "?"))
    if head in ("gmu", "concat"):
        label = {"gmu": "Fusion (/pa/+/ta/)", "concat": "Concatenation"}[head]
    else:
        label = f"/{cfg.get('task', '?')}/ {head}"
    if meta.get("ablation"):
        label += f" [{meta['ablation']}]"
    return label


def _check_versions(reports):
    versions = {r.get("schema_version") for _, r in reports}
    if len(versions) > 1:
        raise VersionError(f"reports have mixed schema versions {sorted(map(str, versions))}")
    if versions and versions.pop() != REPORT_SCHEMA_VERSION:
        raise VersionError(f"unsupported report schema version (expected {REPORT_SCHEMA_VERSION})")


def best_rows(reports) -> dict:
    best = {}
    for m in METRICS:
        means = [r["aggregate"][m]["mean"] for _, r in reports]
        best[m] = max(range(len(means)), key=lambda i: (means[i], -i))
    return best


def format_table(reports) -> str:
    """Mean +/- std in percent, one column per metric; ``*`` marks the best row per column."""
    _check_versions(reports)
    best = best_rows(reports) if len(reports) > 1 else {}
    width = max(12, *(len(label) for label, _ in reports))
    head = f"{'Architecture':<{width}}" + "".join(f"{COLUMN_TITLES[m]:>17}" for m in METRICS)
    lines = [head, "-" * len(head)]
    for i, (label, r) in enumerate(reports):
        cells = []
        for m in METRICS:
            a = r["aggregate"][m]
            mark = "*" if best.get(m) == i else " "
            cells.append(f"{100 * a['mean']:>8.2f}±{100 * a['std']:<6.2f}{mark}")
        lines.append(f"{label:<{width}}" + "".join(f"{c:>17}" for c in cells))
    return "\n".join(lines)


def table_csv(reports) -> str:
    _check_versions(reports)
    best = best_rows(reports) if len(reports) > 1 else {}
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["architecture"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std", "best")])
    for i, (label, r) in enumerate(reports):
        row = [label]
        for m in METRICS:
            a = r["aggregate"][m]
            row += [f"{a['mean']:.6f}", f"{a['std']:.6f}", int(best.get(m) == i)]
        w.writerow(row)
    return buf.getvalue()


def cmd_report(args) -> int:
    reports = [(run_label(r), r) for r in (read_report(p) for p in args.reports)]
    print(format_table(reports))
    if args.csv:
        Path(args.csv).write_text(table_csv(reports))
    return 0


def cmd_convert_weights(args) -> int:
    """Convert a torchvision AlexNet state dict (``.pth``) to the HWTS format."""
    from .backbone import from_torchvision_state, save_state

    try:
        import torch
    except ImportError:  # pragma: no cover
        print("convert-weights needs PyTorch to read .pth files", file=sys.stderr)
        return 1
    state = torch.load(args.src, map_location="cpu")
    if hasattr(state, "state_dict"):
        state = state.state_dict()
    save_state(from_torchvision_state({k: v.numpy() for k, v in state.items()}), args.dst)
    print(f"wrote {args.dst}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperdys", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic labelled corpus")
    s.add_argument("out")
    s.add_argument("--n", type=int, default=80)
    s.add_argument("--tasks", default="pa", help="comma-separated tasks or 'all'")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("featurize", help="build the spectrogram image cache")
    f.add_argument("--config")
    f.add_argument("--manifest")
    f.add_argument("--out", help="cache directory (default: cache_dir from config)")
    f.add_argument("--kinds", help="comma-separated: logmel,mfcc")
    f.add_argument("--workers", type=int, default=1)
    f.set_defaults(func=cmd_featurize)

    r = sub.add_parser("run", help="run the cross-validation protocol")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--ablation", choices=sorted(ABLATION_OVERRIDES))
    r.add_argument("--task", choices=TASKS)
    r.add_argument("--fusion", choices=("gmu", "concat"))
    r.add_argument("--out", help="output directory (default: out_dir from config)")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("report", help="compare run reports")
    t.add_argument("reports", nargs="+")
    t.add_argument("--csv", help="also write the table as CSV")
    t.set_defaults(func=cmd_report)

    c = sub.add_parser("convert-weights", help="torchvision AlexNet .pth -> HWTS weights file")
    c.add_argument("src")
    c.add_argument("dst")
    c.set_defaults(func=cmd_convert_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "tasks") and isinstance(args.tasks, str):
        args.tasks = "all" if args.tasks == "all" else args.tasks.split(",")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except HyperdysError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
