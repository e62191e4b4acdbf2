"""Command-line entry point: ``xdfsl {gen-data,split,run,eval,report}``.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from xdfsl.backbone import load_checkpoint
from xdfsl.config import PROFILES, RunConfig
from xdfsl.datasets import apply_split, save_domain_directory
from xdfsl.errors import NumericError, ValidationError
from xdfsl.evaluation import build_results_tables, evaluate, read_reports, write_report
from xdfsl.pipeline import build_manifest, load_benchmark, run

log = logging.getLogger("xdfsl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set, profile=args.profile)
    cfg.validate()
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if cfg.benchmark.kind != "synthetic":
        raise ValidationError("gen-data writes the synthetic benchmark; set benchmark.kind=synthetic")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"refusing to write into non-empty {out}; pass --force to overwrite", file=sys.stderr)
            return EXIT_CONFIG
        for domain in cfg.benchmark.domains:
            shutil.rmtree(out / domain, ignore_errors=True)
    data = load_benchmark(cfg)
    for ds in data.values():
        save_domain_directory(ds, out)
    n = sum(len(ds) for ds in data.values())
    print(f"wrote {n} images for {len(data)} domains to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and not args.force:
        print(f"refusing to overwrite {out}; pass --force", file=sys.stderr)
        return EXIT_CONFIG
    manifest = build_manifest(cfg, load_benchmark(cfg))
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest.write(out)
    print(f"{out}: train {manifest.counts[0]}, unlabelled {manifest.counts[1]}, test {manifest.counts[2]}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else cfg.output_dir()
    reports = run(cfg, out)
    for table in build_results_tables(reports):
        print(table.to_text())
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = RunConfig.load(run_dir / "config.yaml", args.set)
    cfg.validate()
    state = load_checkpoint(args.checkpoint)
    data = load_benchmark(cfg)
    manifest = build_manifest(cfg, data)
    per_class = cfg.benchmark.images_per_class_per_domain if cfg.benchmark.kind == "synthetic" else None
    domains = args.domain or cfg.method.target_domains
    out = Path(args.out) if args.out else run_dir / "reports"
    for domain in domains:
        _, _, test = apply_split(data, manifest, cfg.method.source_domain, domain, per_class=per_class)
        for spec in cfg.eval_specs():
            report = evaluate(state, test, spec, cfg.eval.n_episodes, cfg.eval.seed,
                              args.method_name or cfg.method_label, cfg.eval.metric)
            path = write_report(report, out)
            print(f"{report.method_name} {domain} {spec.label}: "
                  f"{report.mean_accuracy:.2f} +- {report.ci95_halfwidth:.2f}  ({path})")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for d in args.run_dirs:
        d = Path(d)
        found = read_reports(d / "reports" if (d / "reports").is_dir() else d)
        if not found:
            raise ValidationError(f"no eval_*.json reports under {d}")
        reports.extend(found)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for table in build_results_tables(reports):
        print(table.to_text())
        if out is not None:
            n_way, k_shot, _ = table.spec
            (out / f"results_{n_way}w{k_shot}s.txt").write_text(table.to_text(), encoding="utf-8")
            (out / f"results_{n_way}w{k_shot}s.csv").write_text(table.to_csv(), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xdfsl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--profile", choices=sorted(PROFILES), help="named preset applied before --config")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        return p

    p = with_config(sub.add_parser("gen-data", help="write the synthetic benchmark as PNG folders"))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a populated directory")
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("split", help="write the class-split manifest"))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_split)

    p = with_config(sub.add_parser("run", help="train one method and evaluate it on every target"))
    p.add_argument("--out", help="output directory (default: $XDFSL_OUT/<method>-seed<seed>)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpoint with a run's config and split")
    p.add_argument("run_dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", action="append", help="target domain (repeatable; default: all)")
    p.add_argument("--method-name", help="label written into the reports")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", help="report directory (default: <run_dir>/reports)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge run reports into result tables")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="write results_<spec>.txt/.csv here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:  # includes ConfigError and CapacityError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
