"""Command-line entry point: ``fairgan-reprogram <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import harness
from .classifier import Classifier, ClassifierConfig, accuracy, train_classifier
from .metrics import MetricsReport, emit_report, format_grid, load_reports, realism_check
from .reprogram import (
    ConfigError,
    ReprogramConfig,
    build_generator,
    evaluate_fairness,
    generate_cleaned,
    load_generator,
    reprogrammed_accuracy,
    save_discriminator,
    save_generator,
    train_reprogram,
)
from .synth import make_synth_pair
from .tabular import Schema, SchemaError, align, read_csv, split, write_csv
from .vae import VaeConfig, VaeModel, train_vae

log = logging.getLogger("fairgan_reprogram")

REPROGRAM_FIELDS = {f.name for f in fields(ReprogramConfig)}


class CliError(Exception):
    pass


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _out(args) -> Path:
    d = harness.output_root(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_table(args, label: str | None = None):
    if not args.data or not args.schema:
        raise CliError("--data and --schema are required")
    schema = Schema.load(args.schema)
    if label:
        schema = schema.with_task(label)
    data, rejected = read_csv(args.data, schema, strict=getattr(args, "strict", False))
    if rejected:
        log.warning("%d rows rejected from %s", len(rejected), args.data)
    return data, rejected


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    out = _out(args)
    source, target = make_synth_pair(args.rows, args.bias, args.seed or 0)
    for name, data in (("source", source), ("target", target)):
        write_csv(data, out / f"{name}.csv")
        data.schema.save(out / f"{name}.schema.json")
    print(f"wrote source ({len(source.schema.names)} columns) and target "
          f"({len(target.schema.names)} columns) tables to {out}")
    return 0


def cmd_ingest(args) -> int:
    out = _out(args)
    data, rejected = _load_table(args, args.label)
    with open(out / "rejected.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["line", "reason"])
        for r in rejected:
            w.writerow([r.line, r.reason])
    parts = split(data, seed=args.seed or 0)
    for name, part in zip(("train", "val", "test"), parts):
        write_csv(part, out / f"{name}.csv")
    data.schema.save(out / "schema.json")
    print(f"{len(data)} rows kept, {len(rejected)} rejected; splits "
          f"{'/'.join(str(len(p)) for p in parts)} written to {out}")
    return 0


def cmd_train_classifier(args) -> int:
    out = _out(args)
    data, _ = _load_table(args, args.label)
    seed = args.seed or 0
    tr, va, te = split(data, seed=seed)
    config = ClassifierConfig(include_protected=args.include_protected, max_epochs=args.epochs,
                              lr=args.lr, patience=args.patience)
    clf = train_classifier(tr, va, config, seed=seed)
    clf.save(out / "classifier.json")
    result = {"label": clf.label, "val_accuracy": clf.val_accuracy, "test_accuracy": accuracy(clf, te)}
    _write_json(out / "classifier_metrics.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_train_vae(args) -> int:
    out = _out(args)
    data, _ = _load_table(args, args.label)
    seed = args.seed or 0
    tr, va, _ = split(data, seed=seed)
    config = VaeConfig(latent_dim=args.latent_dim, epochs=args.epochs, lr=args.lr)
    model, report = train_vae(tr, va, config, seed=seed)
    model.save(out / "vae.json")
    harness.write_elbo_csv(model, out / "elbo.csv")
    result = {"val_elbo": report.val_elbo, "column_tv": report.column_tv,
              "max_tv": max(report.column_tv.values())}
    _write_json(out / "vae_metrics.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


def _reprogram_config(args) -> ReprogramConfig:
    d = dict(args.reprogram or {})
    for name in ("mode", "gamma", "delta", "lr", "epochs"):
        v = getattr(args, name)
        if v is not None:
            d[name] = v
    if args.seed is not None:
        d["seed"] = args.seed
    return ReprogramConfig.from_dict(d)


def cmd_reprogram(args) -> int:
    out = _out(args)
    config = _reprogram_config(args)
    if not args.classifier or not args.vae:
        raise CliError("--classifier and --vae are required")
    clf = Classifier.load(args.classifier)
    vae = VaeModel.load(args.vae)
    data, _ = _load_table(args, args.label)
    tr, va, te = split(data, seed=config.seed)
    g = build_generator(vae, data.schema, align(vae.schema, data.schema), seed=config.seed, hidden=config.enc_hidden)
    result = train_reprogram(g, clf, tr, va, config, test=te, scenario=args.scenario)
    save_generator(result.generator, out / "generator.json")
    if result.d1 is not None:
        save_discriminator(result.d1, out / "d1.json")
    if result.d2 is not None:
        save_discriminator(result.d2, out / "d2.json")
    emit_report([result.report], out)
    print(format_grid([result.report]), end="")
    return 0


def cmd_evaluate(args) -> int:
    out = _out(args)
    if not args.classifier:
        raise CliError("--classifier is required")
    clf = Classifier.load(args.classifier)
    data, _ = _load_table(args, args.label)
    result: dict = {"rows": len(data)}
    if args.generator:
        if not args.vae:
            raise CliError("--generator needs --vae")
        g = load_generator(args.generator, VaeModel.load(args.vae))
        result["accuracy"] = reprogrammed_accuracy(g, clf, data)
        rr = realism_check(data, generate_cleaned(g, data, clf), g.shared_columns, args.threshold)
        result["column_tv"] = rr.column_tv
        result["realism_pass"] = rr.passed
        result["fairness_probe"] = evaluate_fairness(g, data, seed=args.seed or 0)
    else:
        result["accuracy"] = accuracy(clf, data)
    _write_json(out / "evaluation.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


def _scenario_dict(args) -> dict:
    d = dict(args.scenario_spec or {})
    if args.kind:
        d["kind"] = args.kind
    if args.bias is not None or args.rows is not None:
        synth = dict(d.get("synth", {}))
        if args.bias is not None:
            synth["bias"] = args.bias
        if args.rows is not None:
            synth["n_rows"] = args.rows
        d["synth"] = synth
    cfg = dict(d.get("config", {}))
    for name in ("mode", "gamma", "delta", "lr", "epochs"):
        v = getattr(args, name, None)
        if v is not None:
            cfg[name] = v
    d["config"] = cfg
    if args.seed is not None:
        d["seed"] = args.seed
    return d


def cmd_run_scenario(args) -> int:
    spec = harness.ScenarioSpec.from_dict(_scenario_dict(args))
    report = harness.run_scenario(spec, out_root=args.out)
    print(format_grid([report]), end="")
    print(f"run directory: {harness.run_directory(spec, args.out)}")
    return 0


def cmd_sweep(args) -> int:
    out = _out(args)
    d = _scenario_dict(args)
    grid = d.pop("grid", {})
    kinds = d.pop("scenarios", None) or [d.get("kind")]
    sweep = harness.SweepSpec.from_dict(grid)
    reports, failures, best = [], [], {}
    for kind in kinds:
        spec = harness.ScenarioSpec.from_dict({**d, "kind": kind})
        res = harness.run_sweep(sweep, spec, out_root=args.out)
        reports += res.reports
        failures += res.failures
        best[kind] = None if res.best is None else res.best.to_dict()
    if reports:
        emit_report(reports, out, stem="sweep")
        print(format_grid(reports), end="")
    _write_json(out / "sweep_summary.json", {"grid": sweep.to_dict(), "best": best, "failures": failures})
    if failures:
        print(f"{len(failures)} grid point(s) failed; see {out / 'sweep_summary.json'}", file=sys.stderr)
    return 0 if reports else 1


def cmd_report(args) -> int:
    if not args.inputs:
        raise CliError("give one or more report JSON files")
    reports: list[MetricsReport] = []
    for p in args.inputs:
        reports += load_reports(p)
    if args.out:
        emit_report(reports, _out(args))
    print(format_grid(reports), end="")
    return 0


def cmd_baselines(args) -> int:
    out = _out(args)
    seeds = list(range(args.seeds))
    if args.seed is not None:
        seeds = [args.seed + s for s in seeds]
    table = harness.make_baselines(harness.synth_baseline_tasks(harness.SynthOptions(args.rows, args.bias, 0)),
                                   seeds, out_dir=out)
    print(table.format(), end="")
    return 0


# --------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file; its keys supply defaults for this subcommand's options")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--out", default=None, help=f"output directory (default ${harness.OUTPUT_ENV} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")


def _table_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV file")
    p.add_argument("--schema", help="JSON schema descriptor for --data")
    p.add_argument("--label", help="label column (overrides the schema's)")


def _reprogram_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("CLASSIFY_ONLY", "GAN", "FAIRGAN"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="fairgan-reprogram",
                                     description="Reprogram a frozen classifier + VAE onto a new tabular task")
    sub = parser.add_subparsers(dest="cmd", required=True)
    subs = {}

    p = sub.add_parser("synth", help="write a synthetic source/target table pair")
    p.add_argument("--rows", type=int, default=20000)
    p.add_argument("--bias", type=float, default=0.0, help="planted dependence on the protected bit, in [0, 1]")
    p.set_defaults(func=cmd_synth)
    subs["synth"] = p

    p = sub.add_parser("ingest", help="validate a CSV against its schema and write train/val/test splits")
    _table_args(p)
    p.add_argument("--strict", action="store_true", help="fail on the first bad row")
    p.set_defaults(func=cmd_ingest)
    subs["ingest"] = p

    p = sub.add_parser("train-classifier", help="train the frozen baseline classifier")
    _table_args(p)
    p.add_argument("--include-protected", action="store_true")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.set_defaults(func=cmd_train_classifier)
    subs["train-classifier"] = p

    p = sub.add_parser("train-vae", help="train and freeze the VAE on X x S; writes the ELBO curve")
    _table_args(p)
    p.add_argument("--latent-dim", type=int, default=10)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_train_vae)
    subs["train-vae"] = p

    p = sub.add_parser("reprogram", help="train a new encoder on a target table")
    _table_args(p)
    p.add_argument("--classifier", help="frozen classifier checkpoint")
    p.add_argument("--vae", help="frozen VAE checkpoint")
    p.add_argument("--scenario", default="custom", help="scenario name recorded in the report")
    p.add_argument("--reprogram", type=json.loads, default=None, help="JSON object of extra reprogramming options")
    _reprogram_args(p)
    p.set_defaults(func=cmd_reprogram)
    subs["reprogram"] = p

    p = sub.add_parser("evaluate", help="accuracy, realism and fairness of a classifier or reprogrammed generator")
    _table_args(p)
    p.add_argument("--classifier")
    p.add_argument("--vae")
    p.add_argument("--generator")
    p.add_argument("--threshold", type=float, default=0.15)
    p.set_defaults(func=cmd_evaluate)
    subs["evaluate"] = p

    for name, func, help_ in (("run-scenario", cmd_run_scenario, "run one transfer scenario end to end"),
                              ("sweep", cmd_sweep, "run a grid over gamma / delta / lr and seeds")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--kind", choices=harness.KINDS)
        p.add_argument("--bias", type=float)
        p.add_argument("--rows", type=int)
        _reprogram_args(p)
        p.set_defaults(func=func, scenario_spec=None)
        subs[name] = p

    p = sub.add_parser("report", help="merge report JSON files into one plaintext grid")
    p.add_argument("inputs", nargs="*")
    p.set_defaults(func=cmd_report)
    subs["report"] = p

    p = sub.add_parser("baselines", help="direct-training accuracy table for the synthetic pair")
    p.add_argument("--rows", type=int, default=20000)
    p.add_argument("--bias", type=float, default=0.0)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_baselines)
    subs["baselines"] = p

    for p in subs.values():
        _common(p)
    return parser, subs


def _apply_config(args, sub: argparse.ArgumentParser) -> None:
    """Config-file keys become option defaults; command-line flags win."""
    with open(args.config) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError(["config: must be a JSON object"])
    if args.cmd in ("run-scenario", "sweep"):
        args.scenario_spec = cfg
        return
    dests = {a.dest for a in sub._actions} - {"help", "config", "func"}
    problems = []
    extra = {}
    for key, value in cfg.items():
        name = key.replace("-", "_")
        if name in dests:
            if getattr(args, name) == sub.get_default(name):
                setattr(args, name, value)
        elif args.cmd == "reprogram" and name in REPROGRAM_FIELDS:
            extra[name] = value
        else:
            problems.append(f"{key}: unknown option for {args.cmd}")
    if problems:
        raise ConfigError(problems)
    if extra:
        args.reprogram = {**extra, **(args.reprogram or {})}


def main(argv: list[str] | None = None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            _apply_config(args, subs[args.cmd])
        return args.func(args)
    except ConfigError as e:
        for p in e.problems:
            print(f"error: invalid config: {p}", file=sys.stderr)
        return 2
    except (CliError, SchemaError, ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
