"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, harness, synthdata
from .config import ExperimentConfig, apply_train_overrides, load_config, parse_conditioning
from .errors import ConfigError, ContractViolation, FormatError
from .losses import canonical_variant
from .nets import load_model
from .training import TrainingDivergence

log = logging.getLogger("brnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training overrides")
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--iterations", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr-c", type=float)
    g.add_argument("--lr-bp", type=float)
    g.add_argument("--lr-adv", type=float)
    g.add_argument("--log-every", type=int)
    g.add_argument("--lambda-warmup", type=float, help="fraction of iterations for a linear ramp")
    g.add_argument("--conditioning", type=parse_conditioning, help="'all' or class labels, e.g. 0 or 0,1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brnet", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="INI experiment file")
    parser.add_argument("--seed", type=int, help="overrides the data seed (generate) or the training seed")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--quiet", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write the synthetic dataset")

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", type=Path, help="BRDS dataset; generated from the config if omitted")
    p.add_argument("--variant", type=canonical_variant)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="metric report for a trained model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("compare", help="all variants over several seeds")
    p.add_argument("--data", type=Path)
    p.add_argument("--variants", type=lambda s: tuple(canonical_variant(v) for v in s.split(",") if v.strip()))
    p.add_argument("--seeds", type=int, dest="n_seeds")
    p.add_argument("--resume", action="store_true", help="reuse finished runs with the same config hash")
    _add_train_flags(p)

    p = sub.add_parser("export-features", help="per-sample features and a PCA projection")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--pca-dims", type=int, default=2, help="0 disables the projection")

    p = sub.add_parser("oracle", help="Bayes accuracy of a sigma_a-only classifier")
    p.add_argument("--n-mc", type=int, default=200_000)
    return parser


def _train_cfg(exp: ExperimentConfig, args) -> ExperimentConfig:
    values = {}
    for attr, key in (("variant", "variant"), ("lam", "lambda"), ("iterations", "iterations"),
                      ("batch_size", "batch_size"), ("lr_c", "lr_c"), ("lr_bp", "lr_bp"),
                      ("lr_adv", "lr_adv"), ("log_every", "log_every"),
                      ("lambda_warmup", "lambda_warmup"), ("conditioning", "conditioning")):
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    if args.seed is not None:
        values["seed"] = args.seed
    return replace(exp, train=apply_train_overrides(exp.train, values)).validate()


def _dataset(args, exp: ExperimentConfig):
    if getattr(args, "data", None) is not None:
        return synthdata.load_dataset(args.data)
    return synthdata.generate(exp.data)


def _out(args, exp: ExperimentConfig) -> Path:
    return args.out if args.out is not None else Path(exp.out_dir)


def cmd_generate(args, exp: ExperimentConfig) -> int:
    if args.seed is not None:
        exp = replace(exp, data=replace(exp.data, seed=args.seed)).validate()
    out = _out(args, exp)
    ds = synthdata.generate(exp.data)
    digest = synthdata.save_dataset(ds, _mkdir(out) / "dataset.brds")
    chash = exp.hash()
    synthdata.export_csv(ds, out, header=harness.provenance_line(chash, exp.data.seed)[2:])
    harness.write_provenance(out, chash, exp.data.seed, checksum=digest.hex(), n_samples=len(ds))
    _say(args, f"wrote {len(ds)} samples to {out} (checksum {digest.hex()})")
    return EXIT_OK


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_train(args, exp: ExperimentConfig) -> int:
    exp = _train_cfg(exp, args)
    ds = _dataset(args, exp)
    out = _mkdir(_out(args, exp))
    chash = exp.hash()
    harness.write_provenance(out, chash, exp.train.seed, variant=exp.train.variant.name)
    try:
        res = harness.run_training(ds, exp.train, out, chash)
    except TrainingDivergence as exc:
        print(f"error: training diverged in the {exc.phase} phase at iteration {exc.iteration}; "
              f"last good checkpoint kept in {out / 'model.brnt'}", file=sys.stderr)
        return EXIT_RUNTIME
    rep = res.report
    _say(args, f"{res.variant}: bAcc={rep.bacc:.4f} dcor2={rep.dcor2[0]:.4f} MI={rep.mi[0]:.4f} -> {out}")
    return EXIT_OK


def cmd_eval(args, exp: ExperimentConfig) -> int:
    params = load_model(args.model)
    ds = _dataset(args, exp)
    harness.check_compatible(params, ds)
    rep = harness.report_for(params, ds)
    seed = args.seed if args.seed is not None else exp.train.seed
    prov = harness.provenance_line(exp.hash(), seed)
    if args.out is not None:
        harness.write_report(_mkdir(args.out) / "report.csv", rep, prov)
    print(",".join(harness.REPORT_FIELDS))
    print(",".join(harness.fmt(v) for v in harness.report_row(rep)))
    return EXIT_OK


def cmd_compare(args, exp: ExperimentConfig) -> int:
    exp = _train_cfg(exp, args)
    if args.variants:
        exp = replace(exp, variants=args.variants)
    if args.n_seeds is not None:
        exp = replace(exp, n_seeds=args.n_seeds)
    exp = exp.validate()
    ds = _dataset(args, exp)
    out = _mkdir(_out(args, exp))
    harness.write_provenance(out, exp.hash(), exp.train.seed, variants=list(exp.variants), n_seeds=exp.n_seeds)
    results = harness.compare(ds, exp, out, resume=args.resume)
    failed = [r for r in results if r.status != "ok"]
    _say(args, f"wrote {out / 'comparison.csv'} ({len(results) - len(failed)} ok, {len(failed)} failed)")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_export_features(args, exp: ExperimentConfig) -> int:
    params = load_model(args.model)
    ds = _dataset(args, exp)
    harness.check_compatible(params, ds)
    header, rows = harness.feature_rows(params, ds, args.pca_dims)
    out = _mkdir(_out(args, exp))
    seed = args.seed if args.seed is not None else exp.train.seed
    harness.write_csv(out / "features.csv", header, rows, harness.provenance_line(exp.hash(), seed))
    _say(args, f"wrote {len(rows)} rows to {out / 'features.csv'}")
    return EXIT_OK


def cmd_oracle(args, exp: ExperimentConfig) -> int:
    res = harness.oracle_summary(exp.data, n_mc=args.n_mc, seed=args.seed or 0)
    print(f"analytic={res['analytic']:.17g}")
    print(f"monte_carlo={res['monte_carlo']:.17g} std_error={res['std_error']:.17g} n_mc={res['n_mc']}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "export-features": cmd_export_features,
    "oracle": cmd_oracle,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = load_config(args.config)
        return COMMANDS[args.command](args, exp)
    except (ConfigError, ContractViolation, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
