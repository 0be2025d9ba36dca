"""Command-line interface: ``molct <command> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .datasets import (
    ConfigurationError,
    ParseError,
    gen_toy_mm_dataset,
    parse_bonds,
    parse_extxyz,
    toy_mm_system,
    write_bonds,
    write_extxyz,
    write_force_field,
)
from .featurize import DegeneracyError, FeaturizerConfig, GraphBatch, VocabularyError, featurize

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (ParseError, ConfigurationError, ConfigError, VocabularyError, DegeneracyError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_train(args) -> int:
    from .train import train

    cfg = _load(args.config)
    if args.output_dir:
        cfg = cfg.replace(output_dir=args.output_dir)
    seeds = [args.seed] if args.seed is not None else None
    result = train(cfg, seeds, figures=not args.no_figures)
    for seed, msg in result["failures"].items():
        print(f"seed {seed} aborted: {msg}", file=sys.stderr)
    for row in result["aggregate"]:
        if row["step"] == max(r["step"] for r in result["aggregate"]):
            print(f"final {row['split']}: loss {row['loss_mean']:.6g} +- {row['loss_std']:.3g} "
                  f"(force MAE {row['force_mae_mean']:.4g})")
    print(f"outputs written to {cfg.output_dir}")
    return EXIT_NUMERIC if result["failures"] else EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_model, predictions_table, remap_for_model, write_rows

    model, meta = load_model(args.model)
    edges = parse_bonds(args.bonds) if args.bonds else []
    samples = remap_for_model(meta, parse_extxyz(args.data, edges))
    rc = meta.get("run_config") or {}
    metrics = evaluate(model, samples, lam=rc.get("lam", 0.99), T_max=args.t_max)
    print(json.dumps({k: metrics[k] for k in ("loss", "energy_mae", "force_mae", "mean_ponder_steps")}, indent=2))
    if args.predictions:
        write_rows(predictions_table(model, samples), args.predictions)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import ablate, variant_config

    cfg = _load(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        variant_config(cfg, v)  # fail fast on unknown names
    cfg.validate()
    table = ablate(cfg, variants, out_dir=args.output_dir, figures=not args.no_figures)
    print("variant,params,final_train_loss_mean,final_val_loss_mean,val_train_ratio")
    for r in table:
        print(f"{r['variant']},{r['params']},{r['final_train_loss_mean']:.6g},"
              f"{r['final_val_loss_mean']:.6g},{r['val_train_ratio']:.4g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .train import GRADCHECK_TOLERANCES, gradcheck

    cfg = load_config(args.config) if args.config else None
    rep = gradcheck(cfg, seed=args.seed)
    for suite, tol in GRADCHECK_TOLERANCES.items():
        status = "PASS" if rep[suite] < tol else "FAIL"
        print(f"{suite:<18} worst rel err {rep[suite]:.3e}  tol {tol:.0e}  {status}")
    return EXIT_OK if rep["passed"] else EXIT_NUMERIC


def cmd_featurize(args) -> int:
    cfg = load_config(args.config).model_config().featurizer() if args.config else FeaturizerConfig()
    edges = parse_bonds(args.bonds) if args.bonds else []
    samples = parse_extxyz(args.data, edges)
    arrays = {}
    for k, s in enumerate(samples):
        f = featurize(GraphBatch.from_graphs([s.graph]), cfg)
        arrays[f"{k}/species"] = s.graph.species
        arrays[f"{k}/distances"] = f.distances[0]
        arrays[f"{k}/positional"] = f.positional.data[0]
        arrays[f"{k}/cutoff"] = f.cutoff.data[0]
        arrays[f"{k}/rel_types"] = f.rel_types[0]
        arrays[f"{k}/neighbor_mask"] = f.neighbor_mask[0]
    with open(args.out, "wb") as fh:
        np.savez(fh, **arrays)
    print(f"featurized {len(samples)} samples -> {args.out}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    from .train import param_count

    counts = param_count(_load(args.config))
    for k, v in counts.items():
        print(f"{k},{v}")
    return EXIT_OK


def cmd_gen_toymm(args) -> int:
    graph, ff = toy_mm_system()
    samples = gen_toy_mm_dataset(graph, ff, args.samples, noise=args.noise, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_extxyz(samples, out / "toymm.xyz")
    write_bonds(graph.relational_edges, out / "toymm.bonds")
    write_force_field(ff, out / "toymm.ff")
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="molct", description="Attention-based molecular potentials: training, evaluation and diagnostics")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train every configured seed")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--output-dir")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a saved model on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--bonds")
    s.add_argument("--t-max", type=int)
    s.add_argument("--predictions", help="write per-sample predictions CSV here")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", help="compare architecture variants on one split")
    s.add_argument("--config", required=True)
    s.add_argument("--variants", required=True, help="comma separated; combine with '+'")
    s.add_argument("--output-dir")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("featurize", help="write edge features of a dataset to .npz")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bonds")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_featurize)

    s = sub.add_parser("param-count", help="per-module parameter counts")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_param_count)

    s = sub.add_parser("gen-toymm", help="generate the toy molecular-mechanics dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--samples", type=int, default=2048)
    s.add_argument("--noise", type=float, default=0.08)
    s.set_defaults(fn=cmd_gen_toymm)
    return p


def main(argv=None) -> int:
    from .train import NumericFailure

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
