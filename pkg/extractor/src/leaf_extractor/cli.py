"""CLI: train a leaf-exporting classifier, then export leaf assignments."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .core import (
    TrainError,
    TrainSpec,
    export_leaves,
    load_features,
    load_model,
    save_model,
    train_classifier,
)
from .formats import ExportError, read_meta_jsonl


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leaf-extractor", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit the classifier and report held-out ROC AUC")
    p.add_argument("--features", required=True, help="feature matrix (.npz with 'X', or CSV)")
    p.add_argument("--meta", required=True, help="row metadata (.meta.jsonl)")
    p.add_argument("--max-depth", type=int, default=17)
    p.add_argument("--eta", type=float, default=0.15)
    p.add_argument("--n-estimators", type=int, default=2048)
    p.add_argument("--colsample-bytree", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model", required=True)

    p = sub.add_parser("export", help="write leaf assignments as .lsim plus metadata sidecar")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="output .lsim path")
    p.add_argument(
        "--meta",
        help="metadata to carry through to the sidecar (default: synthesized placeholders)",
    )
    return parser


def _cmd_train(args: argparse.Namespace) -> int:
    spec = TrainSpec(
        features=args.features,
        meta=args.meta,
        max_depth=args.max_depth,
        eta=args.eta,
        n_estimators=args.n_estimators,
        colsample_bytree=args.colsample_bytree,
        seed=args.seed,
        out_model=args.out_model,
    )
    model, auc = train_classifier(spec)
    save_model(model, auc, spec, args.out_model)
    print(f"trained {args.n_estimators} trees; held-out ROC AUC {auc:.4f}")
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    features = load_features(args.features)
    meta_rows = read_meta_jsonl(args.meta) if args.meta else None
    sidecar = export_leaves(model, features, args.out, meta_rows)
    print(f"wrote {args.out} and {sidecar}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        return _cmd_export(args)
    except (TrainError, ExportError, OSError) as exc:
        print(f"leaf-extractor: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
