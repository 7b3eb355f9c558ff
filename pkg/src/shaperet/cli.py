"""Command-line surface: gen-data, train, build-index, query, eval.

Every command echoes its fully resolved configuration into the output
directory as a flat key=value file and refuses to overwrite existing outputs
unless --force is given. Exit codes: 0 success, 2 usage error, 3 data/format
error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets, index as index_mod, metrics, trainer
from .encoders import (encode_image, init_params, load_params, params_fingerprint,
                       save_params, shape_forward)
from .errors import FormatError, NumericError, ParameterError
from .geometry import AugmentConfig
from .losses import BetaSchedule

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULT_HIDDEN = 128
DEFAULT_EMBED = 64


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("SRE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ParameterError(f"SRE_SEED must be an integer, got {env!r}") from exc
    return 0


def _echo_config(out_dir: Path, command: str, settings: dict) -> None:
    lines = [f"command={command}"]
    lines += [f"{key}={settings[key]}" for key in sorted(settings)]
    (out_dir / "run_config.txt").write_text("\n".join(lines) + "\n")


def _refuse_existing(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ParameterError(f"{path} already exists; pass --force to overwrite")


def _load_manifest_arg(data_dir: Path, name: str) -> datasets.DatasetManifest:
    path = data_dir / name
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    return datasets.load_manifest(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    seed = _resolve_seed(args.seed)
    out = Path(args.out)
    _refuse_existing(out / datasets.MANIFEST_NAME, args.force)
    recipe = datasets.DatasetRecipe(
        families=tuple(args.families), per_family=args.per_family,
        n_points=args.points, n_views=args.views, grid=args.grid,
        seed=seed, name=args.name,
    )
    out.mkdir(parents=True, exist_ok=True)
    manifest = datasets.gen_dataset(recipe, out)
    split_note = "none"
    if args.split_mode != "none":
        train_m, test_m = datasets.split(manifest, args.split_mode,
                                         args.split_fraction, seed)
        datasets.save_manifest(train_m, out / datasets.TRAIN_MANIFEST_NAME)
        datasets.save_manifest(test_m, out / datasets.TEST_MANIFEST_NAME)
        split_note = f"{args.split_mode}:{args.split_fraction}"
    _echo_config(out, "gen-data", {
        "families": ",".join(recipe.families), "per_family": recipe.per_family,
        "points": recipe.n_points, "views": recipe.n_views, "grid": recipe.grid,
        "seed": seed, "name": recipe.name, "split": split_note,
    })
    print(f"wrote {len(manifest.shapes)} shapes to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    seed = _resolve_seed(args.seed)
    data_dir = Path(args.data)
    out = Path(args.out)
    checkpoint_path = out / "checkpoint.enck"
    _refuse_existing(checkpoint_path, args.force)
    manifest = _load_manifest_arg(data_dir, args.manifest)
    tuples = trainer.load_tuples(manifest, data_dir)

    if args.init == "scratch":
        params = init_params(manifest.feat_dim, hidden_dim=args.hidden,
                             embed_dim=args.embed, seed=seed)
    else:
        params = load_params(args.init)
        if params.feat_dim != manifest.feat_dim:
            raise FormatError(
                f"checkpoint feat_dim {params.feat_dim} != dataset {manifest.feat_dim}")
        params.shape_trainable = True
        params.image_trainable = True

    schedule = None
    if args.loss == "hcl":
        values = tuple(args.beta0 - i * (args.beta0 - args.beta_final) / 4 for i in range(5))
        schedule = BetaSchedule(total_epochs=args.epochs, stage_values=values)
    config = trainer.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.lr, optimizer=args.optimizer,
        loss={"infonce": "info_nce", "hcl": "hcl"}[args.loss],
        beta_schedule=schedule, seed=seed,
        mode=args.mode.replace("-", "_"), warmup_epochs=args.warmup_epochs,
        tau_init=args.tau_init, use_cache=not args.no_cache,
        augment=AugmentConfig(),
    )
    result = trainer.train(config, tuples, params)

    out.mkdir(parents=True, exist_ok=True)
    save_params(result.final_params, checkpoint_path)
    with open(out / "train_log.jsonl", "w") as fh:
        for rec in result.step_records:
            fh.write(json.dumps(rec) + "\n")
    _echo_config(out, "train", {
        "data": str(data_dir), "manifest": args.manifest, "loss": args.loss,
        "mode": args.mode, "init": args.init, "epochs": args.epochs,
        "batch_size": args.batch_size, "lr": args.lr, "optimizer": args.optimizer,
        "beta0": args.beta0, "beta_final": args.beta_final,
        "warmup_epochs": args.warmup_epochs, "tau_init": args.tau_init,
        "seed": seed, "hidden": args.hidden, "embed": args.embed,
        "cache": not args.no_cache,
    })
    final = result.epoch_records[-1]
    print(f"trained {args.epochs} epochs; final mean loss {final['mean_loss']:.4f}; "
          f"checkpoint {checkpoint_path}")
    return EXIT_OK


def cmd_build_index(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    out_path = Path(args.out)
    _refuse_existing(out_path, args.force)
    manifest = _load_manifest_arg(data_dir, args.manifest)
    params = load_params(args.checkpoint)
    if params.feat_dim != manifest.feat_dim:
        raise FormatError(
            f"checkpoint feat_dim {params.feat_dim} != dataset {manifest.feat_dim}")
    clouds = [datasets.load_dataset_cloud(data_dir, rec) for rec in manifest.shapes]
    emb = shape_forward(params, clouds).emb
    entries = [(rec.shape_id, rec.class_id, emb[i])
               for i, rec in enumerate(manifest.shapes)]
    idx = index_mod.build_index(entries, fingerprint=params_fingerprint(params))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    index_mod.save_index(idx, out_path)
    if out_path.parent != Path("."):
        _echo_config(out_path.parent, "build-index", {
            "data": str(data_dir), "manifest": args.manifest,
            "checkpoint": args.checkpoint, "out": str(out_path),
        })
    print(f"indexed {idx.size} shapes into {out_path}")
    return EXIT_OK


def _check_strict(idx: index_mod.ShapeIndex, params, strict: bool) -> None:
    if strict:
        index_mod.verify_fingerprint(idx, params_fingerprint(params))


def cmd_query(args: argparse.Namespace) -> int:
    idx = index_mod.load_index(args.index)
    params = load_params(args.checkpoint)
    _check_strict(idx, params, args.strict)
    if args.view_file:
        view = datasets.load_view(args.view_file)
        descriptor = view.descriptor
    else:
        if args.shape is None or args.view is None:
            raise ParameterError("provide either --view-file or --shape with --view")
        data_dir = Path(args.data)
        manifest = _load_manifest_arg(data_dir, args.manifest)
        rec = manifest.shape_map().get(args.shape)
        if rec is None:
            raise ParameterError(f"shape {args.shape!r} not in manifest")
        if args.view not in rec.view_indices:
            raise ParameterError(f"view {args.view} not listed for {args.shape!r}")
        rel = rec.view_paths[rec.view_indices.index(args.view)]
        descriptor = datasets.load_view(data_dir / rel, args.view).descriptor
    emb = encode_image(params, descriptor)
    res = index_mod.query(idx, emb, args.k)
    for rank, (sid, cid, sim) in enumerate(
            zip(res.shape_ids, res.class_ids, res.similarities), start=1):
        print(f"{rank:3d}  {sim:+.6f}  {sid}  [{cid}]")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    report_path = out / "report.jsonl"
    _refuse_existing(report_path, args.force)
    idx = index_mod.load_index(args.index)
    params = load_params(args.checkpoint)
    _check_strict(idx, params, args.strict)
    manifest = _load_manifest_arg(data_dir, args.manifest)

    queries = []
    for rec in manifest.shapes:
        for view in datasets.load_dataset_views(data_dir, rec):
            emb = encode_image(params, view.descriptor)
            queries.append((emb, rec.shape_id, rec.class_id))
    report = metrics.evaluate(idx, queries, k=args.k)

    out.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_jsonl())
    _echo_config(out, "eval", {
        "data": str(data_dir), "manifest": args.manifest, "index": args.index,
        "checkpoint": args.checkpoint, "k": args.k,
    })
    for line in report.summary_lines():
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shaperet",
        description="Cross-modal shape retrieval: synthetic data, contrastive "
                    "training, exact cosine k-NN, and retrieval metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--families", nargs="+",
                   default=["box", "cylinder", "torus", "superellipsoid"])
    p.add_argument("--per-family", type=int, default=16)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--split-mode", choices=["none", "shape_centered", "image_centered"],
                   default="none")
    p.add_argument("--split-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train encoders on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=datasets.MANIFEST_NAME)
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=["infonce", "hcl"], default="infonce")
    p.add_argument("--mode", choices=["pre-align", "fine-tune"], default="pre-align")
    p.add_argument("--init", default="scratch",
                   help="'scratch' or a checkpoint path to fine-tune from")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--optimizer", choices=["adaptive_moments", "sgd_momentum"],
                   default="adaptive_moments")
    p.add_argument("--beta0", type=float, default=0.5)
    p.add_argument("--beta-final", type=float, default=0.1)
    p.add_argument("--warmup-epochs", type=int, default=10)
    p.add_argument("--tau-init", type=float, default=0.07)
    p.add_argument("--hidden", type=int, default=DEFAULT_HIDDEN)
    p.add_argument("--embed", type=int, default=DEFAULT_EMBED)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-index", help="encode all clouds and build the k-NN index")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=datasets.MANIFEST_NAME)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="embed one view and list nearest shapes")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--manifest", default=datasets.MANIFEST_NAME)
    p.add_argument("--shape")
    p.add_argument("--view", type=int)
    p.add_argument("--view-file")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="run the retrieval metric suite on a manifest")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=datasets.TEST_MANIFEST_NAME)
    p.add_argument("--out", required=True)
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
