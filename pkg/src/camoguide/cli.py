"""Command-line entry points: gen-data, train, eval, infer, inspect-memory.

Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure.
Every command is deterministic given its inputs and seed.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as config_mod
from . import dataset as dataset_mod
from . import metrics as metrics_mod
from . import persist, pnm
from .checkpoint import CheckpointError
from .memory import MemoryError_
from .model import CamoModel
from .tensor import Tensor
from .training import TrainingError, infer_mask, train_loop

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override the config seed")


def _resolved(args, extra: dict | None = None) -> config_mod.RunConfig:
    overrides = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return config_mod.resolve(getattr(args, "config", None), overrides)


def cmd_gen_data(args) -> int:
    cfg = _resolved(args)
    gen = config_mod.gen_config(cfg)
    dataset_mod.generate_dataset(args.out, gen, cfg.seed)
    config_mod.write_resolved(cfg, os.path.join(args.out, "resolved_config.txt"))
    print(dataset_mod.dataset_sha256(args.out))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {}
    for key in ("no_ref_baseline", "one_way_baa", "share_baa", "freeze_ref"):
        if getattr(args, key):
            overrides[key] = True
    if args.guidance_mode:
        overrides["guidance_mode"] = args.guidance_mode
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.channels is not None:
        overrides["channels"] = args.channels
    cfg = _resolved(args, overrides)
    records = dataset_mod.load_dataset(args.data)
    categories = max(r.category for r in records) + 1
    sizes = {pnm.read_ppm(os.path.join(args.data, records[0].image_path)).shape[1]}
    cfg.size = sizes.pop()
    mcfg = config_mod.model_config(cfg, categories=categories)
    tcfg = config_mod.train_config(cfg)
    model = CamoModel(mcfg, rng=np.random.default_rng(tcfg.seed))
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_resolved(cfg, os.path.join(args.out, "resolved_config.txt"))
    summary = train_loop(model, args.data, records, tcfg, out_dir=args.out)
    ckpt = os.path.join(args.out, "checkpoint.rfo")
    persist.save_model(ckpt, model)
    print(f"final step {summary['step']}: l_total={summary['l_total']:.6f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _eval_one_mode(model, root, test_records, mode, pred_out: str | None):
    model.cfg.guidance_mode = mode
    pairs = []
    for rec in test_records:
        img, mask = dataset_mod.load_sample(root, rec)
        y = rec.category if mode == "oracle" else None
        pred = infer_mask(model, img, y=y)
        if pred_out:
            pnm.write_pgm(os.path.join(pred_out, rec.id + ".pgm"), pred)
            pred = pnm.read_pgm(os.path.join(pred_out, rec.id + ".pgm"))
        pairs.append((rec.id, pred, mask[0] >= 0.5))
    return metrics_mod.evaluate_pairs(pairs)


def cmd_eval(args) -> int:
    records = dataset_mod.load_dataset(args.data)
    test = [r for r in records if r.split == "test" and r.role == "query"]
    if not test:
        raise config_mod.ConfigError("dataset has no test queries")
    out_dir = os.path.dirname(os.path.abspath(args.out_report))
    os.makedirs(out_dir, exist_ok=True)
    if args.pred_dir:
        gt_dir = os.path.join(args.data, "masks")
        pairs = []
        for rec in test:
            pred = pnm.read_pgm(os.path.join(args.pred_dir, rec.id + ".pgm"))
            gt = pnm.read_pgm(os.path.join(args.data, rec.mask_path)) >= 0.5
            pairs.append((rec.id, pred, gt))
        report, rows = metrics_mod.evaluate_pairs(pairs)
        metrics_mod.write_report_tsv(args.out_report, report, rows)
        print(f"s_m={report.s_measure:.4f} alpha_e={report.adaptive_e:.4f} "
              f"w_f={report.weighted_f:.4f} mae={report.mae:.4f} n={report.n}")
        return EXIT_OK
    model = persist.load_model(args.ckpt)
    modes = [m.strip() for m in args.modes.split(",")] if args.modes else \
        [model.cfg.guidance_mode]
    for mode in modes:
        if mode not in ("mixture", "nearest", "oracle"):
            raise config_mod.ConfigError(f"unknown guidance mode {mode!r}")
        if mode != "mixture" and model.memory is None:
            raise config_mod.ConfigError("baseline checkpoint supports no guidance modes")
    pred_root = args.save_preds
    summaries = []
    for mode in modes:
        pred_out = None
        if pred_root:
            pred_out = os.path.join(pred_root, mode) if len(modes) > 1 else pred_root
            os.makedirs(pred_out, exist_ok=True)
        report, rows = _eval_one_mode(model, args.data, test, mode, pred_out)
        summaries.append((mode, report))
        detail = args.out_report if len(modes) == 1 else \
            f"{os.path.splitext(args.out_report)[0]}.{mode}.tsv"
        metrics_mod.write_report_tsv(detail, report, rows)
    if len(modes) > 1:
        with open(args.out_report, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("mode\ts_m\talpha_e\tw_f\tmae\tn\n")
            for mode, rep in summaries:
                fh.write(f"{mode}\t{rep.s_measure:.9f}\t{rep.adaptive_e:.9f}"
                         f"\t{rep.weighted_f:.9f}\t{rep.mae:.9f}\t{rep.n}\n")
    for mode, rep in summaries:
        print(f"{mode}: s_m={rep.s_measure:.4f} alpha_e={rep.adaptive_e:.4f} "
              f"w_f={rep.weighted_f:.4f} mae={rep.mae:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = persist.load_model(args.ckpt)
    if model.cfg.guidance_mode == "oracle":
        raise config_mod.ConfigError(
            "oracle guidance needs category labels; single-image inference refuses it")
    image = pnm.read_ppm(args.image)
    probs, pi = model.forward_infer(Tensor(image))
    pnm.write_pgm(args.out_mask, probs.data[0])
    if pi is not None:
        top = np.argsort(pi)[::-1][:3]
        weights = " ".join(f"{k}:{pi[k]:.4f}" for k in top)
        print(f"top-3 mixture weights: {weights}")
    else:
        print("baseline checkpoint: no mixture weights")
    print(f"mask: {args.out_mask}")
    return EXIT_OK


def cmd_inspect_memory(args) -> int:
    mem = persist.load_memory(args.ckpt)
    norms = np.linalg.norm(mem.prototypes, axis=1)
    print(f"categories: {mem.num_categories}  channels: {mem.channels}  "
          f"momentum: {mem.momentum}")
    for k in range(mem.num_categories):
        flag = "initialized" if mem.initialized[k] else "empty"
        print(f"  slot {k}: |m|={norms[k]:.6f}  {flag}")
    safe = np.where(norms > 0, norms, 1.0)
    unit = mem.prototypes / safe[:, None]
    cos = unit @ unit.T
    print("cosine similarity:")
    for k in range(mem.num_categories):
        print("  " + " ".join(f"{cos[k, j]:+.3f}" for j in range(mem.num_categories)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camoguide",
        description="Camouflaged-object segmentation with prototype-memory guidance")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_config_args(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_args(p)
    p.add_argument("--no-ref-baseline", action="store_true",
                   help="train the no-guidance ablation baseline")
    p.add_argument("--guidance-mode", choices=["mixture", "nearest", "oracle"])
    p.add_argument("--one-way-baa", action="store_true",
                   help="disable the reverse guidance refinement")
    p.add_argument("--share-baa", action="store_true",
                   help="share alignment weights across top-stage iterations")
    p.add_argument("--freeze-ref", action="store_true",
                   help="freeze the reference encoder")
    p.add_argument("--epochs", type=int)
    p.add_argument("--channels", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--out-report", required=True, help="TSV report path")
    p.add_argument("--modes", help="comma-separated guidance modes to evaluate")
    p.add_argument("--save-preds", help="directory for predicted masks")
    p.add_argument("--pred-dir", help="evaluate existing predictions instead of a model")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="segment a single image, reference-free")
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-mask", required=True, help="output PGM probability mask")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("inspect-memory", help="print prototype memory statistics")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_inspect_memory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TrainingError as exc:
        print(f"numeric failure: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    except (config_mod.ConfigError, CheckpointError, MemoryError_,
            dataset_mod.DatasetError, pnm.PnmError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
