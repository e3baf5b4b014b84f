"""Command-line entry points: train, eval, analyze, preview-rearrange,
export-embeddings, gen-data."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import invariance as inv
from . import srm as srm_mod
from .config import config_to_text, load_config
from .data import default_domain_pair, generate_domain, load_dataset, save_dataset
from .net import evaluate, load_checkpoint, train
from .stats import present_categories, resize_labels


def _apply_ablation_flags(cfg, args):
    if args.no_srm:
        cfg.train.use_srm = False
    if args.no_pc:
        cfg.train.use_pc = False
    if args.no_mla:
        cfg.train.use_mla_global = False
        cfg.train.use_mla_regional = False
        cfg.train.use_mla_local = False
    if args.no_mla_global:
        cfg.train.use_mla_global = False
    if args.no_mla_regional:
        cfg.train.use_mla_regional = False
    if args.no_mla_local:
        cfg.train.use_mla_local = False
    if args.no_style_elim:
        cfg.network.style_elim = False
    if args.unfreeze_layer0:
        cfg.network.frozen_layer0 = False
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.network.seed = args.seed
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _apply_ablation_flags(cfg, args)
    dataset = load_dataset(cfg.source_dir)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_echo.txt").write_text(config_to_text(cfg))
    result = train(dataset, cfg.network, cfg.train, out_dir=out_dir)
    print(f"run directory: {out_dir}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"parameter digest: {result.final_digest}")
    return 0


def _iou_table(ious, mean) -> str:
    lines = [f"{'category':>10}{'IoU':>10}"]
    for c, v in enumerate(ious):
        cell = "-" if np.isnan(v) else f"{v:.4f}"
        lines.append(f"{c:>10}{cell:>10}")
    lines.append(f"{'mean':>10}{mean:>10.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if not dataset:
        raise ValueError(f"dataset {args.data} is empty")
    ious, mean = evaluate(model, dataset)
    table = _iou_table(ious, mean)
    print(table)
    if args.out:
        report = {
            "per_category_iou": [None if np.isnan(v) else float(v) for v in ious],
            "mean_iou": mean,
            "dataset": str(args.data),
        }
        Path(args.out).write_text(json.dumps(report, indent=2))
    return 0


def cmd_analyze(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    source = load_dataset(args.source)
    target = load_dataset(args.target)
    report = inv.analyze(
        model,
        source,
        target,
        trials=args.trials,
        samples_per_trial=args.samples,
        gamma=args.gamma,
        seed=args.seed if args.seed is not None else 0,
    )
    table = inv.format_report_table(report, Path(args.source).name, Path(args.target).name)
    print(table)
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_preview_rearrange(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    sample = dataset[args.index]
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    with torch.no_grad():
        f_s = model.stem(sample.image.unsqueeze(0))[0]
    gt_s = resize_labels(sample.labels, f_s.shape[-2], f_s.shape[-1])
    _, report = srm_mod.rearrange(f_s, gt_s, rng, args.alpha, with_report=True)
    payload = {
        "sample_index": args.index,
        "seed": args.seed if args.seed is not None else 0,
        "alpha": args.alpha,
        "regions": report,
    }
    Path(args.out).write_text(json.dumps(payload, indent=2))
    print(f"wrote rearrangement preview for {len(report)} regions to {args.out}")
    return 0


def cmd_export_embeddings(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    domain = Path(args.data).name
    rows = []
    dim = None
    with torch.no_grad():
        for i, sample in enumerate(dataset):
            feats = model(sample.image.unsqueeze(0)).features[args.layer][0]
            dim = feats.shape[0]
            gt = resize_labels(sample.labels, feats.shape[-2], feats.shape[-1])
            if args.level == "global":
                rows.append((i, -1, feats.mean(dim=(1, 2)).tolist()))
            elif args.level == "regional":
                for c in present_categories(gt):
                    vec = feats.permute(1, 2, 0)[gt == c].mean(dim=0)
                    rows.append((i, c, vec.tolist()))
            else:  # local
                flat = feats.permute(1, 2, 0).reshape(-1, dim)
                for c, vec in zip(gt.reshape(-1).tolist(), flat):
                    rows.append((i, c, vec.tolist()))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(args.out, "w") as fh:
        fh.write(f"# layer={args.layer} level={args.level} dim={dim}\n")
        fh.write("sample,domain,category," + ",".join(f"f{j}" for j in range(dim)) + "\n")
        for sid, cat, vec in rows:
            fh.write(f"{sid},{domain},{cat}," + ",".join(f"{v:.6g}" for v in vec) + "\n")
    print(f"wrote {len(rows)} embedding rows to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    source_spec, target_spec = default_domain_pair(
        num_categories=args.categories, layout_seed=args.layout_seed, size=args.size
    )
    spec = source_spec if args.role == "source" else target_spec
    rng = np.random.default_rng(args.seed)
    samples = generate_domain(spec, args.n, rng)
    save_dataset(samples, args.out, spec=spec)
    print(f"wrote {len(samples)} {args.role} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srma")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a run config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None, help="override output run directory")
    p_train.add_argument("--seed", type=int, default=None)
    for flag in (
        "no-srm",
        "no-pc",
        "no-mla",
        "no-mla-global",
        "no-mla-regional",
        "no-mla-local",
        "no-style-elim",
        "unfreeze-layer0",
    ):
        p_train.add_argument(f"--{flag}", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="per-category IoU of a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_an = sub.add_parser("analyze", help="domain-invariance report between two datasets")
    p_an.add_argument("--checkpoint", required=True)
    p_an.add_argument("--source", required=True)
    p_an.add_argument("--target", required=True)
    p_an.add_argument("--trials", type=int, default=10)
    p_an.add_argument("--samples", type=int, default=300)
    p_an.add_argument("--gamma", type=float, default=inv.DEFAULT_GAMMA)
    p_an.add_argument("--seed", type=int, default=None)
    p_an.add_argument("--out", default=None)
    p_an.set_defaults(func=cmd_analyze)

    p_pre = sub.add_parser(
        "preview-rearrange", help="per-region rearrangement report for one sample"
    )
    p_pre.add_argument("--checkpoint", required=True)
    p_pre.add_argument("--data", required=True)
    p_pre.add_argument("--index", type=int, default=0)
    p_pre.add_argument("--seed", type=int, default=None)
    p_pre.add_argument("--alpha", type=float, default=srm_mod.DEFAULT_ALPHA)
    p_pre.add_argument("--out", required=True)
    p_pre.set_defaults(func=cmd_preview_rearrange)

    p_exp = sub.add_parser("export-embeddings", help="delimited feature vectors per sample/region")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--data", required=True)
    p_exp.add_argument("--layer", type=int, choices=range(1, 5), default=4)
    p_exp.add_argument("--level", choices=("global", "regional", "local"), default="regional")
    p_exp.add_argument("--out", required=True)
    p_exp.set_defaults(func=cmd_export_embeddings)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic paired-domain dataset")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--role", choices=("source", "target"), required=True)
    p_gen.add_argument("--n", type=int, default=24)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--categories", type=int, default=4)
    p_gen.add_argument("--layout-seed", type=int, default=0)
    p_gen.add_argument("--size", type=int, default=32)
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: report and fail with exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
