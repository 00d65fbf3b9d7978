"""Command-line entry point.

Subcommands: ``forward`` (adapter forward pass on TNS1 tensors), ``lora
apply``, ``prompts generate``, ``instances dedup``, ``loss eval``, ``loss
ema-sim``, ``metrics saliency``, ``metrics instances``, ``audit params``,
``gradcheck``, ``demo``. Exit codes: 0 success, 1 validation error, 2 I/O
error, 3 numerical failure. ``DSGA_THREADS`` caps the per-image worker pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import fileio, pipeline
from .adapter import DsgaConfig, dsga_forward
from .config import PipelineConfig, ValidationError
from .lora import LoraLayer, lora_apply
from .losses import (
    LossHyper,
    LossWeights,
    combined_loss,
    contributions_from_components,
    ContributionState,
    ema_normalized,
    ema_update,
)
from .metrics import DetectionSet, detection_report, evaluate_saliency
from .numerics import NumericalError
from .prompts import PromptConfig, ScoredInstance, dedup_instances, generate_prompts

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


def _worker_count(n_items: int) -> int:
    env = os.environ.get("DSGA_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    if cap < 1:
        raise ValidationError(f"DSGA_THREADS must be >= 1, got {cap}")
    return max(1, min(cap, n_items))


def _emit(obj, out_path: str | None) -> None:
    if out_path:
        fileio.write_json(out_path, obj)
    else:
        json.dump(obj, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


# ---------------------------------------------------------------- commands


def cmd_forward(args) -> int:
    x = fileio.read_tns(args.input)
    cfg_data = fileio.read_json(args.config)
    if not isinstance(cfg_data, dict):
        raise ValidationError("dsga config must be a JSON object")
    full = PipelineConfig.from_dict({"dsga": cfg_data})
    cfg = full.dsga
    params = pipeline.read_params_bundle(args.params)
    out, graph = dsga_forward(x, params, cfg)
    fileio.write_tns(args.output, out)
    if args.emit_graph:
        fileio.write_json(args.emit_graph, graph.as_json_obj())
    return EXIT_OK


def cmd_lora_apply(args) -> int:
    w0 = fileio.read_tns(args.base)
    a = fileio.read_tns(args.a)
    b = fileio.read_tns(args.b)
    x = fileio.read_tns(args.input)
    layer = LoraLayer(w0=w0, a=a, b=b, rank=args.rank, alpha=args.alpha)
    fileio.write_tns(args.output, lora_apply(layer, x))
    return EXIT_OK


def cmd_prompts_generate(args) -> int:
    mask = fileio.read_mask(args.mask)
    cfg = PromptConfig(
        grid_size=args.grid,
        saliency_threshold=args.threshold,
        n_min=args.nmin,
        n_max=args.nmax,
    )
    prompts = generate_prompts(mask, cfg)
    with open(args.out, "w") as fh:
        for p in prompts:
            fh.write(
                '{"x":%d,"y":%d,"confidence":%.6f,"cell":[%d,%d]}\n'
                % (p.x, p.y, p.confidence, p.source_cell[0], p.source_cell[1])
            )
    return EXIT_OK


def cmd_instances_dedup(args) -> int:
    manifest = Path(args.manifest)
    candidates, _ = pipeline.load_candidates(manifest)
    kept = dedup_instances(candidates, tau_o=args.iou_threshold)
    data = fileio.read_json(manifest)
    kept_ids = []
    by_id = {id(c): i for i, c in enumerate(candidates)}
    for inst in kept:
        kept_ids.append(by_id[id(inst)])
    entries = [data["instances"][i] for i in kept_ids]
    _emit({"count": len(entries), "instances": entries}, args.out)
    return EXIT_OK


def cmd_loss_eval(args) -> int:
    pred = fileio.read_saliency(args.pred)
    gt = fileio.read_mask(args.gt)
    lam = [float(v) for v in args.weights.split(",")]
    if len(lam) != 3:
        raise ValidationError(f"--weights needs 3 comma-separated values, got {args.weights!r}")
    weights = LossWeights(lam1=lam[0], lam2=lam[1], lam3=lam[2])
    hyper = LossHyper(
        focal_gamma=args.focal_gamma,
        focal_alpha=args.focal_alpha,
        dice_smooth=args.dice_smooth,
    )
    total, parts = combined_loss(pred, gt, weights, hyper)
    _emit({"total": total, **parts}, args.out)
    return EXIT_OK


def cmd_loss_ema_sim(args) -> int:
    weights = LossWeights(ema_beta=args.beta, ema_enabled=True)
    state = ContributionState()
    rows = []
    with open(args.trace) as fh:
        for step, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            values = record["contributions"]
            contributions, state = contributions_from_components(
                values, state, mode=args.mode
            )
            weights = ema_update(weights, contributions)
            used = ema_normalized(weights)
            rows.append(
                {
                    "step": step,
                    "contributions": list(contributions),
                    "lambda_raw": list(weights.lams),
                    "lambda_normalized": list(used.lams),
                }
            )
    if args.out:
        with open(args.out, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    else:
        for row in rows:
            sys.stdout.write(json.dumps(row, sort_keys=True) + "\n")
    return EXIT_OK


def _pair_files(pred_dir: Path, gt_dir: Path):
    preds = {p.stem: p for p in sorted(pred_dir.iterdir()) if p.is_file()}
    gts = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.is_file()}
    common = sorted(set(preds) & set(gts))
    if not common:
        raise ValidationError(f"no common file stems between {pred_dir} and {gt_dir}")
    return [(stem, preds[stem], gts[stem]) for stem in common]


def cmd_metrics_saliency(args) -> int:
    pairs = _pair_files(Path(args.pred_dir), Path(args.gt_dir))

    def one(item):
        stem, pred_path, gt_path = item
        report = evaluate_saliency(fileio.read_saliency(pred_path), fileio.read_mask(gt_path))
        return stem, report.as_dict()

    with ThreadPoolExecutor(max_workers=_worker_count(len(pairs))) as pool:
        rows = list(pool.map(one, pairs))

    keys = list(rows[0][1])
    means = {k: float(np.mean([r[k] for _, r in rows])) for k in keys}
    _emit(
        {"images": {stem: r for stem, r in rows}, "dataset_mean": means, "count": len(rows)},
        args.out,
    )
    return EXIT_OK


def cmd_metrics_instances(args) -> int:
    preds, _ = pipeline.load_candidates(args.pred_manifest)
    gt_manifest = Path(args.gt_manifest)
    gt_data = fileio.read_json(gt_manifest)
    if not isinstance(gt_data, dict) or "instances" not in gt_data:
        raise ValidationError(f"{gt_manifest}: expected an 'instances' list")
    gts = [fileio.read_mask(gt_manifest.parent / e["mask"]) for e in gt_data["instances"]]
    report = detection_report(DetectionSet(predictions=preds, ground_truths=gts))
    _emit(report, args.out)
    return EXIT_OK


def cmd_audit_params(args) -> int:
    if args.config:
        cfg = PipelineConfig.from_dict(fileio.read_json(args.config))
    else:
        cfg = PipelineConfig()
    report = pipeline.audit_params(cfg)
    _emit(report.as_dict(), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = pipeline.gradcheck_all(seed=args.seed, instances=args.instances)
    report = {"ops": [r.as_dict() for r in results], "pass": all(r.passed for r in results)}
    _emit(report, args.out)
    if not report["pass"]:
        raise NumericalError("gradient check failed; see report")
    return EXIT_OK


def cmd_demo(args) -> int:
    summary = pipeline.demo_synthetic(seed=args.seed, out_dir=args.out)
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


class _Parser(argparse.ArgumentParser):
    """Argparse maps usage errors to exit code 2; this CLI reserves 2 for I/O,
    so parse failures surface as validation errors (exit 1) instead."""

    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dsga",
        description="Graph-adapter toolkit: adapter/LoRA forward passes, prompt "
        "generation, instance dedup, losses, metrics, audit, and gradient checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="adapter forward pass on a TNS1 embedding field")
    p.add_argument("--input", required=True)
    p.add_argument("--params", required=True, help="directory of named TNS1 files")
    p.add_argument("--config", required=True, help="JSON adapter config")
    p.add_argument("--output", required=True)
    p.add_argument("--emit-graph", default=None)
    p.set_defaults(func=cmd_forward)

    lora = sub.add_parser("lora", help="low-rank update operations").add_subparsers(
        dest="subcommand", required=True
    )
    p = lora.add_parser("apply", help="h = x W0^T + (alpha/r) x A^T B^T")
    p.add_argument("--base", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_lora_apply)

    prompts = sub.add_parser("prompts", help="point-prompt generation").add_subparsers(
        dest="subcommand", required=True
    )
    p = prompts.add_parser("generate", help="grid-saliency prompts from a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--nmin", type=int, default=1)
    p.add_argument("--nmax", type=int, default=1024)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prompts_generate)

    instances = sub.add_parser("instances", help="instance post-processing").add_subparsers(
        dest="subcommand", required=True
    )
    p = instances.add_parser("dedup", help="greedy IoU suppression of candidates")
    p.add_argument("--manifest", required=True)
    p.add_argument("--iou-threshold", type=float, default=0.75)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_instances_dedup)

    loss = sub.add_parser("loss", help="composite loss evaluation").add_subparsers(
        dest="subcommand", required=True
    )
    p = loss.add_parser("eval", help="focal + dice + boundary on one image")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--weights", default="1,1,1")
    p.add_argument("--focal-gamma", type=float, default=2.0)
    p.add_argument("--focal-alpha", type=float, default=0.25)
    p.add_argument("--dice-smooth", type=float, default=1.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_loss_eval)
    p = loss.add_parser("ema-sim", help="replay a contribution trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--mode", choices=["scale_normalized", "raw"], default="scale_normalized")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_loss_ema_sim)

    metrics = sub.add_parser("metrics", help="evaluation suites").add_subparsers(
        dest="subcommand", required=True
    )
    p = metrics.add_parser("saliency", help="per-image and dataset-mean saliency metrics")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics_saliency)
    p = metrics.add_parser("instances", help="detection metrics for instance masks")
    p.add_argument("--pred-manifest", required=True)
    p.add_argument("--gt-manifest", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics_instances)

    audit = sub.add_parser("audit", help="parameter accounting").add_subparsers(
        dest="subcommand", required=True
    )
    p = audit.add_parser("params", help="trainable-parameter audit vs reference totals")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of every vjp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("demo", help="seeded synthetic end-to-end run")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="demo_artifacts")
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (fileio.FileFormatError, FileNotFoundError, IsADirectoryError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
