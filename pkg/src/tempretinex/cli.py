"""Command-line entry points: train, enhance, evaluate, aba, synth."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import metrics
from .data_io import (
    RunConfig,
    config_from_env,
    discover_sequences,
    load_config,
    save_frame,
    save_sequence,
    synth_sequence,
    to_array,
)
from .errors import ConfigError, DivergenceError, TempRetinexError
from .flow import make_estimator
from .networks import load_checkpoint
from .pipeline import enhance_sequence, reverse_inference, train
from .preprocessing import apply_aba

MANIFEST_SCHEMA = "manifest-v1"


def _fmt(x: float | None) -> str:
    if x is None:
        return "absent"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return f"{x:.6f}"


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "config": cfg.to_mapping(),
        "seed": cfg.seed,
    }
    payload.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _resolve_config(args) -> RunConfig:
    cfg = config_from_env(RunConfig())
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "flow", None):
        overrides["flow_backend"] = args.flow
    if getattr(args, "flow_ckpt", None):
        overrides["flow_checkpoint"] = args.flow_ckpt
    if getattr(args, "per_video", False):
        overrides["per_video"] = True
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg.validate()


def _add_flow_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--flow", choices=("classical", "zero", "external"), default=None,
                   help="optical flow backend (default: classical)")
    p.add_argument("--flow-ckpt", default=None, help="checkpoint path for the external flow backend")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    roots = list(args.data)
    if args.data2:
        roots.append(args.data2)
    sequences = []
    for root in roots:
        sequences.extend(discover_sequences(root))
    out_dir = Path(args.out)
    results = {}
    if cfg.per_video:
        for seq in sequences:
            log = train([seq], cfg, args.steps, out_dir / seq.name)
            results[seq.name] = log[-1]["total"] if log else None
    else:
        log = train(sequences, cfg, args.steps, out_dir)
        results["all"] = log[-1]["total"] if log else None
    _write_manifest(
        out_dir, "train", cfg,
        steps=args.steps,
        data=[str(r) for r in roots],
        sequences=sorted(s.name for s in sequences),
        final_total=results,
        checkpoint=f"ckpt_{args.steps}.tpx",
    )
    for name, final in results.items():
        print(f"trained [{name}]: {args.steps} steps, final total loss {_fmt(final) if final is not None else 'n/a'}")
    return 0


def cmd_enhance(args) -> int:
    cfg = _resolve_config(args)
    nets = load_checkpoint(args.ckpt)
    nets.eval()
    est = make_estimator(cfg.flow_backend, cfg.flow_checkpoint)
    sequences = discover_sequences(args.in_dir)
    out_dir = Path(args.out)
    mode = "offline" if args.offline else "online"
    for seq in sequences:
        if args.offline:
            enhanced = reverse_inference(nets, seq, est, cfg)
        else:
            enhanced = enhance_sequence(nets, seq, est, cfg)
        save_sequence(enhanced, out_dir / seq.name)
    _write_manifest(
        out_dir, "enhance", cfg,
        mode=mode,
        checkpoint=str(args.ckpt),
        input=str(args.in_dir),
        sequences=sorted(s.name for s in sequences),
    )
    print(f"enhanced {len(sequences)} sequence(s) in {mode} mode -> {out_dir}")
    return 0


def _grid_lines(rows: list[dict]) -> list[str]:
    cols = ["sequence", "protocol", "psnr", "ssim", "mabd"]
    if any("mabd_pairwise" in r for r in rows):
        cols.append("mabd_pairwise")
    widths = {c: max(len(c), 13) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for r in rows:
        cells = []
        for c in cols:
            if c in ("sequence", "protocol"):
                cells.append(str(r.get(c, "")).ljust(widths[c]))
            elif c in r:
                cells.append(_fmt(r[c]).rjust(widths[c]))
            else:
                cells.append(" " * widths[c])
        lines.append("  ".join(cells))
    return lines


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    pred_seqs = {s.name: s for s in discover_sequences(args.pred)}
    gt_seqs = {s.name: s for s in discover_sequences(args.gt)}
    if set(pred_seqs) != set(gt_seqs):
        missing_gt = sorted(set(pred_seqs) - set(gt_seqs))
        missing_pred = sorted(set(gt_seqs) - set(pred_seqs))
        raise ConfigError(
            f"sequence sets differ: missing from gt {missing_gt}, missing from pred {missing_pred}"
        )
    protocols = ["raw"] + (["hm"] if args.hm else [])

    def score_one(name: str) -> list[dict]:
        rows = []
        for protocol in protocols:
            report = metrics.evaluate(pred_seqs[name], gt_seqs[name], protocol)
            row = report.to_mapping()
            if args.mabd_pairwise:
                est = make_estimator(cfg.flow_backend, cfg.flow_checkpoint)
                aligned = metrics.aligned_reference(pred_seqs[name], est)
                row["mabd_pairwise"] = metrics.mabd(pred_seqs[name], aligned)
            rows.append(row)
        return rows

    names = sorted(pred_seqs)
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            per_seq = list(pool.map(score_one, names))
    else:
        per_seq = [score_one(n) for n in names]
    rows = [row for rows_ in per_seq for row in rows_]
    for protocol in protocols:
        proto_rows = [r for r in rows if r["protocol"] == protocol and r["name"] != "aggregate"]
        agg = {
            "name": "aggregate",
            "protocol": protocol,
            "psnr": sum(r["psnr"] for r in proto_rows) / len(proto_rows),
            "ssim": sum(r["ssim"] for r in proto_rows) / len(proto_rows),
            "mabd": sum(r["mabd"] for r in proto_rows) / len(proto_rows),
        }
        if args.mabd_pairwise:
            agg["mabd_pairwise"] = sum(r["mabd_pairwise"] for r in proto_rows) / len(proto_rows)
        rows.append(agg)

    grid_rows = [{**r, "sequence": r["name"]} for r in rows]
    for line in _grid_lines(grid_rows):
        print(line)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_cols = ["sequence", "protocol", "psnr", "ssim", "mabd"] + (
        ["mabd_pairwise"] if args.mabd_pairwise else []
    )
    with open(out_dir / "eval_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_cols)
        for r in grid_rows:
            writer.writerow([r["sequence"], r["protocol"]] + [_fmt(r.get(c)) for c in csv_cols[2:]])
    (out_dir / "eval_report.json").write_text(
        json.dumps([{k: v for k, v in r.items() if k != "sequence"} for r in grid_rows],
                   indent=2, sort_keys=True, allow_nan=True) + "\n"
    )
    _write_manifest(out_dir, "evaluate", cfg, pred=str(args.pred), gt=str(args.gt),
                    protocols=protocols, pairwise=bool(args.mabd_pairwise))
    return 0


def cmd_aba(args) -> int:
    cfg = _resolve_config(args)
    threshold = args.cdf_threshold if args.cdf_threshold is not None else cfg.cdf_threshold
    sequences = discover_sequences(args.in_dir)
    out_dir = Path(args.out)
    for seq in sequences:
        seq_dir = out_dir / seq.name
        seq_dir.mkdir(parents=True, exist_ok=True)
        for frame in seq:
            result = apply_aba(frame, threshold)
            save_frame(to_array(result.r0), seq_dir / f"{frame.index:06d}.png")
            print(f"{seq.name}/{frame.index:06d}: v={float(result.v):.6f} gamma={float(result.gamma):.6f}")
    _write_manifest(out_dir, "aba", cfg, cdf_threshold=threshold, input=str(args.in_dir))
    return 0


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    try:
        h, w = (int(p) for p in args.size.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--size expects HxW, got '{args.size}'") from exc
    low, truth = synth_sequence(args.kind, args.frames, args.scale, args.sigma, cfg.seed, size=(h, w))
    out_dir = Path(args.out)
    save_sequence(low, out_dir / "low" / low.name)
    save_sequence(truth, out_dir / "truth" / truth.name)
    _write_manifest(
        out_dir, "synth", cfg,
        kind=args.kind, frames=args.frames, scale=args.scale,
        sigma=args.sigma, size=[h, w],
    )
    print(f"wrote {len(low)} frames to {out_dir}/low/{low.name} and {out_dir}/truth/{truth.name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempretinex",
        description="Unsupervised low-light video enhancement with temporal feedback.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train enhancement nets on low-light sequences")
    p.add_argument("--data", action="append", required=True, help="dataset root (repeatable)")
    p.add_argument("--data2", default=None, help="additional dataset root")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--steps", type=int, required=True, help="number of optimizer steps")
    p.add_argument("--per-video", action="store_true", help="adapt a separate model per sequence")
    p.add_argument("--config", default=None, help="config file (key = value lines)")
    p.add_argument("--seed", type=int, default=None)
    _add_flow_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance sequences with a trained checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file (.tpx)")
    p.add_argument("--in", dest="in_dir", required=True, help="input sequence directory or root")
    p.add_argument("--out", required=True, help="output root")
    p.add_argument("--offline", action="store_true", help="bidirectional (reverse) inference")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_flow_flags(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predictions root")
    p.add_argument("--gt", required=True, help="ground-truth root")
    p.add_argument("--hm", action="store_true", help="also report the histogram-matched protocol")
    p.add_argument("--mabd-pairwise", action="store_true",
                   help="add flow-aligned pairwise brightness continuity")
    p.add_argument("--ckpt", dest="flow_ckpt_alias", default=None,
                   help="alias for --flow-ckpt (pairwise alignment)")
    p.add_argument("--out", default=".", help="where to write eval_report.{csv,json}")
    p.add_argument("--workers", type=int, default=1, help="parallel workers across sequences")
    p.add_argument("--config", default=None)
    _add_flow_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("aba", help="run adaptive brightness adjustment standalone")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cdf-threshold", type=float, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_aba)

    p = sub.add_parser("synth", help="generate synthetic low/truth sequence pairs")
    p.add_argument("--kind", choices=("static", "pan", "occlusion"), required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", default="64x64", help="frame size as HxW")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "flow_ckpt_alias", None) and not args.flow_ckpt:
        args.flow_ckpt = args.flow_ckpt_alias
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TempRetinexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
