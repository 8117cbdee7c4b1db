"""Command-line surface: data generation, training, evaluation, diagnostics."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import featurepack as fp
from . import ice as ice_mod
from .config import ExperimentConfig, load_config, save_config
from .evaluation import RECALL_KS, evaluate
from .losses import cosine_matrix
from .tcp import group_labels
from .trainer import (
    collate_frames,
    collate_words,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
    write_history_csv,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prvr",
        description="Partially relevant video retrieval over precomputed feature packs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic train/val/test packs")
    p.add_argument("--out", required=True, help="output directory (gets train/ val/ test/)")
    p.add_argument("--num-concepts", type=int, default=32)
    p.add_argument("--num-videos", type=int, default=200)
    p.add_argument("--moments-per-video", type=int, default=4)
    p.add_argument("--frames-per-moment", type=int, default=8)
    p.add_argument("--queries-per-video", type=int, default=2)
    p.add_argument("--noise-scale", type=float, default=0.05)
    p.add_argument("--shared-concept-rate", type=float, default=0.3)
    p.add_argument("--redundant-moment-rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-dim-video", type=int, default=64)
    p.add_argument("--feature-dim-text", type=int, default=64)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a pack directory")
    p.add_argument("--data", required=True, help="directory containing train/ and val/ packs")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--config", help="JSON config with flat dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a pack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="pack directory (e.g. .../test)")
    p.add_argument("--alpha", type=float, default=None, help="fusion weight override")
    p.add_argument("--json-out", help="write the metric report to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the 8-row module on/off matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--config", help="JSON config with flat dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seeds", type=int, nargs="*", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("mine-pairs", help="dump mined pseudo-pairs per batch as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_mine_pairs)

    p = sub.add_parser("predict-order", help="group-label accuracy on unshuffled sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_predict_order)

    p = sub.add_parser("sim-curve", help="per-moment cosine series for one query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--video-id", help="defaults to the query's paired video")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sim_curve)

    return parser


def cmd_gen_data(args) -> int:
    spec = fp.SyntheticSpec(
        num_concepts=args.num_concepts,
        num_videos=args.num_videos,
        moments_per_video=args.moments_per_video,
        frames_per_moment=args.frames_per_moment,
        queries_per_video=args.queries_per_video,
        noise_scale=args.noise_scale,
        shared_concept_rate=args.shared_concept_rate,
        redundant_moment_rate=args.redundant_moment_rate,
        seed=args.seed,
        feature_dim_video=args.feature_dim_video,
        feature_dim_text=args.feature_dim_text,
    )
    packs = fp.generate_synthetic(spec)
    out = Path(args.out)
    for pack in packs:
        fp.write_pack(pack, out / pack.meta.split)
        print(f"wrote {pack.meta.split}: {pack.num_videos} videos, {pack.num_queries} queries")
    return 0


def _load_split(data_dir: str, split: str) -> fp.FeaturePack:
    return fp.read_pack(Path(data_dir) / split)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    train_pack = _load_split(args.data, "train")
    val_pack = _load_split(args.data, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(train_pack, val_pack, cfg, log_path=out / "metrics.csv")
    save_checkpoint(result, out)
    save_config(cfg, out / "config.json")
    print(
        f"best epoch {result.best_epoch}: val SumR {result.best_sum_r:.2f} "
        f"({len(result.history)} epochs run, {result.ice_violations} ICE mask violations)"
    )
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    pack = fp.read_pack(args.data)
    alpha = cfg.train.alpha if args.alpha is None else args.alpha
    report, _ = evaluate(model, pack, alpha)
    payload = report.to_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    print(f"{'metric':<8} value")
    for k in RECALL_KS:
        print(f"R@{k:<6} {report.recalls[k]:.2f}")
    print(f"{'SumR':<8} {report.sum_r:.2f}")
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    train_pack = _load_split(args.data, "train")
    val_pack = _load_split(args.data, "val")
    test_pack = _load_split(args.data, "test")
    rows = run_ablation(train_pack, val_pack, test_pack, cfg, args.seeds)
    fieldnames = ["ice", "irm", "tcp", "seeds"] + [f"R@{k}" for k in RECALL_KS] + ["SumR"]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    header = "ICE  IRM  TCP  " + "  ".join(f"R@{k}" for k in RECALL_KS) + "  SumR"
    print(header)
    for row in rows:
        marks = "  ".join("on " if row[m] else "off" for m in ("ice", "irm", "tcp"))
        vals = "  ".join(f"{row[f'R@{k}']:.1f}" for k in RECALL_KS)
        print(f"{marks}  {vals}  {row['SumR']:.1f}")
    return 0


def cmd_mine_pairs(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    pack = fp.read_pack(args.data)
    videos = pack.video_index()
    queries = pack.query_index()
    pairs = [(rec.query_id, pack.pairing[rec.query_id][0]) for rec in pack.queries]
    dtype = next(model.parameters()).dtype

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch", "moment_row", "text_col", "similarity"])
        with torch.no_grad():
            for bi, start in enumerate(range(0, len(pairs), args.batch_size)):
                chunk = pairs[start : start + args.batch_size]
                if len(chunk) < 2:
                    continue
                words, wmask = collate_words(
                    [queries[qid].words for qid, _ in chunk], "cpu", dtype
                )
                frames, fmask = collate_frames(
                    [videos[vid].frames for _, vid in chunk], "cpu", dtype
                )
                batch = model.encode_batch(words, wmask, frames, fmask)
                _, mined, _ = ice_mod.mine_batch(
                    batch.V_m, batch.q, cfg.loss, cfg.train.ice_threshold
                )
                for row, col, sim in mined.pairs:
                    writer.writerow([bi, row, col, f"{sim:.6f}"])
    print(f"wrote {args.out}")
    return 0


def cmd_predict_order(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    pack = fp.read_pack(args.data)
    g = cfg.tcp.g
    dtype = next(model.parameters()).dtype
    correct = {"video": 0, "moment": 0}
    counted = {"video": 0, "moment": 0}
    with torch.no_grad():
        for start in range(0, pack.num_videos, 64):
            chunk = pack.videos[start : start + 64]
            frames, fmask = collate_frames([rec.frames for rec in chunk], "cpu", dtype)
            V_f, _, V_m = model.video(frames, fmask)
            for i, rec in enumerate(chunk):
                T = rec.frames.shape[0]
                if g <= T:
                    labels = torch.as_tensor(group_labels(T, g))
                    pred = model.video_group_cls(V_f[i, :T]).argmax(dim=-1) + 1
                    correct["video"] += int((pred == labels).sum())
                    counted["video"] += T
                T_m = V_m.shape[1]
                if g <= T_m:
                    labels = torch.as_tensor(group_labels(T_m, g))
                    pred = model.moment_group_cls(V_m[i]).argmax(dim=-1) + 1
                    correct["moment"] += int((pred == labels).sum())
                    counted["moment"] += T_m
    payload = {
        branch: (correct[branch] / counted[branch] if counted[branch] else None)
        for branch in ("video", "moment")
    }
    print(json.dumps({"group_accuracy": payload, "g": g}, indent=2, sort_keys=True))
    return 0


def cmd_sim_curve(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    pack = fp.read_pack(args.data)
    queries = pack.query_index()
    if args.query_id not in queries:
        print(f"unknown query_id {args.query_id!r}", file=sys.stderr)
        return 2
    video_id = args.video_id or pack.pairing[args.query_id][0]
    videos = pack.video_index()
    if video_id not in videos:
        print(f"unknown video_id {video_id!r}", file=sys.stderr)
        return 2
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        words = torch.as_tensor(queries[args.query_id].words, dtype=dtype)
        _, q = model.text(words)
        frames = torch.as_tensor(videos[video_id].frames, dtype=dtype)
        _, _, V_m = model.video(frames)
        sims = cosine_matrix(V_m, q.unsqueeze(0)).squeeze(1)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["moment_index", "cosine"])
        for idx, val in enumerate(sims.tolist()):
            writer.writerow([idx, f"{val:.6f}"])
    print(f"wrote {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (fp.PackError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
