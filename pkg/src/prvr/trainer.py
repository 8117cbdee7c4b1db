"""Training loop: composed objective, early stopping, checkpoints, ablations.

One trainer owns the model parameters and all random streams. Batches are
drawn in a seed-determined order with distinct videos inside a batch, so two
runs with identical config and packs produce identical metric histories in
train32 mode.
"""

from __future__ import annotations

import base64
import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import ice as ice_mod
from .config import ExperimentConfig
from .encoders import EncodedBatch
from .evaluation import RECALL_KS, MetricReport, evaluate
from .featurepack import FeaturePack, PackError
from .irm import irm_loss, redundant_features
from .losses import base_loss, moment_similarities
from .model import PrvrModel
from .tcp import group_labels, shuffle_subset

CHECKPOINT_FORMAT_VERSION = 1

LOSS_COLUMNS = (
    "total",
    "base",
    "trip_v",
    "trip_m",
    "nce_v",
    "nce_m",
    "ice",
    "neg",
    "red",
    "tcp",
)
HISTORY_COLUMNS = (
    ("epoch",)
    + LOSS_COLUMNS
    + tuple(f"R@{k}" for k in RECALL_KS)
    + ("SumR", "ice_pairs", "ice_violations")
)


@dataclass
class TrainResult:
    model: PrvrModel
    config: ExperimentConfig
    history: list[dict]
    best_epoch: int
    best_sum_r: float
    ice_violations: int


def collate_words(arrays: list[np.ndarray], device, dtype) -> tuple[Tensor, Tensor]:
    return _collate(arrays, device, dtype)


def collate_frames(arrays: list[np.ndarray], device, dtype) -> tuple[Tensor, Tensor]:
    return _collate(arrays, device, dtype)


def _collate(arrays: list[np.ndarray], device, dtype) -> tuple[Tensor, Tensor]:
    """Pad variable-length [T_i, D] arrays into [B, T_max, D] plus a validity mask."""
    max_len = max(a.shape[0] for a in arrays)
    dim = arrays[0].shape[1]
    out = torch.zeros(len(arrays), max_len, dim, dtype=dtype, device=device)
    mask = torch.zeros(len(arrays), max_len, dtype=torch.bool, device=device)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = torch.as_tensor(a, dtype=dtype, device=device)
        mask[i, : a.shape[0]] = True
    return out, mask


def make_batches(
    pairs: list[tuple[str, str]], batch_size: int, rng: np.random.Generator
) -> list[list[tuple[str, str]]]:
    """Shuffle (query, video) pairs into batches with distinct videos per batch.

    Batches of fewer than 2 pairs are dropped (no in-batch negatives).
    """
    pending = [pairs[i] for i in rng.permutation(len(pairs))]
    batches: list[list[tuple[str, str]]] = []
    while pending:
        batch: list[tuple[str, str]] = []
        seen: set[str] = set()
        leftover = []
        for qid, vid in pending:
            if len(batch) < batch_size and vid not in seen:
                batch.append((qid, vid))
                seen.add(vid)
            else:
                leftover.append((qid, vid))
        pending = leftover
        if len(batch) >= 2:
            batches.append(batch)
    return batches


def _tcp_branch_loss(
    model: PrvrModel,
    branch: str,
    frames: Tensor,
    frame_mask: Tensor,
    batch: EncodedBatch,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Group-label loss for one branch: shuffle, re-encode in one pass, classify.

    Sequences shorter than g are skipped. Both cross-entropy terms average over
    every valid position of the surviving samples.
    """
    g = cfg.tcp.g
    device = frames.device
    if branch == "video":
        encoded_o = batch.V_f
        lengths = frame_mask.sum(dim=1).tolist() if frame_mask is not None else None
        classifier = model.video_group_cls
        source = frames
    else:
        source = model.video.moment_tokens(frames, frame_mask)
        encoded_o = batch.V_m
        lengths = None
        classifier = model.moment_group_cls
    if lengths is None:
        lengths = [source.shape[1]] * source.shape[0]

    rows, keep, y_o_list, y_s_list = [], [], [], []
    for i, T in enumerate(lengths):
        T = int(T)
        if g > T:
            continue
        y_o = group_labels(T, g)
        row, y_s, _ = shuffle_subset(source[i, :T], y_o, cfg.tcp.shuffle_fraction, rng)
        rows.append(row)
        keep.append(i)
        y_o_list.append(y_o)
        y_s_list.append(y_s)
    if not keep:
        return frames.new_zeros(())

    t_shuf = max(r.shape[0] for r in rows)
    padded = source.new_zeros(len(keep), t_shuf, source.shape[-1])
    shuf_mask = torch.zeros(len(keep), t_shuf, dtype=torch.bool, device=device)
    lab_o = torch.full((len(keep), encoded_o.shape[1]), -1, dtype=torch.long, device=device)
    lab_s = torch.full((len(keep), t_shuf), -1, dtype=torch.long, device=device)
    for bi, (row, y_o, y_s) in enumerate(zip(rows, y_o_list, y_s_list)):
        t = row.shape[0]
        padded[bi, :t] = row
        shuf_mask[bi, :t] = True
        lab_o[bi, :t] = torch.as_tensor(y_o - 1, device=device)
        lab_s[bi, :t] = torch.as_tensor(y_s - 1, device=device)

    if branch == "video":
        enc_s, _ = model.video.encode_frames(padded, shuf_mask)
    else:
        enc_s = model.video.encode_moments(padded)

    sel = torch.as_tensor(keep, device=device)
    logits_o = classifier(encoded_o[sel])
    logits_s = classifier(enc_s)
    ce_o = torch.nn.functional.cross_entropy(
        logits_o.reshape(-1, g), lab_o.reshape(-1), ignore_index=-1
    )
    ce_s = torch.nn.functional.cross_entropy(
        logits_s.reshape(-1, g), lab_s.reshape(-1), ignore_index=-1
    )
    return ce_o + ce_s


def total_loss(
    model: PrvrModel,
    words: Tensor,
    word_mask: Tensor,
    frames: Tensor,
    frame_mask: Tensor,
    cfg: ExperimentConfig,
    tcp_rng: np.random.Generator,
    epoch: int = 0,
) -> tuple[Tensor, dict[str, float], int, int]:
    """Composed objective plus a per-component log.

    Returns (loss, components, mined_pair_count, ownership_violations).
    """
    batch = model.encode_batch(words, word_mask, frames, frame_mask)
    n = batch.size
    components: dict[str, Tensor] = {}

    base = base_loss(batch, cfg.loss)
    components.update(base)
    loss = base["base"]

    zero = loss.new_zeros(())
    components["ice"] = zero
    components["neg"] = zero
    components["red"] = zero
    components["tcp"] = zero
    pair_count, violations = 0, 0

    if cfg.train.ice and epoch >= cfg.train.ice_warmup_epochs:
        ice_parts, pairs, violations = ice_mod.mine_batch(
            batch.V_m, batch.q, cfg.loss, cfg.train.ice_threshold
        )
        pair_count = pairs.n_c
        components["ice"] = ice_parts["total"]
        loss = loss + cfg.train.w_ice * ice_parts["total"]

    if cfg.train.irm:
        S_full, S_m, key_idx = moment_similarities(batch.V_m, batch.q)
        diag_keys = key_idx.diagonal()  # key moment of each (video, own query) pair
        m_k = batch.V_m[torch.arange(n), diag_keys]
        r_v, r_q = redundant_features(
            batch.v, m_k, batch.q, model.redundancy, cfg.irm.stop_gradient
        )
        parts = irm_loss(S_m, batch.q, r_v, r_q, cfg.loss, cfg.irm)
        components["neg"] = parts["neg"]
        components["red"] = parts["red"]
        loss = loss + cfg.train.w_irm * parts["total"]

    if cfg.train.tcp:
        tcp_total = loss.new_zeros(())
        for branch in cfg.tcp.apply_to:
            tcp_total = tcp_total + _tcp_branch_loss(
                model, branch, frames, frame_mask, batch, cfg, tcp_rng
            )
        components["tcp"] = tcp_total
        loss = loss + cfg.train.w_tcp * tcp_total

    components["total"] = loss
    log = {name: float(val.detach()) for name, val in components.items()}
    for name, val in log.items():
        if not math.isfinite(val):
            raise RuntimeError(f"non-finite loss component {name!r}: {val}")
    return loss, log, pair_count, violations


def _pack_pairs(pack: FeaturePack) -> list[tuple[str, str]]:
    return [(rec.query_id, pack.pairing[rec.query_id][0]) for rec in pack.queries]


def train(
    train_pack: FeaturePack,
    val_pack: FeaturePack,
    cfg: ExperimentConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Optimize the model with early stopping on validation SumR.

    Returns the best checkpointed state (the model is restored to it) along
    with the per-epoch metric history.
    """
    cfg = copy.deepcopy(cfg)
    cfg.validate()
    torch.manual_seed(cfg.train.seed)
    dtype = torch.float64 if cfg.train.precision_mode == "check64" else torch.float32

    model = PrvrModel(
        cfg.encoder,
        train_pack.meta.feature_dim_video,
        train_pack.meta.feature_dim_text,
        num_groups=cfg.tcp.g,
        irm_cfg=cfg.irm,
    ).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.learning_rate)

    batch_rng = np.random.default_rng(np.random.SeedSequence((cfg.train.seed, 1)))
    tcp_rng = np.random.default_rng(np.random.SeedSequence((cfg.train.seed, 2)))
    pairs = _pack_pairs(train_pack)
    videos = train_pack.video_index()
    queries = train_pack.query_index()
    device = torch.device("cpu")

    history: list[dict] = []
    best_state = copy.deepcopy(model.state_dict())
    best_sum_r = -math.inf
    best_epoch = -1
    stale = 0
    total_violations = 0

    for epoch in range(cfg.train.max_epochs):
        model.train()
        sums = {name: 0.0 for name in LOSS_COLUMNS}
        pair_total, steps = 0, 0
        for batch_pairs in make_batches(pairs, cfg.train.batch_size, batch_rng):
            words, wmask = collate_words(
                [queries[qid].words for qid, _ in batch_pairs], device, dtype
            )
            frames, fmask = collate_frames(
                [videos[vid].frames for _, vid in batch_pairs], device, dtype
            )
            loss, log, n_pairs, violations = total_loss(
                model, words, wmask, frames, fmask, cfg, tcp_rng, epoch
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for name in LOSS_COLUMNS:
                sums[name] += log[name]
            pair_total += n_pairs
            total_violations += violations
            steps += 1

        report, _ = evaluate(model, val_pack, cfg.train.alpha)
        row = {"epoch": epoch}
        row.update({name: sums[name] / max(steps, 1) for name in LOSS_COLUMNS})
        row.update({f"R@{k}": report.recalls[k] for k in RECALL_KS})
        row["SumR"] = report.sum_r
        row["ice_pairs"] = pair_total
        row["ice_violations"] = total_violations
        history.append(row)

        if report.sum_r > best_sum_r:
            best_sum_r = report.sum_r
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.train.early_stop_patience > 0:
                break

    model.load_state_dict(best_state)
    if log_path is not None:
        write_history_csv(history, log_path)
    return TrainResult(model, cfg, history, best_epoch, best_sum_r, total_violations)


def write_history_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(HISTORY_COLUMNS))
        writer.writeheader()
        for row in history:
            writer.writerow({key: repr(row[key]) if isinstance(row[key], float) else row[key] for key in HISTORY_COLUMNS})


# ---------------------------------------------------------------------------
# Checkpoints (same raw-array container rules as feature packs)


def save_checkpoint(result: TrainResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "params").mkdir(exist_ok=True)
    model = result.model
    entries = []
    for idx, (name, tensor) in enumerate(sorted(model.state_dict().items())):
        rel = f"params/{idx:04d}.f32"
        tensor.detach().cpu().numpy().astype("<f4").tofile(out / rel)
        entries.append(
            {"id": name, "path": rel, "shape": list(tensor.shape), "dtype": "f32le"}
        )
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": result.config.to_flat(),
        "feature_dim_video": model.feature_dim_video,
        "feature_dim_text": model.feature_dim_text,
        "num_groups": model.num_groups,
        "epoch": result.best_epoch,
        "best_val_sum_r": result.best_sum_r,
        "parameter_count": model.count_parameters(),
        "rng_state": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        "params": entries,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir: str | Path) -> tuple[PrvrModel, ExperimentConfig, dict]:
    root = Path(ckpt_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise PackError(f"no manifest.json in {root}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise PackError(f"unsupported checkpoint version {manifest.get('format_version')!r}")

    cfg = ExperimentConfig.from_flat(manifest["config"])
    model = PrvrModel(
        cfg.encoder,
        manifest["feature_dim_video"],
        manifest["feature_dim_text"],
        num_groups=manifest["num_groups"],
        irm_cfg=cfg.irm,
    )
    state = {}
    for entry in manifest["params"]:
        path = root / entry["path"]
        if not path.is_file():
            raise PackError(f"missing parameter file {path}")
        shape = tuple(entry["shape"])
        raw = path.read_bytes()
        expected = 4 * int(np.prod(shape)) if shape else 4
        if len(raw) != expected:
            raise PackError(
                f"{path}: byte count {len(raw)} does not match shape {shape} ({expected} bytes)"
            )
        state[entry["id"]] = torch.from_numpy(
            np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        )
    model.load_state_dict(state)
    model.eval()
    return model, cfg, manifest


# ---------------------------------------------------------------------------
# Ablation matrix


ABLATION_ROWS = [
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (False, True, True),
    (True, False, True),
    (True, True, False),
    (True, True, True),
]


def run_ablation(
    train_pack: FeaturePack,
    val_pack: FeaturePack,
    test_pack: FeaturePack,
    cfg: ExperimentConfig,
    seeds: list[int] | None = None,
) -> list[dict]:
    """Train the eight module on/off combinations and report test metrics.

    Each row averages metrics over ``seeds`` (default: the configured seed).
    """
    seeds = seeds or [cfg.train.seed]
    rows = []
    for ice_on, irm_on, tcp_on in ABLATION_ROWS:
        per_seed = []
        for seed in seeds:
            run_cfg = copy.deepcopy(cfg)
            run_cfg.train.ice = ice_on
            run_cfg.train.irm = irm_on
            run_cfg.train.tcp = tcp_on
            run_cfg.train.seed = seed
            result = train(train_pack, val_pack, run_cfg)
            report, _ = evaluate(result.model, test_pack, run_cfg.train.alpha)
            per_seed.append(report)
        row = {
            "ice": ice_on,
            "irm": irm_on,
            "tcp": tcp_on,
            "seeds": len(seeds),
        }
        for k in RECALL_KS:
            row[f"R@{k}"] = float(np.mean([r.recalls[k] for r in per_seed]))
        row["SumR"] = float(np.mean([r.sum_r for r in per_seed]))
        rows.append(row)
    return rows
