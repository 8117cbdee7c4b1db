"""Inference-time score fusion and rank-based retrieval metrics.

During evaluation only the two branch similarities exist; the mining and
coherence modules are inactive. Videos are ranked per query by the fused
score with lexicographic video-id tie-breaking, and recall is reported at
k in {1, 5, 10, 100} as percentages plus their sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .featurepack import FeaturePack
from .losses import cosine_matrix

RECALL_KS = (1, 5, 10, 100)


@dataclass
class RetrievalResult:
    query_id: str
    target_video_id: str
    ranked_video_ids: list[str]
    scores: list[float]
    rank_of_target: int  # 1-based


@dataclass
class MetricReport:
    """Recall percentages (0..100) and their sum."""

    recalls: dict[int, float]
    sum_r: float
    num_queries: int

    def to_dict(self) -> dict:
        out = {f"R@{k}": self.recalls[k] for k in RECALL_KS}
        out["SumR"] = self.sum_r
        out["num_queries"] = self.num_queries
        return out


def fused_similarity(s_m, s_v, alpha: float):
    """Weighted fusion ``alpha * S_m + (1 - alpha) * S_v``."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * s_m + (1.0 - alpha) * s_v


def metrics_from_scores(
    scores: np.ndarray,
    video_ids: list[str],
    target_ids: list[str],
    query_ids: list[str] | None = None,
) -> tuple[MetricReport, list[RetrievalResult]]:
    """Rank every video per query and compute R@k / SumR.

    ``scores`` is [num_queries, num_videos]; ties break toward the
    lexicographically smaller video_id. When the corpus is smaller than k,
    R@k counts targets within the full corpus.
    """
    n_q, n_v = scores.shape
    if n_q == 0 or n_v == 0:
        raise ValueError("evaluation needs at least one query and one video")
    if len(video_ids) != n_v or len(target_ids) != n_q:
        raise ValueError("score matrix does not match id lists")
    query_ids = query_ids or [f"q{idx}" for idx in range(n_q)]

    order_ids = np.array(video_ids)
    id_order = np.argsort(order_ids, kind="stable")
    results = []
    ranks = np.empty(n_q, dtype=np.int64)
    for qi in range(n_q):
        # Sort by descending score, then ascending video_id.
        score_order = np.argsort(-scores[qi][id_order], kind="stable")
        order = id_order[score_order]
        ranked = order_ids[order]
        rank = int(np.nonzero(ranked == target_ids[qi])[0][0]) + 1
        ranks[qi] = rank
        results.append(
            RetrievalResult(
                query_id=query_ids[qi],
                target_video_id=target_ids[qi],
                ranked_video_ids=ranked.tolist(),
                scores=scores[qi][order].tolist(),
                rank_of_target=rank,
            )
        )
    recalls = {k: float((ranks <= k).mean() * 100.0) for k in RECALL_KS}
    report = MetricReport(recalls, float(sum(recalls.values())), n_q)
    return report, results


@torch.no_grad()
def score_pack(model, pack: FeaturePack, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Branch similarity matrices (S_m, S_v) of shape [num_queries, num_videos]."""
    from .trainer import collate_frames, collate_words  # local to avoid a cycle

    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype

    v_list, m_list = [], []
    for start in range(0, pack.num_videos, batch_size):
        chunk = pack.videos[start : start + batch_size]
        frames, fmask = collate_frames([rec.frames for rec in chunk], device, dtype)
        _, v, V_m = model.video(frames, fmask)
        v_list.append(v)
        m_list.append(V_m)
    v_all = torch.cat(v_list)  # [n_v, D]
    m_all = torch.cat(m_list)  # [n_v, T_m, D]

    q_list = []
    for start in range(0, pack.num_queries, batch_size):
        chunk = pack.queries[start : start + batch_size]
        words, wmask = collate_words([rec.words for rec in chunk], device, dtype)
        _, q = model.text(words, wmask)
        q_list.append(q)
    q_all = torch.cat(q_list)  # [n_q, D]

    S_v = cosine_matrix(q_all, v_all)  # [n_q, n_v]
    n_v, T_m, D = m_all.shape
    S_moments = cosine_matrix(q_all, m_all.reshape(n_v * T_m, D))
    S_m = S_moments.reshape(-1, n_v, T_m).max(dim=2).values

    if was_training:
        model.train()
    return S_m.cpu().numpy(), S_v.cpu().numpy()


def evaluate(
    model, pack: FeaturePack, alpha: float, batch_size: int = 64
) -> tuple[MetricReport, list[RetrievalResult]]:
    """Score a pack with fused similarities and report rank metrics."""
    if pack.num_videos == 0 or pack.num_queries == 0:
        raise ValueError("evaluation needs a nonempty corpus and query set")
    S_m, S_v = score_pack(model, pack, batch_size)
    fused = fused_similarity(S_m, S_v, alpha)
    video_ids = [rec.video_id for rec in pack.videos]
    target_ids = [pack.pairing[rec.query_id][0] for rec in pack.queries]
    query_ids = [rec.query_id for rec in pack.queries]
    return metrics_from_scores(fused, video_ids, target_ids, query_ids)
