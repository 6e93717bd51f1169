"""From boundary probabilities to final detections: candidate pairing,
score fusion with the confidence map, Soft-NMS, multi-model ensembling,
and class assignment from video-level classifier scores.

All functions are pure; per-video processing shares no mutable state and
tie-breaks are by input index, so outputs are deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .config import PostprocessConfig
from .evaluation import iou
from .proposal_net import BMConfidenceMap, BoundaryProbabilityPair
from .records import Detection, Proposal, VideoClassScores


def _candidate_indices(probs: np.ndarray) -> list[int]:
    """Indices that are strict interior local maxima or exceed half the
    global maximum."""
    n = len(probs)
    threshold = 0.5 * probs.max()
    out = []
    for t in range(n):
        local_max = 0 < t < n - 1 and probs[t] > probs[t - 1] and probs[t] > probs[t + 1]
        if local_max or probs[t] > threshold:
            out.append(t)
    return out


def generate_candidates(probs: BoundaryProbabilityPair,
                        d_max: int) -> list[tuple[int, int, float, float]]:
    """All (s_idx, e_idx, p_start, p_end) with a candidate start before a
    candidate end and duration at most d_max cells."""
    starts = _candidate_indices(probs.start_probs)
    ends = _candidate_indices(probs.end_probs)
    out = []
    for s in starts:
        for e in ends:
            if s < e <= s + d_max:
                out.append((s, e, float(probs.start_probs[s]),
                            float(probs.end_probs[e])))
    return out


def fuse_scores(candidates: list[tuple[int, int, float, float]],
                conf_map: BMConfidenceMap, duration: float,
                provenance: str = "") -> list[Proposal]:
    """score = p_start * p_end * cls_conf * reg_conf at cell
    (d = e-s-1, t = s); grid indices convert to seconds via duration."""
    d_max, t_scale = conf_map.cls_conf.shape
    delta = duration / t_scale
    out = []
    for s_idx, e_idx, p_start, p_end in candidates:
        d = e_idx - s_idx - 1
        cls_c, reg_c = conf_map.lookup(d, s_idx)
        score = p_start * p_end * cls_c * reg_c
        out.append(Proposal(s_idx * delta, e_idx * delta, score, provenance))
    return out


def soft_nms(proposals: list[Proposal], sigma: float = 0.4,
             keep_top: int = 100, method: str = "gaussian",
             linear_thr: float = 0.3) -> list[Proposal]:
    """Iteratively freeze the highest-scored proposal and decay the rest:
    gaussian decay exp(-iou^2 / sigma), or (1 - iou) when iou exceeds
    linear_thr for the linear method.  Returns at most keep_top proposals
    in selection order with their decayed scores; ties break by input
    index; input list is not mutated."""
    if method not in ("gaussian", "linear"):
        raise ValueError(f"unknown soft-nms method {method!r}")
    if method == "gaussian" and sigma <= 0:
        raise ValueError("gaussian soft-nms needs sigma > 0")
    if method == "linear" and not 0 <= linear_thr <= 1:
        raise ValueError("linear_thr must lie in [0, 1]")

    remaining = [[p.score, i, p] for i, p in enumerate(proposals)]
    selected: list[Proposal] = []
    while remaining and len(selected) < keep_top:
        best = max(remaining, key=lambda r: (r[0], -r[1]))
        remaining.remove(best)
        score, _, p = best
        selected.append(Proposal(p.t_start, p.t_end, score, p.provenance))
        for r in remaining:
            overlap = iou((p.t_start, p.t_end), (r[2].t_start, r[2].t_end))
            if method == "gaussian":
                r[0] *= math.exp(-(overlap * overlap) / sigma)
            elif overlap > linear_thr:
                r[0] *= 1.0 - overlap
    return selected


def _nms_with_config(proposals: list[Proposal], cfg: PostprocessConfig) -> list[Proposal]:
    return soft_nms(proposals, sigma=cfg.sigma, keep_top=cfg.keep_top,
                    method=cfg.nms_method, linear_thr=cfg.linear_thr)


def ensemble(result_sets: list[tuple[float, dict[str, list[Proposal]]]],
             cfg: PostprocessConfig | None = None) -> dict[str, list[Proposal]]:
    """Weighted fusion of several per-video proposal sets followed by
    Soft-NMS.  Weights are normalized by their maximum so relative
    weighting is preserved while fused scores stay within [0, 1]."""
    if not result_sets:
        raise ValueError("ensemble needs at least one result set")
    if any(w <= 0 for w, _ in result_sets):
        raise ValueError("ensemble weights must be positive")
    cfg = cfg or PostprocessConfig()
    w_max = max(w for w, _ in result_sets)

    videos = sorted({vid for _, results in result_sets for vid in results})
    fused: dict[str, list[Proposal]] = {}
    for vid in videos:
        pool = [Proposal(p.t_start, p.t_end, p.score * w / w_max, p.provenance)
                for w, results in result_sets
                for p in results.get(vid, [])]
        fused[vid] = _nms_with_config(pool, cfg)
    return fused


def assign_classes(proposals: list[Proposal], cls: VideoClassScores,
                   top_k: int) -> list[Detection]:
    """One detection per (proposal, top-k class) with multiplicative score."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    ranked = cls.top_k(top_k)
    return [Detection(p, label, p.score * class_score)
            for p in proposals
            for label, class_score in ranked]
