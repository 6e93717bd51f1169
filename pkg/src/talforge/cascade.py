"""Cascade boundary refinement: a fixed stack of regression stages, each
re-sampling features around the current proposal and emitting relative
boundary offsets plus a confidence multiplier.

Stage heads are two-layer MLPs whose output layer initializes to zero, so
an untrained cascade is exactly the identity on proposal geometry and
scores.  Offsets are relative to proposal length; the score update is
score * sigmoid(c) * 2 clamped to [0, 1], a no-op at zero logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .config import CascadeConfig, TrainConfig
from .records import Proposal
from .tensor import (Tensor, absolute, backward, clip, log, matmul, relu,
                     reshape, sigmoid, tensor_sum)
from .layers import linear_params

LOG_EPS = 1e-12


@dataclass
class StageParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class CascadeTarget:
    ds: float
    de: float
    iou: float
    positive: bool


class CascadeNet:
    def __init__(self, cfg: CascadeConfig, encoder_width: int,
                 rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.encoder_width = encoder_width
        feat_dim = cfg.n_bins * encoder_width
        self.stages: list[StageParams] = []
        if params is not None:
            for k in range(cfg.n_stages):
                t = {name: Tensor(params[f"stage{k}.{name}"].copy(), requires_grad=True)
                     for name in ("w1", "b1", "w2", "b2")}
                self.stages.append(StageParams(**t))
            return
        if rng is None:
            raise ValueError("either an rng or a parameter dict is required")
        for _ in range(cfg.n_stages):
            w1, b1 = linear_params(rng, feat_dim, cfg.hidden)
            w2, b2 = linear_params(rng, cfg.hidden, 3, zero=True)
            self.stages.append(StageParams(w1, b1, w2, b2))

    def tensors(self) -> dict[str, Tensor]:
        return {f"stage{k}.{name}": t
                for k, stage in enumerate(self.stages)
                for name, t in stage.tensors().items()}

    @classmethod
    def zero_initialized(cls, cfg: CascadeConfig, encoder_width: int) -> "CascadeNet":
        feat_dim = cfg.n_bins * encoder_width
        net = cls.__new__(cls)
        net.cfg = cfg
        net.encoder_width = encoder_width
        net.stages = [StageParams(Tensor(np.zeros((feat_dim, cfg.hidden)), requires_grad=True),
                                  Tensor(np.zeros(cfg.hidden), requires_grad=True),
                                  Tensor(np.zeros((cfg.hidden, 3)), requires_grad=True),
                                  Tensor(np.zeros(3), requires_grad=True))
                      for _ in range(cfg.n_stages)]
        return net

    @classmethod
    def from_params(cls, cfg: CascadeConfig, encoder_width: int,
                    params: dict[str, np.ndarray]) -> "CascadeNet":
        return cls(cfg, encoder_width, params=params)


# ----------------------------------------------------------------------
# feature sampling

def _grid_positions(p: Proposal, context_ratio: float, n_bins: int,
                    duration: float, temporal_scale: int) -> np.ndarray:
    if p.t_end <= p.t_start:
        raise ValueError(f"zero-length proposal [{p.t_start}, {p.t_end}]")
    length = p.t_end - p.t_start
    lo = p.t_start - context_ratio * length
    hi = p.t_end + context_ratio * length
    seconds = lo + (hi - lo) * np.arange(n_bins) / (n_bins - 1)
    grid = seconds * temporal_scale / duration
    return np.clip(grid, 0.0, temporal_scale - 1.0)


def _interp_weights(positions: np.ndarray, temporal_scale: int) -> np.ndarray:
    """Rows of two-point interpolation weights over grid indices."""
    i0 = np.minimum(np.floor(positions).astype(np.int64), temporal_scale - 1)
    frac = positions - i0
    i1 = np.minimum(i0 + 1, temporal_scale - 1)
    rows = np.arange(len(positions))
    w = np.zeros((len(positions), temporal_scale))
    np.add.at(w, (rows, i0), 1.0 - frac)
    np.add.at(w, (rows, i1), frac)
    return w


def sample_proposal_feature(encoded: Tensor | np.ndarray, p: Proposal,
                            context_ratio: float, n_bins: int,
                            duration: float) -> Tensor:
    """Interpolate encoded rows at n_bins uniform positions across the
    context-extended proposal; returns a flat [n_bins * E] tensor,
    differentiable w.r.t. the encoded features."""
    enc = encoded if isinstance(encoded, Tensor) else Tensor(encoded)
    t_scale = enc.shape[0]
    pos = _grid_positions(p, context_ratio, n_bins, duration, t_scale)
    weights = Tensor(_interp_weights(pos, t_scale))
    return reshape(matmul(weights, enc), (n_bins * enc.shape[1],))


def batch_proposal_features(encoded: np.ndarray, proposals: list[Proposal],
                            context_ratio: float, n_bins: int,
                            duration: float) -> np.ndarray:
    """[P x n_bins*E] sampled features for a whole proposal list."""
    t_scale, width = encoded.shape
    pos = np.concatenate([
        _grid_positions(p, context_ratio, n_bins, duration, t_scale)
        for p in proposals])
    weights = _interp_weights(pos, t_scale)
    return (weights @ encoded).reshape(len(proposals), n_bins * width)


# ----------------------------------------------------------------------
# refinement

def stage_outputs(stage: StageParams, feats: np.ndarray) -> np.ndarray:
    """Head forward pass on [P x n_bins*E] features -> [P x 3] raw outputs
    (ds, de, confidence logit)."""
    hidden = np.maximum(feats @ stage.w1.data + stage.b1.data, 0.0)
    return hidden @ stage.w2.data + stage.b2.data


def apply_refinement(p: Proposal, ds: float, de: float, c_logit: float,
                     duration: float) -> Proposal:
    """Offset boundaries by (ds, de) * length, clamp into the video, revert
    the geometry if boundaries cross, multiply the score by sigmoid(c)*2."""
    if not (np.isfinite(ds) and np.isfinite(de) and np.isfinite(c_logit)):
        raise ValueError("non-finite refinement head outputs")
    length = p.t_end - p.t_start
    s_new = min(max(p.t_start + ds * length, 0.0), duration)
    e_new = min(max(p.t_end + de * length, 0.0), duration)
    if not s_new < e_new:
        s_new, e_new = p.t_start, p.t_end
    score = min(max(p.score * expit(c_logit) * 2.0, 0.0), 1.0)
    return Proposal(s_new, e_new, score, p.provenance)


def refine_stage(p: Proposal, feat: Tensor, stage: StageParams,
                 duration: float) -> Proposal:
    out = stage_outputs(stage, feat.data.reshape(1, -1))[0]
    return apply_refinement(p, out[0], out[1], out[2], duration)


def cascade_refine(proposals: list[Proposal], encoded: np.ndarray,
                   net: CascadeNet, duration: float) -> list[Proposal]:
    """Apply every stage in order, re-sampling features from the previous
    stage's boundaries; preserves list order."""
    current = list(proposals)
    if not current:
        return current
    cfg = net.cfg
    for stage in net.stages:
        feats = batch_proposal_features(encoded, current, cfg.context_ratio,
                                        cfg.n_bins, duration)
        outs = stage_outputs(stage, feats)
        current = [apply_refinement(p, o[0], o[1], o[2], duration)
                   for p, o in zip(current, outs)]
    return current


# ----------------------------------------------------------------------
# training

def _segment_iou(a_start, a_end, b_start, b_end) -> float:
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union if union > 0 else 0.0


def make_cascade_targets(proposals: list[Proposal],
                         instances: list[tuple[str, float, float]],
                         stage_iou_floor: float) -> list[CascadeTarget]:
    """Match each proposal to its best-IoU instance; above the floor the
    target is the offset pair onto that instance, below it only a negative
    confidence label."""
    targets = []
    for p in proposals:
        best_iou, best = 0.0, None
        for _, s, e in instances:
            iou = _segment_iou(p.t_start, p.t_end, s, e)
            if iou > best_iou:
                best_iou, best = iou, (s, e)
        if best is not None and best_iou >= stage_iou_floor:
            length = p.t_end - p.t_start
            targets.append(CascadeTarget((best[0] - p.t_start) / length,
                                         (best[1] - p.t_end) / length,
                                         best_iou, True))
        else:
            targets.append(CascadeTarget(0.0, 0.0, best_iou, False))
    return targets


def _stage_forward_t(stage: StageParams, feats: Tensor) -> Tensor:
    hidden = relu(matmul(feats, stage.w1) + stage.b1)
    return matmul(hidden, stage.w2) + stage.b2


def stage_loss(stage: StageParams, feats: Tensor,
               targets: list[CascadeTarget]) -> Tensor:
    """Smooth-L1 on offsets over positives plus a class-balanced logistic
    confidence loss over all proposals."""
    out = _stage_forward_t(stage, feats)                 # [P, 3]
    pos = np.array([t.positive for t in targets], dtype=bool)
    loss = Tensor(np.zeros(()))

    if pos.any():
        offsets = out[:, 0:2]
        target_arr = np.array([[t.ds, t.de] for t in targets])
        diff = offsets - Tensor(target_arr)
        quad = (np.abs(diff.data) < 1.0).astype(np.float64)
        pos_rows = np.repeat(pos[:, None], 2, axis=1).astype(np.float64)
        smooth = (diff * diff * Tensor(0.5 * quad * pos_rows)
                  + (absolute(diff) - 0.5) * Tensor((1.0 - quad) * pos_rows))
        loss = loss + tensor_sum(smooth) * (1.0 / (2.0 * pos.sum()))

    conf = sigmoid(out[:, 2])
    labels = pos.astype(np.float64)
    loss = loss + _balanced_conf_bce(conf, labels)
    return loss


def _balanced_conf_bce(pred: Tensor, labels: np.ndarray) -> Tensor:
    pos = labels >= 0.5
    neg = ~pos
    p = clip(pred, LOG_EPS, 1.0 - LOG_EPS)
    terms = []
    if pos.any():
        terms.append(tensor_sum(-log(p) * Tensor(pos.astype(np.float64)))
                     * (1.0 / pos.sum()))
    if neg.any():
        terms.append(tensor_sum(-log(1.0 - p) * Tensor(neg.astype(np.float64)))
                     * (1.0 / neg.sum()))
    if not terms:
        return Tensor(np.zeros(()))
    if len(terms) == 1:
        return terms[0]
    return terms[0] * 0.5 + terms[1] * 0.5


@dataclass
class CascadeSample:
    """Per-video training inputs for the cascade."""

    video_id: str
    duration: float
    encoded: np.ndarray                       # [T x E], from the frozen encoder
    proposals: list[Proposal]
    instances: list[tuple[str, float, float]]


def train_cascade(samples: list[CascadeSample], cascade_cfg: CascadeConfig,
                  train_cfg: TrainConfig, encoder_width: int,
                  log_fn=None) -> tuple[CascadeNet, list[list[float]]]:
    """Train stages sequentially; stage k fits the outputs of stages < k.
    Returns the net and per-stage epoch loss logs."""
    if sum(len(s.proposals) for s in samples) == 0:
        raise ValueError("empty proposal pool: nothing to refine")
    rng = np.random.default_rng([train_cfg.seed, 1])
    net = CascadeNet(cascade_cfg, encoder_width, rng)

    current = {s.video_id: list(s.proposals) for s in samples}
    stage_logs: list[list[float]] = []
    for k, stage in enumerate(net.stages):
        floor = cascade_cfg.iou_floors[k]
        params = stage.tensors()
        velocities = {name: np.zeros_like(t.data) for name, t in params.items()}
        log: list[float] = []
        for epoch in range(train_cfg.cascade_epochs):
            order = rng.permutation(len(samples))
            total, count = 0.0, 0
            for idx in order:
                s = samples[idx]
                pool = current[s.video_id]
                if not pool:
                    continue
                feats = batch_proposal_features(
                    s.encoded, pool, cascade_cfg.context_ratio,
                    cascade_cfg.n_bins, s.duration)
                targets = make_cascade_targets(pool, s.instances, floor)
                loss = stage_loss(stage, Tensor(feats), targets)
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(f"cascade stage {k} diverged at epoch {epoch}")
                for t in params.values():
                    t.zero_grad()
                backward(loss)
                for name, t in params.items():
                    v = velocities[name]
                    v *= train_cfg.momentum
                    v -= train_cfg.cascade_lr * t.grad
                    t.data += v
                total += value
                count += 1
            log.append(total / max(1, count))
            if log_fn is not None:
                log_fn(k, epoch, log[-1])
        stage_logs.append(log)

        # Resample geometry through the freshly trained stage for the next one.
        for s in samples:
            pool = current[s.video_id]
            if not pool:
                continue
            feats = batch_proposal_features(s.encoded, pool,
                                            cascade_cfg.context_ratio,
                                            cascade_cfg.n_bins, s.duration)
            outs = stage_outputs(stage, feats)
            current[s.video_id] = [apply_refinement(p, o[0], o[1], o[2], s.duration)
                                   for p, o in zip(pool, outs)]
    return net, stage_logs
