"""Proposal subnet: boundary probability estimation plus the
boundary-matching confidence map, with label construction and joint
training.

The map cell at (d, t) scores the candidate segment [t, t+d+1] in grid
units; cells with t+d+1 > T fall outside the video and are masked invalid
everywhere (losses, lookups, dumps).  Each valid cell is described by
n_sample feature vectors read off the encoded sequence by two-point
linear interpolation; the interpolation weights for all cells form one
sparse [D_max*T*n_sample x T] matrix so the whole gather is a single
matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, TrainConfig
from .layers import (BiLstmParams, Conv1dParams, bilstm, conv1d, linear,
                     linear_params)
from .records import AnnotationSet, FeatureSequence
from .tensor import (Tensor, backward, clip, concat, log, matmul, relu,
                     reshape, sigmoid, tensor_sum, transpose)

LOG_EPS = 1e-12


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class BoundaryProbabilityPair:
    """Per-cell probabilities that an action starts / ends there."""

    start_probs: np.ndarray
    end_probs: np.ndarray

    def __post_init__(self):
        for name, arr in (("start_probs", self.start_probs), ("end_probs", self.end_probs)):
            if arr.ndim != 1 or len(arr) != len(self.start_probs):
                raise ValueError(f"{name} must be a length-T vector")
            if arr.min() < 0 or arr.max() > 1:
                raise ValueError(f"{name} has entries outside [0, 1]")


@dataclass
class BMConfidenceMap:
    """Two-channel map over (duration d, start t); invalid cells are zeroed
    and flagged in `valid`."""

    cls_conf: np.ndarray
    reg_conf: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if not (self.cls_conf.shape == self.reg_conf.shape == self.valid.shape):
            raise ValueError("map channels and validity mask must share a shape")

    def lookup(self, d: int, t: int) -> tuple[float, float]:
        if not self.valid[d, t]:
            raise ValueError(f"invalid cell lookup at (d={d}, t={t})")
        return float(self.cls_conf[d, t]), float(self.reg_conf[d, t])


@dataclass
class SamplingMask:
    """Interpolation weights realizing the map gather.

    Row ((d*T + t)*n_sample + n) holds the weights for sample point n of
    cell (d, t); valid rows are a partition of unity, invalid rows zero.
    """

    weights: np.ndarray
    valid: np.ndarray
    temporal_scale: int
    d_max: int
    n_sample: int


def valid_cells(temporal_scale: int, d_max: int) -> np.ndarray:
    dd = np.arange(d_max)[:, None]
    tt = np.arange(temporal_scale)[None, :]
    return (tt + dd + 1) <= temporal_scale


def build_sampling_mask(temporal_scale: int, d_max: int, n_sample: int) -> SamplingMask:
    t_scale = temporal_scale
    if not 1 <= d_max <= t_scale:
        raise ValueError(f"D_max={d_max} must lie in [1, T={t_scale}]")
    if n_sample < 2:
        raise ValueError(f"n_sample={n_sample} must be >= 2")

    valid = valid_cells(t_scale, d_max)
    dd = np.arange(d_max)[:, None, None]
    tt = np.arange(t_scale)[None, :, None]
    nn = np.arange(n_sample)[None, None, :]
    pos = tt + (dd + 1) * nn / (n_sample - 1)          # [D, T, N]
    pos = np.clip(pos, 0.0, t_scale - 1.0)

    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, t_scale - 1)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, t_scale - 1)

    keep = np.broadcast_to(valid[:, :, None], pos.shape).ravel().astype(np.float64)
    rows = np.arange(d_max * t_scale * n_sample)
    weights = np.zeros((d_max * t_scale * n_sample, t_scale))
    np.add.at(weights, (rows, i0.ravel()), (1.0 - frac).ravel() * keep)
    np.add.at(weights, (rows, i1.ravel()), frac.ravel() * keep)
    return SamplingMask(weights, valid, t_scale, d_max, n_sample)


def rescale_features(raw: np.ndarray, target_t: int) -> np.ndarray:
    """Linearly resample [L x D] onto [target_t x D], mapping the index
    range [0, L-1] onto [0, target_t-1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 1:
        raise ValueError(f"features must be a nonempty [L x D] array, got {raw.shape}")
    if target_t < 2:
        raise ValueError(f"target temporal scale {target_t} must be >= 2")
    length = raw.shape[0]
    pos = np.arange(target_t) * ((length - 1) / (target_t - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), length - 1)
    frac = (pos - i0)[:, None]
    i1 = np.minimum(i0 + 1, length - 1)
    return raw[i0] * (1.0 - frac) + raw[i1] * frac


class ProposalNet:
    """BiLSTM temporal encoding feeding two boundary heads and the
    confidence-map head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        d, w = cfg.feature_dim, cfg.encoder_width
        h = cfg.lstm_hidden
        self.mask = build_sampling_mask(cfg.temporal_scale, cfg.d_max, cfg.n_sample)
        self._mask_t = Tensor(self.mask.weights)

        if params is not None:
            t = {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
            self.lstm = BiLstmParams(t["lstm.w_fwd"], t["lstm.u_fwd"], t["lstm.b_fwd"],
                                     t["lstm.w_bwd"], t["lstm.u_bwd"], t["lstm.b_bwd"])
            self.enc1 = Conv1dParams(t["enc1.weight"], t["enc1.bias"], 1, "relu")
            self.enc2 = Conv1dParams(t["enc2.weight"], t["enc2.bias"], 1, "relu")
            self.start1 = Conv1dParams(t["start1.weight"], t["start1.bias"], 1, "relu")
            self.start2 = Conv1dParams(t["start2.weight"], t["start2.bias"], 0, "sigmoid")
            self.end1 = Conv1dParams(t["end1.weight"], t["end1.bias"], 1, "relu")
            self.end2 = Conv1dParams(t["end2.weight"], t["end2.bias"], 0, "sigmoid")
            self.map_w1, self.map_b1 = t["map.w1"], t["map.b1"]
            self.map_w2, self.map_b2 = t["map.w2"], t["map.b2"]
            return

        if rng is None:
            raise ValueError("either an rng or a parameter dict is required")
        self.lstm = BiLstmParams.create(rng, d, h)
        self.enc1 = Conv1dParams.create(rng, d + 2 * h, w, 3, "same", "relu")
        self.enc2 = Conv1dParams.create(rng, w, w, 3, "same", "relu")
        self.start1 = Conv1dParams.create(rng, w, cfg.head_width, 3, "same", "relu")
        self.start2 = Conv1dParams.create(rng, cfg.head_width, 1, 1, 0, "sigmoid")
        self.end1 = Conv1dParams.create(rng, w, cfg.head_width, 3, "same", "relu")
        self.end2 = Conv1dParams.create(rng, cfg.head_width, 1, 1, 0, "sigmoid")
        self.map_w1, self.map_b1 = linear_params(rng, cfg.n_sample * w, cfg.map_hidden)
        self.map_w2, self.map_b2 = linear_params(rng, cfg.map_hidden, 2)

    # ------------------------------------------------------------------

    def tensors(self) -> dict[str, Tensor]:
        reg: dict[str, Tensor] = {}
        for prefix, group in (("lstm", self.lstm.tensors()),
                              ("enc1", self.enc1.tensors()),
                              ("enc2", self.enc2.tensors()),
                              ("start1", self.start1.tensors()),
                              ("start2", self.start2.tensors()),
                              ("end1", self.end1.tensors()),
                              ("end2", self.end2.tensors())):
            for name, t in group.items():
                reg[f"{prefix}.{name}"] = t
        reg["map.w1"], reg["map.b1"] = self.map_w1, self.map_b1
        reg["map.w2"], reg["map.b2"] = self.map_w2, self.map_b2
        return reg

    @classmethod
    def from_params(cls, cfg: ModelConfig, params: dict[str, np.ndarray]) -> "ProposalNet":
        return cls(cfg, params=params)

    # ------------------------------------------------------------------

    def encode(self, features: np.ndarray | Tensor) -> Tensor:
        """[T x D] rescaled features -> [T x encoder_width]."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.shape != (self.cfg.temporal_scale, self.cfg.feature_dim):
            raise ValueError(
                f"expected rescaled features of shape "
                f"({self.cfg.temporal_scale}, {self.cfg.feature_dim}), got {x.shape}")
        enc_in = concat([x, bilstm(x, self.lstm)], axis=1)
        y = conv1d(conv1d(transpose(enc_in), self.enc1), self.enc2)
        return transpose(y)

    def temporal_eval(self, encoded: Tensor) -> tuple[Tensor, Tensor]:
        """Encoded sequence -> (start_probs [T], end_probs [T]), both in (0,1)."""
        ec = transpose(encoded)
        t_len = encoded.shape[0]
        start = reshape(conv1d(conv1d(ec, self.start1), self.start2), (t_len,))
        end = reshape(conv1d(conv1d(ec, self.end1), self.end2), (t_len,))
        return start, end

    def confidence_map(self, encoded: Tensor) -> tuple[Tensor, Tensor]:
        """Encoded sequence -> (cls_conf, reg_conf) tensors of shape [D_max x T]."""
        cfg = self.cfg
        gathered = matmul(self._mask_t, encoded)                     # [D*T*N, E]
        per_cell = reshape(gathered, (cfg.d_max * cfg.temporal_scale,
                                      cfg.n_sample * cfg.encoder_width))
        hidden = relu(linear(per_cell, self.map_w1, self.map_b1))
        out = linear(hidden, self.map_w2, self.map_b2)
        cls_map = reshape(sigmoid(out[:, 0]), (cfg.d_max, cfg.temporal_scale))
        reg_map = reshape(sigmoid(out[:, 1]), (cfg.d_max, cfg.temporal_scale))
        return cls_map, reg_map

    def forward(self, features: np.ndarray | Tensor) -> dict[str, Tensor]:
        encoded = self.encode(features)
        start, end = self.temporal_eval(encoded)
        cls_map, reg_map = self.confidence_map(encoded)
        return {"start": start, "end": end, "cls": cls_map, "reg": reg_map,
                "encoded": encoded}

    def predict(self, video: FeatureSequence) -> tuple[BoundaryProbabilityPair, BMConfidenceMap]:
        feats = rescale_features(video.features, self.cfg.temporal_scale)
        out = self.forward(feats)
        valid = self.mask.valid
        return (BoundaryProbabilityPair(out["start"].data.copy(), out["end"].data.copy()),
                BMConfidenceMap(out["cls"].data * valid, out["reg"].data * valid, valid))


# ----------------------------------------------------------------------
# labels

def make_labels(instances: list[tuple[str, float, float]], duration: float,
                temporal_scale: int, d_max: int,
                boundary_ratio: float = 0.1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Training targets for one video.

    Start/end labels are 1 on cells within +-max(1, boundary_ratio *
    instance length in cells) of the true boundary; map labels hold the
    best IoU between each valid cell's segment and any instance.
    """
    t_scale = temporal_scale
    delta = duration / t_scale
    start = np.zeros(t_scale)
    end = np.zeros(t_scale)
    map_labels = np.zeros((d_max, t_scale))
    valid = valid_cells(t_scale, d_max)

    cell_start = np.arange(t_scale)[None, :] * delta
    cell_end = cell_start + (np.arange(d_max)[:, None] + 1) * delta

    for label, s, e in instances:
        if e <= s:
            raise ValueError(f"degenerate instance [{s}, {e}] for label {label!r}")
        if s < 0 or e > duration + 1e-9:
            raise ValueError(f"instance [{s}, {e}] outside [0, {duration}]")
        half_width = max(1.0, boundary_ratio * (e - s) / delta)
        for boundary, arr in ((s, start), (e, end)):
            grid = boundary / delta
            lo = max(0, int(np.ceil(grid - half_width)))
            hi = min(t_scale - 1, int(np.floor(grid + half_width)))
            if lo <= hi:
                arr[lo:hi + 1] = 1.0
        inter = np.clip(np.minimum(cell_end, e) - np.maximum(cell_start, s), 0.0, None)
        union = np.maximum(cell_end, e) - np.minimum(cell_start, s)
        np.maximum(map_labels, inter / union, out=map_labels)

    map_labels[~valid] = 0.0
    return start, end, map_labels


def labels_for_video(annotations: AnnotationSet, video: FeatureSequence,
                     cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    va = annotations.videos.get(video.video_id)
    instances = va.instances if va is not None else []
    return make_labels(instances, video.duration_seconds,
                       cfg.temporal_scale, cfg.d_max, cfg.boundary_label_ratio)


# ----------------------------------------------------------------------
# losses

def balanced_bce(pred: Tensor, labels: np.ndarray, select: np.ndarray) -> Tensor:
    """Class-balanced binary logistic loss on probabilities.

    Positives are cells with label >= 0.5 inside `select`; each present
    side contributes the mean of its log terms, halved when both sides
    are present (so all-0.5 predictions cost exactly ln 2).
    """
    pos = (labels >= 0.5) & select
    neg = (labels < 0.5) & select
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


def balanced_l2(pred: Tensor, labels: np.ndarray, select: np.ndarray) -> Tensor:
    """L2 regression balanced between high-IoU (label >= 0.5) and low-IoU
    cells, restricted to `select`."""
    high = (labels >= 0.5) & select
    low = (labels < 0.5) & select
    diff = pred - Tensor(labels)
    sq = diff * diff
    terms = []
    for mask in (high, low):
        if mask.any():
            terms.append(tensor_sum(sq * Tensor(mask.astype(np.float64)))
                         * (1.0 / mask.sum()))
    if not terms:
        return Tensor(np.zeros(()))
    if len(terms) == 1:
        return terms[0]
    return terms[0] * 0.5 + terms[1] * 0.5


def joint_loss(outputs: dict[str, Tensor],
               labels: tuple[np.ndarray, np.ndarray, np.ndarray],
               valid: np.ndarray, lambda_cls: float = 1.0,
               lambda_reg: float = 10.0) -> Tensor:
    """L_start + L_end + lambda_cls * L_cls + lambda_reg * L_reg."""
    start_labels, end_labels, map_labels = labels
    for key in ("start", "end", "cls", "reg"):
        if not np.isfinite(outputs[key].data).all():
            raise DivergenceError(f"non-finite predictions in {key!r} head")
    all_t = np.ones_like(start_labels, dtype=bool)
    loss = balanced_bce(outputs["start"], start_labels, all_t)
    loss = loss + balanced_bce(outputs["end"], end_labels, all_t)
    loss = loss + lambda_cls * balanced_bce(outputs["cls"], map_labels, valid)
    loss = loss + lambda_reg * balanced_l2(outputs["reg"], map_labels, valid)
    return loss


# ----------------------------------------------------------------------
# training

def sgd_step(params: dict[str, Tensor], velocities: dict[str, np.ndarray],
             lr: float, momentum: float) -> None:
    for name, t in params.items():
        v = velocities[name]
        v *= momentum
        v -= lr * t.grad
        t.data += v


def train_proposal_net(videos: list[FeatureSequence], annotations: AnnotationSet,
                       model_cfg: ModelConfig, train_cfg: TrainConfig,
                       log_fn=None) -> tuple[ProposalNet, list[float]]:
    """Joint SGD-with-momentum training of both heads; deterministic given
    the seed.  Returns the trained net and per-epoch mean losses."""
    if not videos:
        raise ValueError("training requires at least one video")
    rng = np.random.default_rng(train_cfg.seed)
    net = ProposalNet(model_cfg, rng)
    params = net.tensors()
    velocities = {name: np.zeros_like(t.data) for name, t in params.items()}

    prepared = []
    for video in videos:
        feats = rescale_features(video.features, model_cfg.temporal_scale)
        prepared.append((feats, labels_for_video(annotations, video, model_cfg)))

    epoch_losses: list[float] = []
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(prepared))
        total = 0.0
        for idx in order:
            feats, labels = prepared[idx]
            outputs = net.forward(feats)
            loss = joint_loss(outputs, labels, net.mask.valid,
                              train_cfg.lambda_cls, train_cfg.lambda_reg)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"training diverged at epoch {epoch}")
            for t in params.values():
                t.zero_grad()
            backward(loss)
            sgd_step(params, velocities, train_cfg.lr, train_cfg.momentum)
            total += value
        epoch_losses.append(total / len(prepared))
        if log_fn is not None:
            log_fn(epoch, epoch_losses[-1])
    return net, epoch_losses
