"""Pipeline configuration: every free parameter of the system lives here,
loads from JSON, and is validated against the owning module's preconditions
before any computation starts.

Grid convention used everywhere: a video of `duration` seconds rescaled to
temporal scale T has cell width delta = duration / T; grid index g
corresponds to time g * delta, and cell t spans [t*delta, (t+1)*delta].
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """A configuration value violates a module precondition."""


@dataclass
class ModelConfig:
    feature_dim: int = 16
    temporal_scale: int = 100       # T: rescaled sequence length
    d_max: int = 100                # max proposal duration in grid cells
    n_sample: int = 32              # interpolation points per map cell
    lstm_hidden: int = 64
    encoder_width: int = 128
    head_width: int = 64            # hidden channels of the boundary heads
    map_hidden: int = 128           # hidden width of the map head
    boundary_label_ratio: float = 0.1


@dataclass
class CascadeConfig:
    n_stages: int = 3
    iou_floors: list[float] = field(default_factory=lambda: [0.5, 0.6, 0.7])
    context_ratio: float = 0.25
    n_bins: int = 16
    hidden: int = 64


@dataclass
class TrainConfig:
    seed: int = 7
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    lambda_cls: float = 1.0
    lambda_reg: float = 10.0
    cascade_lr: float = 0.02
    cascade_epochs: int = 8
    proposal_pool: int = 64         # proposals per video used to train the cascade


@dataclass
class PostprocessConfig:
    nms_method: str = "gaussian"
    sigma: float = 0.4
    linear_thr: float = 0.3
    keep_top: int = 100
    top_k_classes: int = 2
    candidate_pool: int = 200       # fused proposals kept per video at inference


@dataclass
class EvalConfig:
    iou_thresholds: list[float] = field(
        default_factory=lambda: [i / 100 for i in range(50, 100, 5)])


@dataclass
class SyntheticConfig:
    n_videos: int = 250
    n_eval: int = 50
    duration_range: list[float] = field(default_factory=lambda: [20.0, 60.0])
    instances_range: list[int] = field(default_factory=lambda: [1, 3])
    n_classes: int = 4
    feature_dim: int = 16
    noise: float = 0.25
    seed: int = 7
    snippets_per_second: float = 2.0


@dataclass
class PathsConfig:
    features_dir: str = ""
    annotations: str = ""
    class_scores: str = ""
    checkpoint_dir: str = ""
    output_dir: str = ""


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    # ------------------------------------------------------------------

    def validate(self) -> "PipelineConfig":
        errors: list[str] = []

        def check(ok: bool, msg: str) -> None:
            if not ok:
                errors.append(msg)

        m = self.model
        check(m.feature_dim >= 1, "model.feature_dim must be >= 1")
        check(m.temporal_scale >= 2, "model.temporal_scale must be >= 2")
        check(1 <= m.d_max <= m.temporal_scale,
              f"model.d_max must lie in [1, temporal_scale={m.temporal_scale}]")
        check(m.n_sample >= 2, "model.n_sample must be >= 2")
        check(min(m.lstm_hidden, m.encoder_width, m.head_width, m.map_hidden) >= 1,
              "model widths must all be >= 1")
        check(m.boundary_label_ratio >= 0, "model.boundary_label_ratio must be >= 0")

        c = self.cascade
        check(c.n_stages >= 1, "cascade.n_stages must be >= 1")
        check(c.context_ratio >= 0, "cascade.context_ratio must be >= 0")
        check(c.n_bins >= 2, "cascade.n_bins must be >= 2")
        check(c.hidden >= 1, "cascade.hidden must be >= 1")
        check(len(c.iou_floors) == c.n_stages,
              f"cascade.iou_floors must list one floor per stage ({c.n_stages})")
        check(all(0 < f < 1 for f in c.iou_floors),
              "cascade.iou_floors must lie in (0, 1)")
        check(all(a <= b for a, b in zip(c.iou_floors, c.iou_floors[1:])),
              "cascade.iou_floors must be monotonically non-decreasing")

        t = self.train
        check(t.lr >= 0, "train.lr must be >= 0")
        check(t.cascade_lr >= 0, "train.cascade_lr must be >= 0")
        check(0 <= t.momentum < 1, "train.momentum must lie in [0, 1)")
        check(t.epochs >= 0, "train.epochs must be >= 0")
        check(t.cascade_epochs >= 0, "train.cascade_epochs must be >= 0")
        check(t.lambda_cls >= 0 and t.lambda_reg >= 0,
              "train loss weights must be >= 0")
        check(t.proposal_pool >= 1, "train.proposal_pool must be >= 1")

        p = self.postprocess
        check(p.nms_method in ("gaussian", "linear"),
              f"postprocess.nms_method must be gaussian or linear, got {p.nms_method!r}")
        check(p.sigma > 0, "postprocess.sigma must be > 0")
        check(0 <= p.linear_thr <= 1, "postprocess.linear_thr must lie in [0, 1]")
        check(p.keep_top >= 1, "postprocess.keep_top must be >= 1")
        check(p.top_k_classes >= 1, "postprocess.top_k_classes must be >= 1")
        check(p.candidate_pool >= 1, "postprocess.candidate_pool must be >= 1")

        e = self.eval
        check(len(e.iou_thresholds) >= 1, "eval.iou_thresholds must be nonempty")
        check(all(0 < x <= 1 for x in e.iou_thresholds),
              "eval.iou_thresholds must lie in (0, 1]")
        check(all(a < b for a, b in zip(e.iou_thresholds, e.iou_thresholds[1:])),
              "eval.iou_thresholds must be strictly increasing")

        s = self.synthetic
        check(s.n_videos >= 1, "synthetic.n_videos must be >= 1")
        check(0 <= s.n_eval <= s.n_videos,
              "synthetic.n_eval must lie in [0, n_videos]")
        check(len(s.duration_range) == 2 and 0 < s.duration_range[0] <= s.duration_range[1],
              "synthetic.duration_range must be a nonempty positive range")
        check(len(s.instances_range) == 2
              and 0 <= s.instances_range[0] <= s.instances_range[1],
              "synthetic.instances_range must be a nonempty range")
        check(s.n_classes >= 1, "synthetic.n_classes must be >= 1")
        check(s.feature_dim >= s.n_classes + 2,
              "synthetic.feature_dim must be >= n_classes + 2 (indicator + bump channels)")
        check(s.noise >= 0, "synthetic.noise must be >= 0")
        check(s.snippets_per_second > 0, "synthetic.snippets_per_second must be > 0")

        if errors:
            raise ConfigError("; ".join(errors))
        return self

    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        cfg = cls()
        for section_field in dataclasses.fields(cls):
            section = raw.get(section_field.name)
            if section is None:
                continue
            if not isinstance(section, dict):
                raise ConfigError(f"config section {section_field.name!r} must be an object")
            target = getattr(cfg, section_field.name)
            known = {f.name for f in dataclasses.fields(target)}
            for key, value in section.items():
                if key not in known:
                    raise ConfigError(f"unknown config key {section_field.name}.{key}")
                setattr(target, key, value)
        return cfg

    @classmethod
    def load(cls, path: str | None, overrides: list[str] | None = None) -> "PipelineConfig":
        """Build a config from an optional JSON file plus `section.key=value`
        override strings, then validate."""
        if path:
            with open(path) as f:
                try:
                    raw = json.load(f)
                except json.JSONDecodeError as e:
                    raise ConfigError(f"{path}: malformed JSON ({e})") from e
            cfg = cls.from_dict(raw)
        else:
            cfg = cls()
        for item in overrides or []:
            cfg.apply_override(item)
        return cfg.validate()

    def apply_override(self, item: str) -> None:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, _, value = item.partition("=")
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must look like section.key")
        section_name, field_name = parts
        if not hasattr(self, section_name):
            raise ConfigError(f"unknown config section {section_name!r}")
        section = getattr(self, section_name)
        if not any(f.name == field_name for f in dataclasses.fields(section)):
            raise ConfigError(f"unknown config key {section_name}.{field_name}")
        try:
            parsed: Any = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        setattr(section, field_name, parsed)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def toy_config() -> PipelineConfig:
    """Desk-scale defaults: small enough to train on a laptop CPU."""
    cfg = PipelineConfig()
    cfg.model = ModelConfig(
        feature_dim=16, temporal_scale=32, d_max=32, n_sample=8,
        lstm_hidden=16, encoder_width=32, head_width=16, map_hidden=32)
    cfg.cascade = CascadeConfig(n_stages=3, iou_floors=[0.5, 0.6, 0.7],
                                context_ratio=0.25, n_bins=8, hidden=32)
    return cfg
