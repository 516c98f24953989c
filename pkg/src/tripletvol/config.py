"""Run configuration: one JSON document with data/model/train/eval/osm/tsne sections.

Every field has a default; unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .explain import OsmConfig
from .model import BASELINE, CLASSIFIER, EMBEDDER, ModelSpec
from .projector import TsneConfig
from .trainer import TrainConfig
from .volume import DEFAULT_BACKGROUND_THRESHOLD, Volume, WindowSpec, preprocess


@dataclass
class DataConfig:
    manifest: str = "manifest.json"
    target_dims: tuple[int, int, int] = (32, 32, 16)
    window_width: float = 80.0
    window_level: float = 40.0
    background_threshold: float = DEFAULT_BACKGROUND_THRESHOLD
    preprocess: bool = True

    def __post_init__(self):
        self.target_dims = tuple(int(d) for d in self.target_dims)  # type: ignore[assignment]
        if len(self.target_dims) != 3:
            raise ConfigError("data.target_dims needs three extents")

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.window_width, self.window_level)

    def transform(self):
        if not self.preprocess:
            return None
        dims, window, thr = self.target_dims, self.window, self.background_threshold

        def run(v: Volume) -> Volume:
            return preprocess(v, dims, window, thr)

        return run


@dataclass
class ModelConfig:
    channel_widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    strides: Optional[list[int]] = None
    baseline_channel_widths: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128, 128])
    baseline_strides: Optional[list[int]] = None
    embedding_dim: int = 512
    dense_hidden: list[int] = field(default_factory=lambda: [1024])
    classifier_hidden: list[int] = field(default_factory=lambda: [256, 64, 32])

    def spec(self, variant: str, input_dims) -> ModelSpec:
        if variant == BASELINE:
            widths, strides = self.baseline_channel_widths, self.baseline_strides
        else:
            widths, strides = self.channel_widths, self.strides
        return ModelSpec(
            variant=variant,
            input_dims=tuple(input_dims),
            channel_widths=None if variant == CLASSIFIER else list(widths),
            strides=None if strides is None else list(strides),
            embedding_dim=self.embedding_dim,
            dense_hidden=list(self.dense_hidden),
            classifier_hidden=list(self.classifier_hidden),
        )


@dataclass
class EvalConfig:
    k: int = 5
    seed: int = 7
    threshold: float = 0.5


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    osm: OsmConfig = field(default_factory=OsmConfig)
    tsne: TsneConfig = field(default_factory=TsneConfig)

    def embedder_spec(self) -> ModelSpec:
        return self.model.spec(EMBEDDER, self.data.target_dims)

    def baseline_spec(self) -> ModelSpec:
        return self.model.spec(BASELINE, self.data.target_dims)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_json(doc)

    def with_overrides(self, section: str, **values: Any) -> "RunConfig":
        doc = self.to_json()
        doc[section].update(values)
        return RunConfig.from_json(doc)


def _build(cls, doc: Any, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in doc.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub is not None else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "osm"): OsmConfig,
    (RunConfig, "tsne"): TsneConfig,
}
