"""Declarative model configurations and their builders.

Eleven architectures: three spatial CNNs (plain / batch-normalized /
residual), a temporal and a frequency 1-D CNN, their CNN-LSTM parallel
variants, and four combined models that concatenate branch features into
a 128/32 fusion head.  Every config terminates in a single sigmoid unit
whose output reads as the probability of the component being an artifact.

Configs are plain data (JSON-serializable layer entries), so alternate
widths or kernels can be swapped in without touching the builders.  The
builder infers shapes layer by layer; kernels and pool windows larger
than the incoming extent are clamped to it, which keeps every config
buildable on strongly shrunken inputs used by verification suites.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import nn, ops
from .errors import ConfigError

MODEL_IDS = ("sm1", "sm2", "sm3", "tm1", "tm2", "ps1", "ps2",
             "comb1", "comb2", "comb3", "comb4")

DOMAINS = ("spatial", "temporal", "frequency")

#: Canonical input sample shapes: one-channel 3-D grid, timecourse of 1200
#: samples, and its positive-frequency periodogram of length 600.
CANONICAL_INPUT_SHAPES = {
    "spatial": (1, 45, 54, 45),
    "temporal": (1, 1200),
    "frequency": (1, 600),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description: per-domain feature stacks plus fusion/head."""

    id: str
    branches: dict  # domain -> list of layer entry dicts (feature extractor)
    fusion: tuple = ()  # layer entries applied after concat (combined models)
    head: tuple = field(default_factory=lambda: (
        {"kind": "dense", "width": 1}, {"kind": "sigmoid"}))

    def __post_init__(self):
        if not self.branches:
            raise ConfigError(f"config {self.id!r} has no branches")
        for domain in self.branches:
            if domain not in DOMAINS:
                raise ConfigError(f"config {self.id!r}: unknown domain {domain!r}")

    @property
    def input_domains(self) -> tuple:
        return tuple(self.branches.keys())

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "branches": {d: list(entries) for d, entries in self.branches.items()},
            "fusion": list(self.fusion),
            "head": list(self.head),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(id=data["id"],
                   branches={d: list(v) for d, v in data["branches"].items()},
                   fusion=tuple(data.get("fusion", ())),
                   head=tuple(data.get("head", ())))


def _spatial_features(batchnorm: bool = False, residual: bool = False) -> list:
    entries = []
    for out_ch in (8, 16, 32):
        if residual:
            entries.append({"kind": "residual", "out_channels": out_ch, "kernel": 3})
        else:
            entries.append({"kind": "conv", "out_channels": out_ch, "kernel": 3})
            if batchnorm:
                entries.append({"kind": "batchnorm"})
            entries.append({"kind": "relu"})
        entries.append({"kind": "pool", "window": 2})
    entries += [
        {"kind": "flatten"},
        {"kind": "dense", "width": 128}, {"kind": "relu"},
        {"kind": "dense", "width": 32}, {"kind": "relu"},
    ]
    return entries


def _series_conv_stack() -> list:
    return [
        {"kind": "conv", "out_channels": 16, "kernel": 5}, {"kind": "relu"},
        {"kind": "pool", "window": 2},
        {"kind": "conv", "out_channels": 32, "kernel": 5}, {"kind": "relu"},
        {"kind": "pool", "window": 2},
        {"kind": "conv", "out_channels": 64, "kernel": 3}, {"kind": "relu"},
        {"kind": "pool", "window": 2},
        {"kind": "flatten"},
    ]


def _series_features() -> list:
    return _series_conv_stack() + [
        {"kind": "dense", "width": 64}, {"kind": "relu"},
    ]


def _series_lstm_features() -> list:
    return [
        {"kind": "parallel", "stacks": [
            _series_conv_stack(),
            [{"kind": "as_sequence"},
             {"kind": "lstm", "hidden": 64},
             {"kind": "dropout", "rate": 0.3}],
        ]},
        {"kind": "dense", "width": 64}, {"kind": "relu"},
    ]


def combine_models(branch_configs: Sequence[ModelConfig],
                   combined_id: str) -> ModelConfig:
    """Fuse single-domain feature extractors behind a 128/32 dense head."""
    if not 2 <= len(branch_configs) <= 3:
        raise ConfigError(
            f"combined models take 2 or 3 branches, got {len(branch_configs)}")
    branches = {}
    for cfg in branch_configs:
        if len(cfg.input_domains) != 1:
            raise ConfigError(f"branch {cfg.id!r} is not single-domain")
        domain = cfg.input_domains[0]
        if domain in branches:
            raise ConfigError(f"duplicate branch domain {domain!r}")
        branches[domain] = list(cfg.branches[domain])
    fusion = ({"kind": "dense", "width": 128}, {"kind": "relu"},
              {"kind": "dense", "width": 32}, {"kind": "relu"})
    return ModelConfig(id=combined_id, branches=branches, fusion=fusion)


def _registry() -> dict:
    sm1 = ModelConfig("sm1", {"spatial": _spatial_features()})
    sm2 = ModelConfig("sm2", {"spatial": _spatial_features(batchnorm=True)})
    sm3 = ModelConfig("sm3", {"spatial": _spatial_features(residual=True)})
    tm1 = ModelConfig("tm1", {"temporal": _series_features()})
    tm2 = ModelConfig("tm2", {"temporal": _series_lstm_features()})
    ps1 = ModelConfig("ps1", {"frequency": _series_features()})
    ps2 = ModelConfig("ps2", {"frequency": _series_lstm_features()})
    return {
        "sm1": sm1, "sm2": sm2, "sm3": sm3,
        "tm1": tm1, "tm2": tm2, "ps1": ps1, "ps2": ps2,
        "comb1": combine_models([sm1, tm1, ps1], "comb1"),
        "comb2": combine_models([tm1, ps1], "comb2"),
        "comb3": combine_models([sm1, tm1], "comb3"),
        "comb4": combine_models([tm2, ps2], "comb4"),
    }


def default_config(model_id: str) -> ModelConfig:
    registry = _registry()
    if model_id not in registry:
        raise ConfigError(
            f"unknown model id {model_id!r}; known ids: {', '.join(MODEL_IDS)}")
    return registry[model_id]


class _NameCounter:
    def __init__(self):
        self.counts: dict = {}

    def next(self, kind: str) -> str:
        self.counts[kind] = self.counts.get(kind, 0) + 1
        return f"{kind}{self.counts[kind]}"


def _clamped(requested: int, extents: tuple) -> tuple:
    return tuple(min(requested, e) for e in extents)


def _build_stack(entries: Sequence[dict], in_shape: tuple, rank: int,
                 rng: np.random.Generator, names: _NameCounter,
                 shape_log: list) -> tuple:
    """Instantiate layer entries against an incoming sample shape."""
    layers = []
    shape = tuple(in_shape)
    for entry in entries:
        kind = entry["kind"]
        if kind == "conv":
            spec = ops.ConvSpec(
                rank=rank, kernel_extents=_clamped(entry["kernel"], shape[1:]),
                stride=(1,) * rank, in_channels=shape[0],
                out_channels=entry["out_channels"])
            layer = nn.Conv(names.next("conv"), spec, rng)
        elif kind == "residual":
            spec = ops.ConvSpec(
                rank=rank, kernel_extents=_clamped(entry["kernel"], shape[1:]),
                stride=(1,) * rank, in_channels=shape[0],
                out_channels=entry["out_channels"])
            layer = nn.Residual(names.next("res"), spec, rng)
        elif kind == "pool":
            window = _clamped(entry["window"], shape[1:])
            layer = nn.MaxPool(names.next("pool"), window)
        elif kind == "batchnorm":
            layer = nn.BatchNorm(names.next("bn"), shape[0])
        elif kind == "relu":
            layer = nn.Activation(names.next("relu"), "relu")
        elif kind == "sigmoid":
            layer = nn.Activation(names.next("sigmoid"), "sigmoid")
        elif kind == "flatten":
            layer = nn.Flatten(names.next("flatten"))
        elif kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"dense layer needs flat features, got {shape}")
            layer = nn.Dense(names.next("dense"), shape[0], entry["width"], rng)
        elif kind == "dropout":
            seed = int(rng.integers(2 ** 63))
            layer = nn.Dropout(names.next("dropout"), entry["rate"], seed)
        elif kind == "as_sequence":
            layer = nn.AsSequence(names.next("seq"))
        elif kind == "lstm":
            if len(shape) != 2:
                raise ConfigError(f"lstm needs (time, features) input, got {shape}")
            layer = nn.Lstm(names.next("lstm"), shape[1], entry["hidden"], rng)
        elif kind == "parallel":
            stacks = []
            widths = []
            for idx, sub_entries in enumerate(entry["stacks"]):
                sub_names = _NameCounter()
                sub_log: list = []
                sub_layers, sub_shape = _build_stack(
                    sub_entries, shape, rank, rng, sub_names, sub_log)
                if len(sub_shape) != 1:
                    raise ConfigError(
                        f"parallel stack {idx} must end flat, got {sub_shape}")
                stacks.append(sub_layers)
                widths.append(sub_shape[0])
            layer = nn.Parallel(names.next("par"), stacks)
            shape = (sum(widths),)
            shape_log.append([layer.name, list(shape)])
            layers.append(layer)
            continue
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
        shape = layer.output_shape(shape)
        shape_log.append([layer.name, list(shape)])
        layers.append(layer)
    return layers, shape


def build_model(config: ModelConfig,
                input_shapes: Optional[Mapping[str, tuple]] = None,
                seed: int = 0) -> nn.Model:
    """Instantiate a config with seeded initialization.

    Conv and dense weights are He-uniform (their activations are ReLU),
    LSTM gate weights plain uniform at 1/sqrt(hidden), batch-norm starts
    at identity.  The same seed always yields bit-identical parameters.
    """
    shapes = dict(CANONICAL_INPUT_SHAPES)
    if input_shapes:
        shapes.update({d: tuple(s) for d, s in input_shapes.items()})
    rng = np.random.default_rng(seed)
    shape_logs: dict = {}
    branches = {}
    feature_widths = []
    for domain in DOMAINS:  # fixed order keeps initialization deterministic
        if domain not in config.branches:
            continue
        rank = 3 if domain == "spatial" else 1
        sample_shape = shapes[domain]
        names = _NameCounter()
        log: list = []
        layers, out_shape = _build_stack(
            config.branches[domain], sample_shape, rank, rng, names, log)
        if len(out_shape) != 1:
            raise ConfigError(
                f"branch {domain!r} must end in flat features, got {out_shape}")
        branches[domain] = layers
        feature_widths.append(out_shape[0])
        shape_logs[domain] = log

    merged = (sum(feature_widths),)
    names = _NameCounter()
    fusion_log: list = []
    fusion_layers, merged = _build_stack(
        config.fusion, merged, 1, rng, names, fusion_log)
    names = _NameCounter()
    head_log: list = []
    head_layers, out_shape = _build_stack(
        config.head, merged, 1, rng, names, head_log)
    if out_shape != (1,):
        raise ConfigError(f"head must end in a single unit, got {out_shape}")
    shape_logs["fusion"] = fusion_log
    shape_logs["head"] = head_log

    model = nn.Model(config, {d: shapes[d] for d in config.branches},
                     branches, fusion_layers, head_layers, seed)
    model.layer_output_shapes = shape_logs
    return model


def parameter_count(model: nn.Model) -> int:
    return int(sum(t.size for t in model.parameters().values()))
