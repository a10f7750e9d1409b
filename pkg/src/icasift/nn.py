"""Layer objects and the Model container the zoo builders assemble.

A layer owns its parameters and knows its output shape; a model is a set
of per-domain branches whose features are concatenated (combined models)
or used directly, followed by fusion/head layers ending in one sigmoid
unit.  Sample shapes exclude the batch axis throughout.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import ops
from .archive import load_parameters, save_parameters
from .errors import ArchiveError, ConfigError, DimensionError, DomainMismatchError
from .tensor import Tensor, parameter


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer: named, optionally holding parameters and extra state."""

    def __init__(self, name: str):
        self.name = name

    def parameters(self) -> list:
        """(local_name, Tensor) pairs of trainable parameters."""
        return []

    def state_extras(self) -> list:
        """(local_name, ndarray) pairs archived but not optimized (BN stats)."""
        return []

    def load_state_extra(self, local_name: str, array: np.ndarray) -> None:
        raise KeyError(local_name)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, name: str, spec: ops.ConvSpec, rng: np.random.Generator):
        super().__init__(name)
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel_extents))
        w_shape = (spec.out_channels, spec.in_channels) + spec.kernel_extents
        self.W = parameter(_he_uniform(rng, w_shape, fan_in))
        self.b = parameter(np.zeros(spec.out_channels))

    def parameters(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x, mode):
        return ops.conv_forward(x, self.W, self.b, self.spec)

    def output_shape(self, in_shape):
        return (self.spec.out_channels,) + self.spec.output_extents(in_shape[1:])


class MaxPool(Layer):
    def __init__(self, name: str, window: tuple, stride: Optional[tuple] = None):
        super().__init__(name)
        self.window = window
        self.stride = window if stride is None else stride

    def forward(self, x, mode):
        return ops.pool_forward(x, self.window, self.stride)

    def output_shape(self, in_shape):
        out = tuple((n - w) // s + 1
                    for n, w, s in zip(in_shape[1:], self.window, self.stride))
        return (in_shape[0],) + out


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int):
        super().__init__(name)
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.state = ops.BatchNormState.for_channels(channels)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state_extras(self):
        return [("running_mean", self.state.running_mean),
                ("running_var", self.state.running_var)]

    def load_state_extra(self, local_name, array):
        if local_name == "running_mean":
            self.state.running_mean = array.astype(np.float64)
        elif local_name == "running_var":
            self.state.running_var = array.astype(np.float64)
        else:
            raise KeyError(local_name)

    def forward(self, x, mode):
        return ops.batchnorm_forward(x, self.gamma, self.beta, mode, self.state)

    def output_shape(self, in_shape):
        return in_shape


class Activation(Layer):
    def __init__(self, name: str, kind: str):
        super().__init__(name)
        self.kind = kind

    def forward(self, x, mode):
        return ops.activation_forward(x, self.kind)

    def output_shape(self, in_shape):
        return in_shape


class Flatten(Layer):
    def forward(self, x, mode):
        return ops.concat_flatten([x], mode="flatten")

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Dense(Layer):
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__(name)
        self.W = parameter(_he_uniform(rng, (n_out, n_in), n_in))
        self.b = parameter(np.zeros(n_out))

    def parameters(self):
        return [("W", self.W), ("b", self.b)]

    def forward(self, x, mode):
        return ops.dense_forward(x, self.W, self.b)

    def output_shape(self, in_shape):
        return (self.W.shape[0],)


class Dropout(Layer):
    def __init__(self, name: str, rate: float, seed: int):
        super().__init__(name)
        self.rate = rate
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def forward(self, x, mode):
        return ops.dropout_forward(x, self.rate, mode, self.rng)

    def output_shape(self, in_shape):
        return in_shape


class AsSequence(Layer):
    """Turn a single-channel series (1, T) into LSTM layout (T, 1)."""

    def forward(self, x, mode):
        if x.data.ndim != 3 or x.shape[1] != 1:
            raise DimensionError(
                f"as_sequence expects (batch, 1, time), got {x.shape}")
        return ops.reshape(x, (x.shape[0], x.shape[2], 1))

    def output_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[0] != 1:
            raise DimensionError(f"as_sequence expects (1, time), got {in_shape}")
        return (in_shape[1], 1)


class Lstm(Layer):
    def __init__(self, name: str, in_features: int, hidden: int,
                 rng: np.random.Generator):
        super().__init__(name)
        self.hidden = hidden
        limit = 1.0 / math.sqrt(hidden)
        w = rng.uniform(-limit, limit, size=(4 * hidden, in_features))
        u = rng.uniform(-limit, limit, size=(4 * hidden, hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate open at init
        self.params = ops.LstmParams(W=parameter(w), U=parameter(u), b=parameter(b))
        self._workspace: dict = {}

    def parameters(self):
        return [("W", self.params.W), ("U", self.params.U), ("b", self.params.b)]

    def forward(self, x, mode):
        return ops.lstm_forward(x, self.params, self.hidden,
                                workspace=self._workspace)

    def output_shape(self, in_shape):
        return (self.hidden,)


class Residual(Layer):
    """Valid-padding residual block: relu(bn(conv(x)) + project(crop(x))).

    The skip path is center-cropped to the conv output extents; a unit
    kernel projects channels when the counts differ.
    """

    def __init__(self, name: str, spec: ops.ConvSpec, rng: np.random.Generator):
        super().__init__(name)
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel_extents))
        w_shape = (spec.out_channels, spec.in_channels) + spec.kernel_extents
        self.W = parameter(_he_uniform(rng, w_shape, fan_in))
        self.b = parameter(np.zeros(spec.out_channels))
        self.gamma = parameter(np.ones(spec.out_channels))
        self.beta = parameter(np.zeros(spec.out_channels))
        self.state = ops.BatchNormState.for_channels(spec.out_channels)
        if spec.in_channels != spec.out_channels:
            self.proj_spec = ops.ConvSpec(
                rank=spec.rank, kernel_extents=(1,) * spec.rank,
                stride=(1,) * spec.rank, in_channels=spec.in_channels,
                out_channels=spec.out_channels)
            self.proj_W = parameter(_he_uniform(
                rng, (spec.out_channels, spec.in_channels) + (1,) * spec.rank,
                spec.in_channels))
            self.proj_b = parameter(np.zeros(spec.out_channels))
        else:
            self.proj_spec = None
            self.proj_W = None
            self.proj_b = None

    def parameters(self):
        params = [("W", self.W), ("b", self.b),
                  ("gamma", self.gamma), ("beta", self.beta)]
        if self.proj_spec is not None:
            params += [("proj_W", self.proj_W), ("proj_b", self.proj_b)]
        return params

    def state_extras(self):
        return [("running_mean", self.state.running_mean),
                ("running_var", self.state.running_var)]

    def load_state_extra(self, local_name, array):
        if local_name == "running_mean":
            self.state.running_mean = array.astype(np.float64)
        elif local_name == "running_var":
            self.state.running_var = array.astype(np.float64)
        else:
            raise KeyError(local_name)

    def forward(self, x, mode):
        main = ops.conv_forward(x, self.W, self.b, self.spec)
        main = ops.batchnorm_forward(main, self.gamma, self.beta, mode, self.state)
        skip = ops.crop_center(x, main.shape[2:])
        if self.proj_spec is not None:
            skip = ops.conv_forward(skip, self.proj_W, self.proj_b, self.proj_spec)
        return ops.activation_forward(ops.add(main, skip), "relu")

    def output_shape(self, in_shape):
        return (self.spec.out_channels,) + self.spec.output_extents(in_shape[1:])


class Parallel(Layer):
    """Run sibling stacks on one input and concatenate their feature rows."""

    def __init__(self, name: str, stacks: Sequence[Sequence[Layer]]):
        super().__init__(name)
        self.stacks = [list(s) for s in stacks]

    def parameters(self):
        out = []
        for idx, stack in enumerate(self.stacks):
            for layer in stack:
                for local, tensor in layer.parameters():
                    out.append((f"{idx}.{layer.name}.{local}", tensor))
        return out

    def state_extras(self):
        out = []
        for idx, stack in enumerate(self.stacks):
            for layer in stack:
                for local, arr in layer.state_extras():
                    out.append((f"{idx}.{layer.name}.{local}", arr))
        return out

    def load_state_extra(self, local_name, array):
        idx_str, layer_name, rest = local_name.split(".", 2)
        for layer in self.stacks[int(idx_str)]:
            if layer.name == layer_name:
                layer.load_state_extra(rest, array)
                return
        raise KeyError(local_name)

    def forward(self, x, mode):
        outputs = []
        for stack in self.stacks:
            h = x
            for layer in stack:
                h = layer.forward(h, mode)
            outputs.append(h)
        return ops.concat_flatten(outputs, mode="concat")

    def output_shape(self, in_shape):
        widths = []
        for stack in self.stacks:
            shape = in_shape
            for layer in stack:
                shape = layer.output_shape(shape)
            if len(shape) != 1:
                raise ConfigError(
                    f"parallel stack must end in a feature row, got shape {shape}")
            widths.append(shape[0])
        return (sum(widths),)


class Model:
    """Instantiated architecture: per-domain branches plus fusion/head layers."""

    def __init__(self, config, input_shapes: Mapping[str, tuple],
                 branches: Mapping[str, Sequence[Layer]],
                 fusion: Sequence[Layer], head: Sequence[Layer], seed: int):
        self.config = config
        self.input_shapes = {d: tuple(s) for d, s in input_shapes.items()}
        self.branches = {d: list(layers) for d, layers in branches.items()}
        self.fusion = list(fusion)
        self.head = list(head)
        self.seed = seed
        self.mode = "train"
        self.layer_output_shapes: dict = {}

    @property
    def domains(self) -> tuple:
        return tuple(self.branches.keys())

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode

    def _named_layers(self) -> Iterable[tuple]:
        for domain, layers in self.branches.items():
            for layer in layers:
                yield f"{domain}.{layer.name}", layer
        for layer in self.fusion:
            yield f"fusion.{layer.name}", layer
        for layer in self.head:
            yield f"head.{layer.name}", layer

    def all_layers(self) -> Iterable[Layer]:
        """Every layer, including the ones nested in parallel stacks."""
        for _, layer in self._named_layers():
            if isinstance(layer, Parallel):
                for stack in layer.stacks:
                    yield from stack
            yield layer

    def parameters(self) -> dict:
        out = {}
        for prefix, layer in self._named_layers():
            for local, tensor in layer.parameters():
                out[f"{prefix}.{local}"] = tensor
        return out

    def state_items(self) -> dict:
        """Trainable parameters plus archived extras, in a stable order."""
        out: dict = {}
        for prefix, layer in self._named_layers():
            for local, tensor in layer.parameters():
                out[f"{prefix}.{local}"] = tensor
            for local, arr in layer.state_extras():
                out[f"{prefix}.{local}"] = arr
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        expected = self.state_items()
        missing = set(expected) - set(arrays)
        surplus = set(arrays) - set(expected)
        if missing or surplus:
            raise ArchiveError(
                f"state mismatch: missing {sorted(missing)}, surplus {sorted(surplus)}")
        layer_by_prefix = dict(self._named_layers())
        for prefix, layer in layer_by_prefix.items():
            for local, tensor in layer.parameters():
                source = arrays[f"{prefix}.{local}"]
                if tuple(source.shape) != tensor.shape:
                    raise ArchiveError(
                        f"parameter {prefix}.{local}: archive shape {source.shape} "
                        f"!= model shape {tensor.shape}")
                tensor.data = np.ascontiguousarray(source, dtype=tensor.data.dtype)
            for local, _ in layer.state_extras():
                layer.load_state_extra(local, arrays[f"{prefix}.{local}"])

    def forward(self, batch: Mapping[str, Union[np.ndarray, Tensor]]) -> Tensor:
        features = []
        for domain in self.branches:
            if domain not in batch:
                raise DomainMismatchError(
                    f"model {self.config.id!r} needs {sorted(self.branches)} "
                    f"inputs, got {sorted(batch)}")
            x = batch[domain]
            if not isinstance(x, Tensor):
                x = Tensor(x)
            expected = self.input_shapes[domain]
            if x.shape[1:] != expected:
                raise DomainMismatchError(
                    f"domain {domain!r}: expected sample shape {expected}, "
                    f"got {x.shape[1:]}")
            for layer in self.branches[domain]:
                x = layer.forward(x, self.mode)
            features.append(x)
        h = features[0] if len(features) == 1 else ops.concat_flatten(features, "concat")
        for layer in self.fusion:
            h = layer.forward(h, self.mode)
        for layer in self.head:
            h = layer.forward(h, self.mode)
        return h

    def save(self, target) -> None:
        extra = {
            "kind": "icasift-model",
            "model_config": self.config.to_dict(),
            "input_shapes": {d: list(s) for d, s in self.input_shapes.items()},
            "seed": self.seed,
        }
        save_parameters(target, self.state_items(), extra=extra)


def load_model(source) -> Model:
    """Rebuild a model from an archive written by Model.save."""
    from .zoo import ModelConfig, build_model

    arrays, manifest = load_parameters(source)
    extra = manifest.get("extra", {})
    if extra.get("kind") != "icasift-model":
        raise ArchiveError("archive does not contain a model")
    config = ModelConfig.from_dict(extra["model_config"])
    input_shapes = {d: tuple(s) for d, s in extra["input_shapes"].items()}
    model = build_model(config, input_shapes, seed=int(extra.get("seed", 0)))
    model.load_state(arrays)
    return model


def predict_probabilities(model: Model, batches: Mapping[str, np.ndarray],
                          batch_size: int = 256) -> np.ndarray:
    """Eval-mode probabilities for a whole input set, computed off-graph."""
    n = next(iter(batches.values())).shape[0]
    previous_mode = model.mode
    model.set_mode("eval")
    try:
        chunks = []
        for start in range(0, n, batch_size):
            chunk = {d: arr[start:start + batch_size] for d, arr in batches.items()}
            chunks.append(model.forward(chunk).data)
        return np.concatenate(chunks, axis=0)
    finally:
        model.set_mode(previous_mode)
