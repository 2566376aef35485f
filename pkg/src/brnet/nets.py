"""Feature extractor, classifier and bias-predictor networks.

Parameters live in plain ``dict[str, np.ndarray]`` sets, one per network, so
an optimizer can own exactly one set and never touch the others.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, FormatError

MAGIC = b"BRNT"
FORMAT_VERSION = 1

ParamSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class ArchitectureSpec:
    input_hw: tuple[int, int] = (32, 32)
    channels: tuple[int, int, int] = (8, 16, 32)
    classifier_hidden: int = 16
    bp_hidden: int = 16
    hidden_activation: str = "tanh"
    n_classes: int = 2
    n_protected: int = 1

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ContractViolation("the feature extractor has exactly three conv stacks")
        h, w = self.input_hw
        if h % 8 or w % 8:
            raise ContractViolation(f"input size {h}x{w} must be divisible by 8 for three 2x2 poolings")
        if self.n_classes < 2:
            raise ContractViolation("n_classes must be >= 2")
        if self.n_protected < 1:
            raise ContractViolation("n_protected must be >= 1")
        if self.hidden_activation not in ad.ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.hidden_activation!r}")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        d = json.loads(text)
        d["input_hw"] = tuple(d["input_hw"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class ModelParams:
    theta_rl: ParamSet
    theta_c: ParamSet
    theta_bp: ParamSet
    spec: ArchitectureSpec = field(default_factory=ArchitectureSpec)

    def sets(self) -> Iterator[tuple[str, ParamSet]]:
        yield "theta_rl", self.theta_rl
        yield "theta_c", self.theta_c
        yield "theta_bp", self.theta_bp

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.theta_rl.items()},
            {k: v.copy() for k, v in self.theta_c.items()},
            {k: v.copy() for k, v in self.theta_bp.items()},
            self.spec,
        )

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of every parameter array."""
        for (_, a), (_, b) in zip(self.sets(), other.sets()):
            if a.keys() != b.keys():
                return False
            if not all(np.array_equal(a[k], b[k]) for k in a):
                return False
        return self.spec == other.spec


def param_shapes(spec: ArchitectureSpec) -> dict[str, dict[str, tuple[int, ...]]]:
    """Shapes of every parameter, keyed by set then name, in canonical order."""
    rl: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, c_out in enumerate(spec.channels):
        rl[f"conv{i}.w"] = (c_out, c_in, 2, 2)
        rl[f"conv{i}.b"] = (c_out,)
        c_in = c_out
    F = spec.feature_dim

    def head(hidden: int, out: int) -> dict[str, tuple[int, ...]]:
        return {"hidden.w": (hidden, F), "hidden.b": (hidden,), "out.w": (out, hidden), "out.b": (out,)}

    return {
        "theta_rl": rl,
        "theta_c": head(spec.classifier_hidden, spec.n_classes),
        "theta_bp": head(spec.bp_hidden, spec.n_protected),
    }


def glorot_limit(shape: tuple[int, ...]) -> float:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_out, fan_in = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(spec: ArchitectureSpec, seed: Union[int, np.random.Generator]) -> ModelParams:
    """Glorot-uniform weights and zero biases, drawn in canonical parameter order."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sets: dict[str, ParamSet] = {}
    for set_name, shapes in param_shapes(spec).items():
        ps: ParamSet = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                ps[name] = np.zeros(shape)
            else:
                lim = glorot_limit(shape)
                ps[name] = rng.uniform(-lim, lim, size=shape)
        sets[set_name] = ps
    return ModelParams(sets["theta_rl"], sets["theta_c"], sets["theta_bp"], spec)


def leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap a parameter set as tensors sharing the underlying arrays."""
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _as_tensors(params: Mapping) -> Mapping[str, Tensor]:
    if params and not isinstance(next(iter(params.values())), Tensor):
        return leaves(params, requires_grad=False)
    return params


def rl_forward(images: Tensor, theta_rl: Mapping, spec: ArchitectureSpec = ArchitectureSpec()) -> Tensor:
    """Three conv/ReLU/max-pool stacks followed by global average pooling."""
    if images.data.ndim != 4 or images.shape[1] != 1 or images.shape[2:] != tuple(spec.input_hw):
        raise ContractViolation(
            f"images must be [B,1,{spec.input_hw[0]},{spec.input_hw[1]}], got {images.shape}"
        )
    p = _as_tensors(theta_rl)
    h = images
    for i in range(len(spec.channels)):
        h = ad.conv2x2(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        # relu commutes with max; pooling first runs relu on a 4x smaller map
        h = ad.relu(ad.maxpool2x2(h))
    return ad.global_avg_pool(h)


def _head(features: Tensor, p: Mapping[str, Tensor], activation: str) -> Tensor:
    hidden = ad.elementwise(ad.dense(features, p["hidden.w"], p["hidden.b"]), activation)
    return ad.dense(hidden, p["out.w"], p["out.b"])


def _check_features(features: Tensor, spec: ArchitectureSpec) -> None:
    if features.data.ndim != 2 or features.shape[1] != spec.feature_dim:
        raise ContractViolation(f"features must be [B,{spec.feature_dim}], got {features.shape}")


def c_forward(features: Tensor, theta_c: Mapping, spec: ArchitectureSpec = ArchitectureSpec()) -> Tensor:
    """Class logits (no softmax)."""
    _check_features(features, spec)
    return _head(features, _as_tensors(theta_c), spec.hidden_activation)


def bp_forward(features: Tensor, theta_bp: Mapping, spec: ArchitectureSpec = ArchitectureSpec()) -> Tensor:
    """Linear-output prediction of the protected variables."""
    _check_features(features, spec)
    return _head(features, _as_tensors(theta_bp), spec.hidden_activation)


# ---------------------------------------------------------------------------
# serialization


def _ordered_arrays(params: ModelParams) -> Iterator[np.ndarray]:
    shapes = param_shapes(params.spec)
    for set_name, ps in params.sets():
        for name in shapes[set_name]:
            yield ps[name]


def dumps_model(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    spec_json = params.spec.to_json().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(spec_json)))
    buf.write(spec_json)
    for arr in _ordered_arrays(params):
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_model(blob: bytes) -> ModelParams:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated model file while reading {what}", pos)
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError("not a BRNT model file", 0)
    version, spec_len = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}", 4)
    spec_at = pos
    try:
        spec = ArchitectureSpec.from_json(take(spec_len, "architecture").decode("utf-8"))
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"bad architecture record: {exc}", spec_at) from None
    sets: dict[str, ParamSet] = {}
    for set_name, shapes in param_shapes(spec).items():
        ps: ParamSet = {}
        for name, shape in shapes.items():
            at = pos
            (rank,) = struct.unpack("<I", take(4, name))
            dims = struct.unpack(f"<{rank}I", take(4 * rank, name))
            if dims != shape:
                raise FormatError(f"{set_name}.{name} has shape {dims}, expected {shape}", at)
            n = int(np.prod(dims))
            ps[name] = np.frombuffer(take(8 * n, name), dtype="<f8").astype(np.float64).reshape(dims)
        sets[set_name] = ps
    if pos != len(blob):
        raise FormatError("trailing bytes after last parameter", pos)
    return ModelParams(sets["theta_rl"], sets["theta_c"], sets["theta_bp"], spec)


def save_model(params: ModelParams, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps_model(params))


def load_model(path: Union[str, Path]) -> ModelParams:
    return loads_model(Path(path).read_bytes())
