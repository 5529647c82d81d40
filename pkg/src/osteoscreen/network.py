"""Multi-patch classifier: shared backbone, group fusion, attention, softmax head.

Eight landmark patches pass through one backbone whose weights are shared by
every patch slot. Features of bilaterally paired slots (1,2), (3,4), (5,6),
(7,8) are summed into four group features. In ``ATTENTION`` mode a small head
scores the groups, the scores become weights ``S = 4 * softmax(scores)`` (so
uniform attention is exactly 1 per group), and the classifier sees the
concatenation of the weighted group features. ``NO_ATTENTION`` concatenates
the group features unweighted and has no attention parameters at all.

Class index 0 is osteoporosis and 1 is normal, so ``probs[:, 0]`` is the
osteoporosis probability.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import read_kv, write_kv
from .errors import CheckpointError, DimensionError, InputError
from .tensor_core import Tensor, checkpoint, default_dtype, ops

OSTEOPOROSIS = 0
NORMAL = 1
LABEL_NAMES = {OSTEOPOROSIS: "OSTEOPOROSIS", NORMAL: "NORMAL"}
N_PATCHES = 8
N_GROUPS = 4


class Mode(str, enum.Enum):
    ATTENTION = "attention"
    NO_ATTENTION = "no-attention"


@dataclass(frozen=True)
class ConvStage:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    pool: int = 0  # max-pool window (and stride); 0 disables pooling

    def __str__(self) -> str:
        return f"{self.out_channels}:{self.kernel}:{self.stride}:{self.padding}:{self.pool}"

    @classmethod
    def parse(cls, text: str) -> "ConvStage":
        try:
            fields = [int(v) for v in text.split(":")]
        except ValueError as exc:
            raise InputError(f"bad conv stage {text!r}") from exc
        if len(fields) != 5:
            raise InputError(f"conv stage needs out:kernel:stride:padding:pool, got {text!r}")
        return cls(*fields)


DEFAULT_STAGES = (ConvStage(16, 5, 1, 2, 2), ConvStage(32, 3, 1, 1, 2), ConvStage(64, 3, 1, 1, 2))


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int = 224
    stages: tuple[ConvStage, ...] = DEFAULT_STAGES
    feature_dim: int = 128
    attention_hidden: int = 0  # 0 means "same as feature_dim"

    def __post_init__(self):
        if self.feature_dim < 8:
            raise InputError(f"feature_dim must be >= 8, got {self.feature_dim}")
        if self.input_side < 1 or not self.stages:
            raise InputError("need a positive input side and at least one conv stage")
        if not self.attention_hidden:
            object.__setattr__(self, "attention_hidden", self.feature_dim)
        self.output_side()

    def output_side(self) -> int:
        side = self.input_side
        for st in self.stages:
            side = (side + 2 * st.padding - st.kernel) // st.stride + 1
            if side < 1:
                raise InputError(f"conv stage {st} shrinks the input below 1 pixel")
            if st.pool:
                if st.pool > side:
                    raise InputError(f"pool window {st.pool} exceeds spatial size {side}")
                side = (side - st.pool) // st.pool + 1
        return side

    def flat_dim(self) -> int:
        return self.stages[-1].out_channels * self.output_side() ** 2

    def to_dict(self) -> dict[str, str]:
        return {
            "input_side": str(self.input_side),
            "stages": ",".join(str(s) for s in self.stages),
            "feature_dim": str(self.feature_dim),
            "attention_hidden": str(self.attention_hidden),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "BackboneConfig":
        try:
            return cls(
                input_side=int(d.get("input_side", 224)),
                stages=tuple(ConvStage.parse(s) for s in d["stages"].split(",")) if "stages" in d else DEFAULT_STAGES,
                feature_dim=int(d.get("feature_dim", 128)),
                attention_hidden=int(d.get("attention_hidden", 0)),
            )
        except ValueError as exc:
            raise InputError(f"bad model config: {exc}") from exc


# the desk-scale configuration used by gradient checks and synthetic experiments
TINY = BackboneConfig(input_side=16, stages=(ConvStage(4, 3, 1, 1, 2), ConvStage(8, 3, 1, 1, 2)), feature_dim=8)


def param_shapes(config: BackboneConfig, mode: Mode = Mode.ATTENTION) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 1
    for i, st in enumerate(config.stages):
        shapes[f"backbone.conv{i}.w"] = (st.out_channels, cin, st.kernel, st.kernel)
        shapes[f"backbone.conv{i}.b"] = (st.out_channels,)
        cin = st.out_channels
    d, h = config.feature_dim, config.attention_hidden
    shapes["backbone.fc.w"] = (config.flat_dim(), d)
    shapes["backbone.fc.b"] = (d,)
    if Mode(mode) is Mode.ATTENTION:
        for g in range(1, N_GROUPS + 1):
            shapes[f"group{g}.w"] = (d, d)
            shapes[f"group{g}.b"] = (d,)
        shapes["attn.fc1.w"] = (N_GROUPS * d, h)
        shapes["attn.fc1.b"] = (h,)
        shapes["attn.fc2.w"] = (h, N_GROUPS)
        shapes["attn.fc2.b"] = (N_GROUPS,)
    shapes["classifier.w"] = (N_GROUPS * d, 2)
    shapes["classifier.b"] = (2,)
    return shapes


@dataclass
class ModelParams:
    """All learnable tensors, keyed by name.

    There is exactly one ``backbone.*`` set; every patch slot reads it.
    """

    config: BackboneConfig
    mode: Mode
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def backbone(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("backbone.")}

    def head(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("backbone.")}

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.mode, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def save(self, path) -> None:
        """Write ``path`` (TSCK checkpoint) and ``path`` + ``.cfg`` (model config)."""
        path = Path(path)
        checkpoint.save(path, self.arrays())
        write_kv(config_path(path), {"mode": self.mode.value, **self.config.to_dict()}, header="model config")

    @classmethod
    def load(cls, path) -> "ModelParams":
        path = Path(path)
        cfg_file = config_path(path)
        if not cfg_file.exists():
            raise CheckpointError(f"missing model config {cfg_file}")
        raw = read_kv(cfg_file)
        mode = Mode(raw.pop("mode", Mode.ATTENTION.value))
        config = BackboneConfig.from_dict(raw)
        arrays = checkpoint.load(path)
        expected = param_shapes(config, mode)
        if set(arrays) != set(expected):
            raise CheckpointError(f"checkpoint arrays {sorted(set(arrays) ^ set(expected))} disagree with config")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise CheckpointError(f"{name}: checkpoint shape {arrays[name].shape} != config shape {shape}")
        return cls(config, mode, {k: Tensor(arrays[k], requires_grad=True) for k in expected})


def config_path(checkpoint_path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.name + ".cfg")


def init_params(config: BackboneConfig, rng: np.random.Generator, mode: Mode = Mode.ATTENTION, dtype=None) -> ModelParams:
    """He-uniform weights, zero biases, zero final attention layer (uniform ``S`` at start)."""
    dtype = np.dtype(dtype or default_dtype())
    tensors = {}
    for name, shape in param_shapes(config, mode).items():
        if name.endswith(".b") or name.startswith("attn.fc2"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            limit = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, Mode(mode), tensors)


# ---------------------------------------------------------------- forward pieces


def backbone(x: Tensor, params: ModelParams) -> Tensor:
    """Map one patch slot ``[N, 1, side, side]`` to features ``[N, feature_dim]``."""
    h = x
    for i, st in enumerate(params.config.stages):
        h = ops.conv2d(h, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"], stride=st.stride, padding=st.padding)
        h = ops.relu(h)
        if st.pool:
            h = ops.maxpool2d(h, st.pool, st.pool)
    h = ops.reshape(h, (h.shape[0], -1))
    return ops.affine(h, params["backbone.fc.w"], params["backbone.fc.b"])


def as_patch_slots(patches, dtype=None) -> list[Tensor]:
    """Accept ``[N, 8, side, side]`` or eight ``[N, 1, side, side]`` arrays/tensors."""
    if isinstance(patches, np.ndarray):
        if patches.ndim != 4:
            raise DimensionError(f"patch batch must be [N, 8, side, side], got {patches.shape}")
        if patches.shape[1] != N_PATCHES:
            raise InputError(f"expected {N_PATCHES} patches per sample, got {patches.shape[1]}")
        dtype = dtype or default_dtype()
        return [Tensor(patches[:, i:i + 1], dtype=dtype) for i in range(N_PATCHES)]
    slots = [p if isinstance(p, Tensor) else Tensor(p, dtype=dtype) for p in patches]
    if len(slots) != N_PATCHES:
        raise InputError(f"expected {N_PATCHES} patches per sample, got {len(slots)}")
    return slots


def extract_features(patches, params: ModelParams) -> list[Tensor]:
    slots = as_patch_slots(patches, params.dtype)
    ref = slots[0].shape
    side = params.config.input_side
    for p in slots:
        if p.data.ndim != 4 or p.shape != ref or p.shape[1:] != (1, side, side):
            raise DimensionError(f"patch shape {p.shape} != [N, 1, {side}, {side}] shared by all slots")
    return [backbone(p, params) for p in slots]


def fuse_groups(features: Sequence[Tensor]) -> list[Tensor]:
    if len(features) != N_PATCHES:
        raise InputError(f"expected {N_PATCHES} features, got {len(features)}")
    return [ops.add(features[2 * g], features[2 * g + 1]) for g in range(N_GROUPS)]


def attention_scores(groups: Sequence[Tensor], params: ModelParams) -> Tensor:
    transformed = [ops.affine(F, params[f"group{g + 1}.w"], params[f"group{g + 1}.b"]) for g, F in enumerate(groups)]
    h = ops.relu(ops.affine(ops.concat(transformed), params["attn.fc1.w"], params["attn.fc1.b"]))
    return ops.affine(h, params["attn.fc2.w"], params["attn.fc2.b"])


def normalize_attention(scores: Tensor) -> Tensor:
    return ops.scale(ops.softmax(scores), float(N_GROUPS))


def attention_weights(groups: Sequence[Tensor], params: ModelParams) -> Tensor:
    """Per-sample group weights ``S`` of shape ``[N, 4]``; rows are >= 0 and sum to 4."""
    return normalize_attention(attention_scores(groups, params))


def weighted_concat(groups: Sequence[Tensor], S: Tensor) -> Tensor:
    if S.data.ndim != 2 or S.shape[1] != N_GROUPS:
        raise DimensionError(f"attention must be [N, {N_GROUPS}], got {S.shape}")
    return ops.concat([ops.scale(F, ops.slice_along(S, g, g + 1)) for g, F in enumerate(groups)])


def classifier_logits(phi: Tensor, params: ModelParams) -> Tensor:
    w = params["classifier.w"]
    if phi.shape[1] != w.shape[0]:
        raise DimensionError(f"feature width {phi.shape[1]} != classifier input {w.shape[0]}")
    return ops.affine(phi, w, params["classifier.b"])


@dataclass
class Prediction:
    probs: np.ndarray  # [N, 2] columns (osteoporosis, normal)
    labels: np.ndarray  # [N] class indices
    attention: np.ndarray  # [N, 4]

    def __len__(self) -> int:
        return len(self.labels)


def decide(probs: np.ndarray) -> np.ndarray:
    """Osteoporosis only when its probability is strictly larger; exact ties are NORMAL."""
    probs = np.asarray(probs)
    return np.where(probs[:, OSTEOPOROSIS] > probs[:, NORMAL], OSTEOPOROSIS, NORMAL)


def classify(phi: Tensor, params: ModelParams, attention: np.ndarray | None = None) -> Prediction:
    probs = ops.softmax(classifier_logits(phi, params)).data
    att = np.ones((phi.shape[0], N_GROUPS), dtype=probs.dtype) if attention is None else np.asarray(attention)
    return Prediction(probs.copy(), decide(probs), att.copy())


def forward_logits(patches, params: ModelParams, mode: Mode | str | None = None) -> tuple[Tensor, Tensor | None]:
    """Logits ``[N, 2]`` and, in attention mode, the weights ``S`` ``[N, 4]``."""
    mode = Mode(mode or params.mode)
    if mode is Mode.ATTENTION and params.mode is not Mode.ATTENTION:
        raise InputError("parameters were built without an attention head")
    groups = fuse_groups(extract_features(patches, params))
    if mode is Mode.ATTENTION:
        S = attention_weights(groups, params)
        phi = weighted_concat(groups, S)
    else:
        S = None
        phi = ops.concat(groups)
    return classifier_logits(phi, params), S


def forward(patches, params: ModelParams, mode: Mode | str | None = None) -> Prediction:
    logits, S = forward_logits(patches, params, mode)
    probs = ops.softmax(logits).data
    att = S.data if S is not None else np.ones((probs.shape[0], N_GROUPS), dtype=probs.dtype)
    return Prediction(probs.copy(), decide(probs), att.copy())
