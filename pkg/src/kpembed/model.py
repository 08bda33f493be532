"""Model assembly: backbone, per-keypoint attention blocks, and heads.

One block is assigned to each keypoint. A block rescales the backbone
feature map with a channel-attention vector, selects ``d`` channels with a
1x1 convolution, and feeds the result to two heads: a small embedding head
(global max pool + fully connected) and a heatmap decoder (transposed
convolutions up to the heatmap resolution, ending in raw logits). The K
per-keypoint embeddings are concatenated, in keypoint order, into one
aligned embedding; a single linear classifier produces class scores from
it. Blocks do not share weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    BatchNormState,
    Tensor,
    batch_norm,
    concat,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    global_max_pool,
    linear,
)

__all__ = [
    "ModelConfig",
    "ParameterStore",
    "ChannelAttention",
    "KeypointBlock",
    "KeypointEmbeddingNet",
    "BackboneHead",
    "AlignedEmbedding",
    "ForwardResult",
]

VARIANTS = ("full", "no_attention", "no_blocks")


@dataclass
class ModelConfig:
    """Static shape and architecture description.

    ``backbone_channels`` lists the output channels of each stride-2 stage;
    the final entry is the feature channel count C, and the feature map is
    input_size / 2**len(backbone_channels) on each side. The per-keypoint
    subvector length is d = C // reduction.
    """

    keypoint_names: list[str]
    num_classes: int
    input_size: tuple[int, int] = (64, 64)
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    reduction: int = 8
    heatmap_size: tuple[int, int] = (16, 16)
    variant: str = "full"
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        if not self.keypoint_names:
            raise ConfigError("at least one keypoint name is required")
        if len(set(self.keypoint_names)) != len(self.keypoint_names):
            raise ConfigError("keypoint names must be unique")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if self.channels % self.reduction != 0:
            raise ConfigError(
                f"feature channels {self.channels} must be divisible by reduction {self.reduction}"
            )
        down = 2 ** len(self.backbone_channels)
        for side, name in zip(self.input_size, ("height", "width")):
            if side % down != 0:
                raise ConfigError(
                    f"input {name} {side} must be divisible by the backbone downsampling {down}"
                )
        fh, fw = self.feature_size
        hh, hw = self.heatmap_size
        if hh < fh or hw < fw:
            raise ConfigError(
                f"heatmap size {self.heatmap_size} must be at least the feature size {(fh, fw)}"
            )
        if hh * fw != hw * fh:
            raise ConfigError("heatmap and feature sizes must have equal aspect ratios")
        ratio = hh // fh
        if fh * ratio != hh or ratio & (ratio - 1) != 0:
            raise ConfigError(
                f"heatmap/feature size ratio {hh}/{fh} must be a power of two"
            )
        ih, iw = self.input_size
        if ih % hh != 0 or iw % hw != 0:
            raise ConfigError(
                f"heatmap size {self.heatmap_size} must divide input size {self.input_size}"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)

    @property
    def channels(self) -> int:
        return self.backbone_channels[-1]

    @property
    def subvector_length(self) -> int:
        return self.channels // self.reduction

    @property
    def embedding_length(self) -> int:
        return self.num_keypoints * self.subvector_length

    @property
    def feature_size(self) -> tuple[int, int]:
        down = 2 ** len(self.backbone_channels)
        return self.input_size[0] // down, self.input_size[1] // down

    @property
    def decoder_stages(self) -> int:
        return int(math.log2(self.heatmap_size[0] // self.feature_size[0]))

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class ParameterStore:
    """Named map of trainable tensors with deterministic (sorted) iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def select(self, prefixes: list[str]) -> dict[str, Tensor]:
        """Parameters whose name starts with any of the prefixes."""
        return {
            name: t
            for name, t in self.items()
            if any(name.startswith(p) for p in prefixes)
        }

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.zero_grad()


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    """Fully connected layer; ``bias=False`` when batch norm follows, since
    normalization would cancel a constant shift anyway."""

    def __init__(self, store, prefix, in_features, out_features, rng, dtype, bias=True):
        self.weight = store.add(
            f"{prefix}.weight", _he_uniform(rng, (out_features, in_features), in_features, dtype)
        )
        if bias:
            self.bias = store.add(f"{prefix}.bias", np.zeros(out_features, dtype=dtype))
        else:
            self.bias = Tensor(np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d:
    def __init__(self, store, prefix, in_ch, out_ch, kernel, stride, padding, rng, dtype, bias=True):
        fan_in = in_ch * kernel * kernel
        self.weight = store.add(
            f"{prefix}.weight",
            _he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype),
        )
        if bias:
            self.bias = store.add(f"{prefix}.bias", np.zeros(out_ch, dtype=dtype))
        else:
            self.bias = Tensor(np.zeros(out_ch, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d:
    def __init__(self, store, prefix, in_ch, out_ch, kernel, stride, padding, rng, dtype, bias=True):
        fan_in = in_ch * kernel * kernel
        self.weight = store.add(
            f"{prefix}.weight",
            _he_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in, dtype),
        )
        if bias:
            self.bias = store.add(f"{prefix}.bias", np.zeros(out_ch, dtype=dtype))
        else:
            self.bias = Tensor(np.zeros(out_ch, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm:
    def __init__(self, store, buffers, prefix, features, momentum, epsilon, dtype):
        self.gamma = store.add(f"{prefix}.gamma", np.ones(features, dtype=dtype))
        self.beta = store.add(f"{prefix}.beta", np.zeros(features, dtype=dtype))
        self.state = BatchNormState(features, dtype=dtype)
        buffers[prefix] = self.state
        self.momentum = momentum
        self.epsilon = epsilon

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, mode, self.momentum, self.epsilon)


class ChannelAttention:
    """Shared two-layer network over average- and max-pooled features.

    Each fully connected layer is followed by ReLU and batch normalization;
    the two branch outputs are summed and squashed with a sigmoid, giving a
    per-channel weight vector strictly inside (0, 1).
    """

    def __init__(self, store, buffers, prefix, channels, hidden, cfg, rng):
        dtype = cfg.np_dtype
        self.fc1 = Linear(store, f"{prefix}.fc1", channels, hidden, rng, dtype, bias=False)
        self.bn1 = BatchNorm(
            store, buffers, f"{prefix}.bn1", hidden, cfg.bn_momentum, cfg.bn_epsilon, dtype
        )
        self.fc2 = Linear(store, f"{prefix}.fc2", hidden, channels, rng, dtype, bias=False)
        self.bn2 = BatchNorm(
            store, buffers, f"{prefix}.bn2", channels, cfg.bn_momentum, cfg.bn_epsilon, dtype
        )

    def _shared(self, pooled: Tensor, mode: str) -> Tensor:
        z = self.bn1(self.fc1(pooled).relu(), mode)
        return self.bn2(self.fc2(z).relu(), mode)

    def __call__(self, features: Tensor, mode: str) -> Tensor:
        avg_branch = self._shared(global_avg_pool(features), mode)
        max_branch = self._shared(global_max_pool(features), mode)
        return (avg_branch + max_branch).sigmoid()


class KeypointBlock:
    """Per-keypoint subnetwork: channel rescaling, channel selection, and
    the embedding / heatmap-reconstruction heads."""

    def __init__(self, store, buffers, prefix, cfg: ModelConfig, rng, use_attention=True):
        dtype = cfg.np_dtype
        c, d = cfg.channels, cfg.subvector_length
        self.use_attention = use_attention
        if use_attention:
            self.attention = ChannelAttention(store, buffers, f"{prefix}.attention", c, d, cfg, rng)
        self.select = Conv2d(store, f"{prefix}.select", c, d, 1, 1, 0, rng, dtype)
        self.embed_fc = Linear(store, f"{prefix}.embed", d, d, rng, dtype)
        self.decoder = _build_decoder(store, buffers, f"{prefix}.decoder", d, 1, cfg, rng)

    def compute_attention(self, features: Tensor, mode: str) -> Tensor:
        if not self.use_attention:
            raise ConfigError("this block was built without channel attention")
        return self.attention(features, mode)

    def selected_features(self, features: Tensor, mode: str, attention: Tensor | None = None) -> Tensor:
        if self.use_attention:
            if attention is None:
                attention = self.compute_attention(features, mode)
            n, c = attention.shape
            features = features * attention.reshape(n, c, 1, 1)
        return self.select(features)

    def forward(
        self,
        features: Tensor,
        mode: str,
        decode: bool = True,
        attention: Tensor | None = None,
    ) -> tuple[Tensor, Tensor | None]:
        reduced = self.selected_features(features, mode, attention)
        embedding = self.embed_fc(global_max_pool(reduced))
        logits = self.decoder(reduced, mode) if decode else None
        return embedding, logits


class _Decoder:
    def __init__(self, stages, final):
        self.stages = stages
        self.final = final

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        for up, bn in self.stages:
            x = bn(up(x), mode).relu()
        return self.final(x)


def _build_decoder(store, buffers, prefix, in_ch, out_ch, cfg: ModelConfig, rng) -> _Decoder:
    dtype = cfg.np_dtype
    stages = []
    for s in range(cfg.decoder_stages):
        up = ConvTranspose2d(store, f"{prefix}.up{s}", in_ch, in_ch, 4, 2, 1, rng, dtype, bias=False)
        bn = BatchNorm(
            store, buffers, f"{prefix}.up{s}.bn", in_ch, cfg.bn_momentum, cfg.bn_epsilon, dtype
        )
        stages.append((up, bn))
    final = Conv2d(store, f"{prefix}.out", in_ch, out_ch, 1, 1, 0, rng, dtype)
    return _Decoder(stages, final)


@dataclass
class AlignedEmbedding:
    """An (N, K*d) embedding whose i-th length-d slice belongs to keypoint i."""

    vector: Tensor
    num_keypoints: int
    subvector_length: int

    def __post_init__(self):
        expect = self.num_keypoints * self.subvector_length
        if self.vector.shape[1] != expect:
            raise ShapeError(
                f"embedding width {self.vector.shape[1]} != K*d = {expect}"
            )

    def subvector(self, i: int) -> Tensor:
        d = self.subvector_length
        return self.vector[:, i * d : (i + 1) * d]


@dataclass
class ForwardResult:
    embedding: AlignedEmbedding
    class_scores: Tensor | None = None
    heatmap_logits: Tensor | None = None
    attention: list[Tensor] = field(default_factory=list)


class KeypointEmbeddingNet:
    """Backbone + K keypoint blocks + classifier.

    ``variant`` selects the full model, a model whose blocks skip channel
    rescaling ("no_attention"), or a model without per-keypoint blocks
    ("no_blocks") where the embedding and all K heatmaps are produced
    directly from the shared backbone feature map.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParameterStore()
        self.buffers: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        dtype = cfg.np_dtype

        self.backbone = []
        in_ch = 3
        for i, out_ch in enumerate(cfg.backbone_channels):
            conv = Conv2d(self.store, f"backbone.stage{i}.conv", in_ch, out_ch, 4, 2, 1, rng, dtype, bias=False)
            bn = BatchNorm(
                self.store, self.buffers, f"backbone.stage{i}.bn",
                out_ch, cfg.bn_momentum, cfg.bn_epsilon, dtype,
            )
            self.backbone.append((conv, bn))
            in_ch = out_ch

        k, d, c = cfg.num_keypoints, cfg.subvector_length, cfg.channels
        if cfg.variant == "no_blocks":
            self.blocks = []
            self.shared_embed = Linear(self.store, "shared.embed", c, k * d, rng, dtype)
            self.shared_decoder = _build_decoder(
                self.store, self.buffers, "shared.decoder", c, k, cfg, rng
            )
        else:
            use_attention = cfg.variant == "full"
            self.blocks = [
                KeypointBlock(
                    self.store, self.buffers, f"blocks.{i:02d}", cfg, rng, use_attention
                )
                for i in range(k)
            ]
        self.classifier = Linear(self.store, "classifier", k * d, cfg.num_classes, rng, dtype)

    # -- forward -----------------------------------------------------------

    def backbone_forward(self, images: Tensor, mode: str) -> Tensor:
        ih, iw = self.cfg.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (ih, iw):
            raise ConfigError(
                f"expected images of shape (N, 3, {ih}, {iw}), got {images.shape}"
            )
        x = images
        for conv, bn in self.backbone:
            x = bn(conv(x), mode).relu()
        return x

    def forward(self, images: Tensor, mode: str = "train", heads: bool | None = None) -> ForwardResult:
        """Run the network. ``heads`` controls whether the decoders and the
        classifier run; by default they run in train mode only (inference
        needs just the embedding)."""
        if heads is None:
            heads = mode == "train"
        features = self.backbone_forward(images, mode)
        k, d = self.cfg.num_keypoints, self.cfg.subvector_length

        if self.cfg.variant == "no_blocks":
            vector = self.shared_embed(global_max_pool(features))
            embedding = AlignedEmbedding(vector, k, d)
            if not heads:
                return ForwardResult(embedding)
            return ForwardResult(
                embedding,
                class_scores=self.classifier(vector),
                heatmap_logits=self.shared_decoder(features, mode),
            )

        parts = []
        logit_maps = []
        attentions = []
        for block in self.blocks:
            att = block.compute_attention(features, mode) if block.use_attention else None
            emb, logits = block.forward(features, mode, decode=heads, attention=att)
            parts.append(emb)
            if att is not None:
                attentions.append(att)
            if logits is not None:
                logit_maps.append(logits)
        vector = concat(parts, axis=1)
        embedding = AlignedEmbedding(vector, k, d)
        if not heads:
            return ForwardResult(embedding, attention=attentions)
        return ForwardResult(
            embedding,
            class_scores=self.classifier(vector),
            heatmap_logits=concat(logit_maps, axis=1),
            attention=attentions,
        )


class BackboneHead:
    """Temporary embedding/classifier pair used while fine-tuning the bare
    backbone (discarded afterwards); pools features and maps them through
    one fully connected layer per head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        dtype = cfg.np_dtype
        c = cfg.channels
        self.embed = Linear(self.store, "head.embed", c, c, rng, dtype)
        self.classify = Linear(self.store, "head.classify", c, cfg.num_classes, rng, dtype)

    def forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        pooled = global_avg_pool(features)
        vector = self.embed(pooled)
        return vector, self.classify(vector)
