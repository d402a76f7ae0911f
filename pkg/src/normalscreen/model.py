"""Screening network: feature stem, cascaded dilated residual blocks, sigmoid head.

Layout (train mode)::

    image -> stem (3 x [5x5 conv stride 2, ReLU], per-channel standardization)
          -> Gaussian noise
          -> DilatedResBlock x num_blocks -> global average pool
          -> dropout -> dense(C -> 1) -> sigmoid

The stem's standardization is a fixed per-channel affine map, calibrated
once from training images by :func:`calibrate_stem` so stem features have
zero mean and unit variance per channel (the scale the noise layer assumes).
It is never updated by the optimizer.

With ``stem="precomputed-features"`` the stem is skipped and :func:`forward`
takes feature maps ``[N, stem_out_channels, h, w]`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import EVAL, TRAIN, RngState, ShapeError, Tensor

RANDOM_STEM = "random-stem"
STEM_NORM = "stem.norm."
PRECOMPUTED = "precomputed-features"


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    branch_channels: int
    kernel: int = 5
    dilation: int = 2
    spatial_dropout_rate: float = 0.2
    post_add_activation: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.branch_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.dilation < 1:
            raise ValueError("kernel and dilation must be >= 1")
        if not 0 <= self.spatial_dropout_rate < 1:
            raise ValueError("spatial_dropout_rate must be in [0, 1)")

    @property
    def needs_projection(self) -> bool:
        return 2 * self.branch_channels != self.in_channels


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (128, 128)
    stem: str = RANDOM_STEM
    stem_out_channels: int = 320
    num_blocks: int = 4
    spatial_dropout_rate: float = 0.2
    head_dropout_rate: float = 0.5
    noise_sigma: float = 1.0
    post_add_activation: bool = True
    kernel: int = 5
    dilation: int = 2
    # channel widths of the first two stem stages; the third is stem_out_channels
    stem_channels: tuple[int, int] = (64, 128)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "stem_channels", tuple(int(v) for v in self.stem_channels))
        if self.stem not in (RANDOM_STEM, PRECOMPUTED):
            raise ValueError(f"unknown stem {self.stem!r}")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.stem_out_channels < 2 or self.stem_out_channels % 2:
            raise ValueError(f"stem_out_channels must be even, got {self.stem_out_channels}")
        if len(self.stem_channels) != 2 or min(self.stem_channels) < 1:
            raise ValueError("stem_channels must be two positive ints")
        if not 0 <= self.head_dropout_rate < 1:
            raise ValueError("head_dropout_rate must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if min(self.input_size) < 1:
            raise ValueError("input_size must be positive")

    def block_config(self) -> BlockConfig:
        return BlockConfig(
            in_channels=self.stem_out_channels,
            branch_channels=self.stem_out_channels // 2,
            kernel=self.kernel,
            dilation=self.dilation,
            spatial_dropout_rate=self.spatial_dropout_rate,
            post_add_activation=self.post_add_activation,
        )

    @property
    def feature_size(self) -> tuple[int, int]:
        """Spatial size of the stem output (three stride-2 'same' convolutions)."""
        h, w = self.input_size
        for _ in range(3):
            h, w = -(-h // 2), -(-w // 2)
        return h, w


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.frozen |= {k for k in self.params if k.startswith(STEM_NORM)}

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def freeze_stem(self):
        self.frozen |= {k for k in self.params if k.startswith("stem.")}

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, arr in state.items():
            self.params[k].data = np.array(arr, dtype=self.params[k].dtype, copy=True)


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _conv_params(params, name, rng, f, c, k, dtype):
    params[f"{name}.kernel"] = ad.parameter(_he_normal(rng, (f, c, k, k), c * k * k, dtype),
                                            name=f"{name}.kernel")
    params[f"{name}.bias"] = ad.parameter(np.zeros(f, dtype=dtype), name=f"{name}.bias")


def block_parameters(cfg: BlockConfig, prefix: str, rng: np.random.Generator,
                     dtype="float32") -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    c, b, k = cfg.in_channels, cfg.branch_channels, cfg.kernel
    _conv_params(params, f"{prefix}.conv", rng, b, c, k, dtype)
    _conv_params(params, f"{prefix}.dilated", rng, b, c, k, dtype)
    if cfg.needs_projection:
        _conv_params(params, f"{prefix}.proj", rng, 2 * b, c, 1, dtype)
    return params


def build_model(cfg: ModelConfig, rng: RngState) -> Model:
    """Create a model: fan-in scaled normal conv kernels, zero biases, zero head weights."""
    gen = rng.generator
    dtype = np.dtype(cfg.dtype)
    params: dict[str, Tensor] = {}
    if cfg.stem == RANDOM_STEM:
        widths = (1, *cfg.stem_channels, cfg.stem_out_channels)
        for i in range(3):
            _conv_params(params, f"stem.conv{i}", gen, widths[i + 1], widths[i], 5, dtype)
        c = cfg.stem_out_channels
        params[STEM_NORM + "scale"] = Tensor(np.ones(c, dtype=dtype), name=STEM_NORM + "scale")
        params[STEM_NORM + "shift"] = Tensor(np.zeros(c, dtype=dtype), name=STEM_NORM + "shift")
    bcfg = cfg.block_config()
    for i in range(cfg.num_blocks):
        params.update(block_parameters(bcfg, f"block{i}", gen, dtype))
    c = cfg.stem_out_channels
    # zero head: the first predictions are all 0.5, so early updates are not
    # dominated by a large random logit on unit-scale features
    params["head.weight"] = ad.parameter(np.zeros((c, 1), dtype=dtype), name="head.weight")
    params["head.bias"] = ad.parameter(np.zeros(1, dtype=dtype), name="head.bias")
    return Model(cfg, params)


def dilated_resnet_block(x: Tensor, cfg: BlockConfig, params: dict[str, Tensor], prefix: str,
                         mode: str, rng: RngState | None) -> Tensor:
    """One block: parallel plain and dilated 5x5 convolutions, concatenated,
    spatially dropped out, added to the (optionally projected) input, then ReLU.
    """
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"{prefix}: expected {cfg.in_channels} input channels, got shape {x.shape}")
    a = ad.conv2d(x, params[f"{prefix}.conv.kernel"], params[f"{prefix}.conv.bias"],
                  dilation=1, padding="same")
    b = ad.conv2d(x, params[f"{prefix}.dilated.kernel"], params[f"{prefix}.dilated.bias"],
                  dilation=cfg.dilation, padding="same")
    branches = ad.spatial_dropout(ad.concat_channels(a, b), cfg.spatial_dropout_rate, mode, rng)
    skip = x
    if cfg.needs_projection:
        key = f"{prefix}.proj.kernel"
        if key not in params:
            raise ShapeError(f"{prefix}: channel mismatch {cfg.in_channels} vs "
                             f"{2 * cfg.branch_channels} and no projection parameters")
        skip = ad.conv2d(x, params[key], params[f"{prefix}.proj.bias"], padding="same")
    out = ad.add(branches, skip)
    return ad.relu(out) if cfg.post_add_activation else out


def _stem_convs(model: Model, batch: Tensor) -> Tensor:
    p = model.params
    h = batch
    for i in range(3):
        h = ad.relu(ad.conv2d(h, p[f"stem.conv{i}.kernel"], p[f"stem.conv{i}.bias"],
                              stride=2, padding="same"))
    return h


def stem_forward(model: Model, batch) -> Tensor:
    """Stem features ``[N, stem_out_channels, h, w]`` for images ``[N,1,H,W]``."""
    p = model.params
    x = ad.as_tensor(batch)
    if x.dtype != np.dtype(model.config.dtype):
        x = Tensor(x.data.astype(model.config.dtype))
    return ad.channel_affine(_stem_convs(model, x), p[STEM_NORM + "scale"], p[STEM_NORM + "shift"])


def calibrate_stem(model: Model, images: np.ndarray, batch_size: int = 64,
                   min_std: float = 1e-3) -> Model:
    """Set the stem standardization from images ``[N,1,H,W]``.

    Channels whose spread is below ``min_std`` (e.g. dead after ReLU) keep a
    unit scale so they are not blown up.
    """
    if model.config.stem != RANDOM_STEM:
        return model
    total = None
    count = 0
    sq = None
    for i in range(0, len(images), batch_size):
        x = Tensor(np.asarray(images[i:i + batch_size], dtype=np.float64))
        h = _stem_convs(_as_float64(model), x).data
        s1 = h.sum(axis=(0, 2, 3))
        s2 = (h * h).sum(axis=(0, 2, 3))
        total = s1 if total is None else total + s1
        sq = s2 if sq is None else sq + s2
        count += h.shape[0] * h.shape[2] * h.shape[3]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
    scale = np.where(std > min_std, 1.0 / np.maximum(std, min_std), 1.0)
    dtype = model.config.dtype
    model.params[STEM_NORM + "scale"].data = scale.astype(dtype)
    model.params[STEM_NORM + "shift"].data = (-mean * scale).astype(dtype)
    return model


def _as_float64(model: Model) -> Model:
    params = {k: Tensor(v.data.astype(np.float64)) for k, v in model.params.items()}
    return Model(replace(model.config, dtype="float64"), params)


def forward(model: Model, batch, mode: str = EVAL, rng: RngState | None = None) -> Tensor:
    """Probabilities ``[N, 1]`` for a batch of images ``[N,1,H,W]`` (or stem features)."""
    cfg = model.config
    x = ad.as_tensor(batch)
    if x.dtype != np.dtype(cfg.dtype):
        x = Tensor(x.data.astype(cfg.dtype))
    if mode == TRAIN and rng is None and (cfg.noise_sigma > 0 or cfg.head_dropout_rate > 0
                                          or cfg.spatial_dropout_rate > 0):
        raise ValueError("train mode needs an RngState")
    if cfg.stem == RANDOM_STEM:
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != cfg.input_size:
            raise ShapeError(f"forward: expected [N,1,{cfg.input_size[0]},{cfg.input_size[1]}], "
                             f"got {x.shape}")
        h = stem_forward(model, x)
    else:
        if x.data.ndim != 4 or x.shape[1] != cfg.stem_out_channels:
            raise ShapeError(f"forward: expected features with {cfg.stem_out_channels} channels, "
                             f"got {x.shape}")
        h = x
    h = ad.gaussian_noise(h, cfg.noise_sigma, mode, rng)
    bcfg = cfg.block_config()
    for i in range(cfg.num_blocks):
        h = dilated_resnet_block(h, bcfg, model.params, f"block{i}", mode, rng)
    pooled = ad.dropout(ad.global_avg_pool(h), cfg.head_dropout_rate, mode, rng)
    logits = ad.dense(pooled, model.params["head.weight"], model.params["head.bias"])
    return ad.sigmoid(logits)


def with_precomputed_stem(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, stem=PRECOMPUTED)
