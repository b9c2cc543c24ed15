"""Convolutional feature embedding plus linear classifier, one per branch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import conv2d, cross_entropy, global_avg_pool, softmax
from .tensor import Tensor


@dataclass(frozen=True)
class EmbeddingConfig:
    input_size: tuple[int, int] = (64, 64)
    stage_channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    num_classes: int = 5
    input_shift: float = 0.0
    input_scale: float = 1.0

    @property
    def channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def map_size(self) -> tuple[int, int]:
        h, w = self.input_size
        pad = self.kernel // 2
        for _ in self.stage_channels:
            h = (h + 2 * pad - self.kernel) // 2 + 1
            w = (w + 2 * pad - self.kernel) // 2 + 1
        return h, w

    def validate(self) -> None:
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be positive, got {self.stage_channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        h, w = self.map_size
        if h < 2 or w < 2:
            raise ConfigError(
                f"{len(self.stage_channels)} stride-2 stages collapse {self.input_size} to {(h, w)}; need ≥ 2×2"
            )


@dataclass
class ClassifierHead:
    """``weight[:, j]`` is the class-j weight vector over the c pooled channels."""

    weight: Tensor  # c×K
    bias: Tensor  # K


@dataclass
class Branch:
    config: EmbeddingConfig
    kernels: list[Tensor]
    biases: list[Tensor]
    head: ClassifierHead

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            named[f"stage{i}.kernel"] = k
            named[f"stage{i}.bias"] = b
        named["head.weight"] = self.head.weight
        named["head.bias"] = self.head.bias
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


@dataclass
class BranchOutput:
    maps: Tensor  # (n×)h×w×c
    pooled: Tensor  # (n×)c
    logits: Tensor  # (n×)K
    prob: Tensor  # (n×)K


def build_branch(config: EmbeddingConfig, seed: int) -> Branch:
    """He-initialised kernels, fan-in scaled head, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    cin = 1
    k = config.kernel
    for cout in config.stage_channels:
        std = np.sqrt(2.0 / (k * k * cin))
        kernels.append(Tensor(rng.normal(0.0, std, (k, k, cin, cout)).astype(np.float32), requires_grad=True))
        biases.append(Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True))
        cin = cout
    c, K = config.channels, config.num_classes
    weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / c), (c, K)).astype(np.float32), requires_grad=True)
    head = ClassifierHead(weight, Tensor(np.zeros(K, dtype=np.float32), requires_grad=True))
    return Branch(config, kernels, biases, head)


def forward(branch: Branch, image) -> BranchOutput:
    """Run one image (H×W) or a batch (n×H×W) through the branch."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=branch.head.weight.dtype))
    if x.ndim not in (2, 3) or tuple(x.shape[-2:]) != tuple(branch.config.input_size):
        raise DimensionError(f"expected input of size {branch.config.input_size}, got {x.shape}")
    single = x.ndim == 2
    cfg = branch.config
    if cfg.input_shift != 0.0 or cfg.input_scale != 1.0:
        x = (x - cfg.input_shift) * cfg.input_scale
    h = x.reshape(*x.shape, 1)
    pad = branch.config.kernel // 2
    for kernel, bias in zip(branch.kernels, branch.biases):
        h = conv2d(h, kernel, bias, stride=2, padding=pad).relu()
    maps = h
    pooled = global_avg_pool(maps)
    pooled = pooled.reshape(-1) if single else pooled.reshape(pooled.shape[0], -1)
    logits = pooled @ branch.head.weight if not single else (pooled.reshape(1, -1) @ branch.head.weight).reshape(-1)
    logits = logits + branch.head.bias
    return BranchOutput(maps=maps, pooled=pooled, logits=logits, prob=softmax(logits))


def branch_loss(output: BranchOutput, label) -> Tensor:
    return cross_entropy(output.prob, label)
