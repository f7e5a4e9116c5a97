"""Small frozen ViT-style patch encoder with intermediate layer taps.

Random seeded weights stand in for a pretrained domain encoder; the taps and
the final feature grid exercise the same plumbing. Taps are the residual
stream after each block (1-based), recorded in the config as ``tap_point``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from segprompt.errors import ContractError
from segprompt.nn import Tensor, TransformerBlock, init_uniform
from segprompt.nn.layers import LinearLayer


@dataclass
class VitConfig:
    image_size: int = 64
    patch_size: int = 16
    depth: int = 8
    dim: int = 64
    heads: int = 4
    tap_layers: tuple[int, ...] = (2, 4, 6, 8)
    tap_point: str = "post_block"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ContractError("heads must divide dim")
        if not self.tap_layers or any(t < 1 or t > self.depth for t in self.tap_layers):
            raise ContractError(f"tap layers {self.tap_layers} must lie in [1, depth]")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2


@dataclass
class FeatureGrid:
    """Patch-grid features: Tensor of shape (rows*cols, dim), row-major."""

    rows: int
    cols: int
    features: Tensor

    def __post_init__(self):
        if self.features.shape[0] != self.rows * self.cols:
            raise ContractError(
                f"feature grid {self.rows}x{self.cols} expects "
                f"{self.rows * self.cols} cells, got {self.features.shape}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class EncoderOutput:
    taps: dict[int, FeatureGrid]
    final: FeatureGrid


class FrozenParams:
    """Marks a parameter-name set whose gradients the optimizer discards."""

    def __init__(self, names: tuple[str, ...]):
        self.names = names


def set_frozen(params: dict[str, Tensor]) -> FrozenParams:
    """Freeze parameters: forward is unchanged, gradients are discarded."""
    return FrozenParams(tuple(params))


class VitEncoder:
    def __init__(self, cfg: VitConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        in_dim = cfg.patch_size ** 2
        self.patch_embed = LinearLayer(in_dim, cfg.dim, rng)
        self.pos_embed = Tensor(init_uniform(rng, (cfg.n_patches, cfg.dim), cfg.dim),
                                requires_grad=True)
        self.blocks = [TransformerBlock(cfg.dim, cfg.heads, rng, causal=False)
                       for _ in range(cfg.depth)]

    def named_params(self, prefix: str = "enc") -> dict[str, Tensor]:
        out = self.patch_embed.named_params(f"{prefix}.patch_embed")
        out[f"{prefix}.pos_embed"] = self.pos_embed
        for i, block in enumerate(self.blocks):
            out.update(block.named_params(f"{prefix}.block{i}"))
        return out

    def _patchify(self, image: np.ndarray) -> np.ndarray:
        s, p = self.cfg.image_size, self.cfg.patch_size
        g = self.cfg.grid_side
        return image.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, p * p)

    def encode(self, image: np.ndarray) -> EncoderOutput:
        """Run the encoder; returns one FeatureGrid per tap layer plus the
        final-layer grid for the adapter path."""
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (self.cfg.image_size, self.cfg.image_size):
            raise ContractError(
                f"image shape {image.shape} != configured "
                f"({self.cfg.image_size}, {self.cfg.image_size})")
        if image.min() < 0.0 or image.max() > 1.0:
            raise ContractError("pixel values must lie in [0, 1]")
        g = self.cfg.grid_side
        x = self.patch_embed(Tensor(self._patchify(image))) + self.pos_embed
        taps: dict[int, FeatureGrid] = {}
        for layer_index, block in enumerate(self.blocks, start=1):
            x = block(x)
            if layer_index in self.cfg.tap_layers:
                taps[layer_index] = FeatureGrid(g, g, x)
        return EncoderOutput(taps=taps, final=FeatureGrid(g, g, x))
