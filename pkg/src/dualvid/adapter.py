"""Vision-language adapters: tokenwise projection plus token pooling.

Each encoder stream gets its own adapter. The projection is a small two
layer MLP applied per token; pooling then cuts the token count on the grid
form of the features. Three pooling modes are supported: adaptive spatial
averaging, temporal averaging, and a learnable depthwise-conv path with the
same output geometry as spatial averaging at kernel 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import FeatureGrid
from .errors import ShapeMismatchError

POOL_MODES = ("spatial_avg", "time_avg", "cnn")
POOL_KERNELS = (2, 4)
ACTIVATIONS = ("gelu", "linear")


@dataclass(frozen=True)
class AdapterConfig:
    in_dim: int
    out_dim: int
    hidden_dim: int | None = None
    pool_mode: str = "spatial_avg"
    pool_kernel: int = 2
    activation: str = "gelu"

    def __post_init__(self):
        if self.pool_mode not in POOL_MODES:
            raise ValueError(f"pool_mode must be one of {POOL_MODES}, got {self.pool_mode!r}")
        if self.pool_kernel not in POOL_KERNELS:
            raise ValueError(f"pool_kernel must be one of {POOL_KERNELS}, got {self.pool_kernel}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("in_dim and out_dim must be positive")

    @property
    def mlp_hidden(self) -> int:
        return self.out_dim if self.hidden_dim is None else self.hidden_dim


@dataclass
class PooledTokens:
    """Pooled grid features, [frames, G', G', D]. Still differentiable."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeMismatchError(
                f"pooled tokens must be 4-d [F, G', G', D], got {tuple(self.data.shape)}"
            )
        if self.data.shape[1] != self.data.shape[2]:
            raise ShapeMismatchError("pooled grid must be square")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[3]

    @property
    def num_tokens(self) -> int:
        return self.data.shape[0] * self.data.shape[1] * self.data.shape[2]

    def flatten(self) -> torch.Tensor:
        """Row-major token list, [frames * G' * G', D]."""
        return self.data.reshape(self.num_tokens, self.dim)


def adaptive_bounds(size: int, out_size: int) -> list[tuple[int, int]]:
    """Disjoint bin boundaries b_i = floor(i * size / out_size).

    The bins partition [0, size) exactly, so every input cell lands in one
    output cell even when out_size does not divide size.
    """
    if out_size < 1 or out_size > size:
        raise ValueError(f"out_size {out_size} must be in [1, {size}]")
    edges = [(i * size) // out_size for i in range(out_size + 1)]
    return [(edges[i], edges[i + 1]) for i in range(out_size)]


def pool_spatial(grid: FeatureGrid, kernel: int) -> PooledTokens:
    """Average k x k spatial bins; token count drops by k^2 when k | G."""
    if kernel < 1:
        raise ValueError("kernel must be >= 1")
    g = grid.grid
    out_g = -(-g // kernel)  # ceil division
    bounds = adaptive_bounds(g, out_g)
    rows = []
    for r0, r1 in bounds:
        cols = []
        for c0, c1 in bounds:
            cols.append(grid.data[:, r0:r1, c0:c1, :].mean(dim=(1, 2)))
        rows.append(torch.stack(cols, dim=1))
    return PooledTokens(torch.stack(rows, dim=1))


def pool_temporal(grid: FeatureGrid) -> PooledTokens:
    """Mean over the frame axis; output always has a single frame."""
    return PooledTokens(grid.data.mean(dim=0, keepdim=True))


class CnnPooler(nn.Module):
    """Depthwise 3x3 stride-2 conv plus a pointwise residual branch.

    Geometry matches pool_spatial(kernel=2) for even grids. With the
    depthwise kernel set to a uniform quarter over each 2x2 block and the
    pointwise branch zeroed, the output equals spatial averaging exactly.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.depthwise = nn.Conv2d(dim, dim, kernel_size=3, stride=2, padding=1,
                                   groups=dim)
        self.pointwise = nn.Conv2d(dim, dim, kernel_size=1)

    def forward(self, grid_data: torch.Tensor) -> torch.Tensor:
        if grid_data.shape[1] % 2 != 0:
            raise ValueError(
                f"cnn pooling needs an even grid, got {grid_data.shape[1]}"
            )
        x = grid_data.permute(0, 3, 1, 2)  # [F, D, G, G]
        y = self.depthwise(x)
        y = y + self.pointwise(y)
        return y.permute(0, 2, 3, 1)

    def load_averaging_weights(self):
        """Set parameters so the pooler reproduces 2x2 mean pooling."""
        with torch.no_grad():
            self.depthwise.weight.zero_()
            # stride 2, padding 1: kernel cell (1,1) reads input (2i, 2j),
            # so the 2x2 block sits at kernel rows/cols 1..2
            self.depthwise.weight[:, 0, 1:, 1:] = 0.25
            self.depthwise.bias.zero_()
            self.pointwise.weight.zero_()
            self.pointwise.bias.zero_()


def pool_cnn(grid: FeatureGrid, pooler: CnnPooler) -> PooledTokens:
    if grid.grid % 2 != 0:
        raise ValueError(f"cnn pooling needs an even grid, got {grid.grid}")
    return PooledTokens(pooler(grid.data))


class VisionLanguageAdapter(nn.Module):
    """project (two-layer MLP, per token) then pool (on the grid form)."""

    def __init__(self, config: AdapterConfig):
        super().__init__()
        self.config = config
        self.fc1 = nn.Linear(config.in_dim, config.mlp_hidden)
        self.fc2 = nn.Linear(config.mlp_hidden, config.out_dim)
        self.pooler = CnnPooler(config.out_dim) if config.pool_mode == "cnn" else None

    def project(self, features: FeatureGrid) -> FeatureGrid:
        if features.dim != self.config.in_dim:
            raise ShapeMismatchError(
                f"adapter expects feature dim {self.config.in_dim}, got {features.dim}"
            )
        hidden = self.fc1(features.data)
        if self.config.activation == "gelu":
            hidden = F.gelu(hidden)
        return FeatureGrid(self.fc2(hidden), tap=features.tap)

    def pool(self, projected: FeatureGrid) -> PooledTokens:
        mode = self.config.pool_mode
        if mode == "spatial_avg":
            return pool_spatial(projected, self.config.pool_kernel)
        if mode == "time_avg":
            return pool_temporal(projected)
        return pool_cnn(projected, self.pooler)

    def forward(self, features: FeatureGrid) -> PooledTokens:
        return self.pool(self.project(features))
