"""U-Net style encoder/decoder conditioned on a context vector at the bottleneck.

Encoder: four stride-2 conv-BN-ReLU layers. Decoder: four conv layers, each after a
2x bilinear upsample; the first three take the matching encoder activation as a skip
and the last emits one logit channel. The context vector goes through a bias-free
linear projection, is tiled over the bottleneck grid and combined by the embedding
operator (concat, sum or average).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError

OPERATORS = ("concat", "sum", "average")
STRIDE = 16


def conv_bn_relu(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


def _up(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def embed_context(bottleneck: torch.Tensor, projected: Optional[torch.Tensor], operator: str) -> torch.Tensor:
    """Tile ``projected`` (B, P) over the (B, C, h, w) bottleneck and combine."""
    if operator not in OPERATORS:
        raise ValueError(f"unknown embedding operator {operator!r}")
    if projected is None:
        return bottleneck
    b, c, h, w = bottleneck.shape
    if projected.dim() != 2 or projected.shape[0] != b:
        raise DimensionError(f"projected context shape {tuple(projected.shape)} does not match batch {b}")
    if operator != "concat" and projected.shape[1] != c:
        raise DimensionError(f"{operator} needs projected width {c}, got {projected.shape[1]}")
    tiled = projected[:, :, None, None].expand(-1, -1, h, w)
    if operator == "concat":
        return torch.cat([bottleneck, tiled], dim=1)
    if operator == "sum":
        return bottleneck + tiled
    return (bottleneck + tiled) / 2


class SegModel(nn.Module):
    def __init__(self, context_dim: int = 0, operator: str = "average",
                 widths: Sequence[int] = (16, 32, 64, 128), projected_width: Optional[int] = None,
                 size: Optional[int] = None):
        super().__init__()
        if operator not in OPERATORS:
            raise ValueError(f"unknown embedding operator {operator!r}")
        w1, w2, w3, w4 = widths
        self.context_dim = context_dim
        self.operator = operator
        self.size = size
        self.widths = tuple(widths)
        self.projected_width = projected_width or w4
        if operator != "concat" and self.projected_width != w4:
            raise DimensionError(f"{operator} needs projected width == bottleneck channels ({w4})")
        embedded = w4 + (self.projected_width if context_dim and operator == "concat" else 0)

        self.encoder = nn.ModuleList([
            conv_bn_relu(1, w1, 2), conv_bn_relu(w1, w2, 2),
            conv_bn_relu(w2, w3, 2), conv_bn_relu(w3, w4, 2),
        ])
        self.decoder = nn.ModuleList([
            conv_bn_relu(embedded + w3, w3), conv_bn_relu(w3 + w2, w2),
            conv_bn_relu(w2 + w1, w1), nn.Conv2d(w1, 1, 3, padding=1),
        ])
        # created last so encoder/decoder init does not depend on the context pathway
        self.context_proj = nn.Linear(context_dim, self.projected_width, bias=False) if context_dim else None

    def conv_layer_count(self) -> tuple[int, int]:
        count = lambda mods: sum(isinstance(m, nn.Conv2d) for m in mods.modules())
        return count(self.encoder), count(self.decoder)

    def _check_input(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 1:
            raise DimensionError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise DimensionError(f"input dims {h}x{w} must be multiples of {STRIDE}")
        if self.size is not None and (h, w) != (self.size, self.size):
            raise DimensionError(f"input dims {h}x{w} != model size {self.size}")

    def encode_image(self, x: torch.Tensor):
        """Returns ``(bottleneck, skips)``; skips are the first three encoder outputs."""
        self._check_input(x)
        skips = []
        for layer in self.encoder:
            x = layer(x)
            skips.append(x)
        return skips[-1], skips[:-1]

    def project(self, context: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        if self.context_proj is None:
            return None
        if context is None:
            raise DimensionError(f"model expects a context vector of length {self.context_dim}")
        if context.dim() == 1:
            context = context[None]
        if context.shape[-1] != self.context_dim:
            raise DimensionError(f"context length {context.shape[-1]} != {self.context_dim}")
        return self.context_proj(context)

    def embed(self, bottleneck, context=None):
        projected = self.project(context)
        if projected is not None and projected.shape[0] == 1 and bottleneck.shape[0] > 1:
            projected = projected.expand(bottleneck.shape[0], -1)
        return embed_context(bottleneck, projected, self.operator)

    def decode_logits(self, embedded: torch.Tensor, skips) -> torch.Tensor:
        expected = self.decoder[0][0].in_channels - skips[-1].shape[1]
        if embedded.shape[1] != expected:
            raise DimensionError(f"embedded map has {embedded.shape[1]} channels, decoder expects {expected}")
        x = embedded
        for layer, skip in zip(self.decoder[:3], reversed(skips)):
            x = layer(torch.cat([_up(x), skip], dim=1))
        return self.decoder[3](_up(x))

    def decode_mask(self, embedded, skips) -> torch.Tensor:
        return torch.sigmoid(self.decode_logits(embedded, skips))

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Logits of shape (B, 1, H, W)."""
        bottleneck, skips = self.encode_image(x)
        return self.decode_logits(self.embed(bottleneck, context), skips)

    def predict(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        return torch.sigmoid(self(x, context))


def bce_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean pixelwise binary cross-entropy of probabilities ``pred`` against ``gt``."""
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(gt.shape)}")
    p = pred.clamp(eps, 1 - eps)
    return -(gt * torch.log(p) + (1 - gt) * torch.log1p(-p)).mean()


def loss(pred, gt, eps: float = 1e-7) -> float:
    pred = torch.as_tensor(np.asarray(pred, dtype=np.float64))
    gt = torch.as_tensor(np.asarray(gt, dtype=np.float64))
    return float(bce_loss(pred, gt, eps))
