"""Light-weight shape auto-encoder.

Masks are area-pooled to 32x32, encoded by three stride-2 convolutions to a 4x4 map
and projected (1x1 conv) to ``latent_dim / 16`` channels; the flattened 4x4 code is
the shape feature. The decoder mirrors this and upsamples logits to the input size.
About 12.8k parameters at ``latent_dim=256``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, NotTrainedError
from .torchutil import batches, seeded_generator, to_tensor

POOLED = 32
CODE_GRID = 4


class SAEModel(nn.Module):
    def __init__(self, size: int = 256, latent_dim: int = 256, widths: Sequence[int] = (8, 16, 32)):
        super().__init__()
        cells = CODE_GRID * CODE_GRID
        if latent_dim % cells:
            raise ValueError(f"latent_dim must be a multiple of {cells}")
        self.size = size
        self.latent_dim = latent_dim
        self.code_channels = latent_dim // cells
        w1, w2, w3 = widths
        self.enc = nn.ModuleList([
            nn.Conv2d(1, w1, 3, stride=2, padding=1),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1),
        ])
        self.to_code = nn.Conv2d(w3, self.code_channels, 1)
        self.from_code = nn.Conv2d(self.code_channels, w3, 1)
        self.dec = nn.ModuleList([
            nn.Conv2d(w3, w2, 3, padding=1),
            nn.Conv2d(w2, w1, 3, padding=1),
            nn.Conv2d(w1, 1, 3, padding=1),
        ])
        self.trained = False
        self.history: list[float] = []

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode_tensor(self, masks: torch.Tensor) -> torch.Tensor:
        x = F.adaptive_avg_pool2d(masks, POOLED)
        for conv in self.enc:
            x = F.relu(conv(x))
        return self.to_code(x).flatten(1)

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.from_code(z.view(-1, self.code_channels, CODE_GRID, CODE_GRID)))
        for conv in self.dec[:-1]:
            x = F.relu(conv(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)))
        x = self.dec[-1](F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        return F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)

    def forward(self, masks):
        return self.decode_logits(self.encode_tensor(masks))

    def encode(self, mask: np.ndarray) -> np.ndarray:
        """Latent of one (H, W) mask, or of each mask in an (n, H, W) stack."""
        if not self.trained:
            raise NotTrainedError("shape auto-encoder has not been trained")
        arr = np.asarray(mask, dtype=np.float32)
        single = arr.ndim == 2
        if arr.shape[-2:] != (self.size, self.size):
            raise DimensionError(f"mask shape {arr.shape[-2:]} != ({self.size}, {self.size})")
        with torch.no_grad():
            z = self.encode_tensor(to_tensor(arr)).numpy()
        return z[0] if single else z

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float32)
        single = z.ndim == 1
        if z.shape[-1] != self.latent_dim:
            raise DimensionError(f"latent length {z.shape[-1]} != {self.latent_dim}")
        with torch.no_grad():
            p = torch.sigmoid(self.decode_logits(torch.from_numpy(z.reshape(-1, self.latent_dim))))
        p = p[:, 0].numpy()
        return p[0] if single else p


def train_sae(masks, *, size: Optional[int] = None, latent_dim: int = 256, epochs: int = 150,
              batch_size: int = 10, lr: float = 3e-3, seed: int = 0) -> SAEModel:
    """Fit by mean pixelwise BCE reconstruction; per-epoch mean loss lands in ``history``.

    ``history[0]`` is the loss of the initial model, measured before any update.
    """
    masks = np.asarray(masks, dtype=np.float32)
    if masks.ndim != 3 or len(masks) == 0:
        raise ValueError("train_sae needs a non-empty (n, H, W) stack of masks")
    if len(masks) < 2:
        raise ValueError("train_sae needs at least 2 masks")
    size = size or masks.shape[-1]
    torch.manual_seed(seed)
    model = SAEModel(size, latent_dim)
    x_all = to_tensor(masks)
    with torch.no_grad():
        model.history.append(float(F.binary_cross_entropy_with_logits(model(x_all), x_all)))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = seeded_generator(seed)
    for _ in range(epochs):
        total = 0.0
        for idx in batches(len(masks), batch_size, gen):
            x = x_all[idx]
            opt.zero_grad()
            loss = F.binary_cross_entropy_with_logits(model(x), x)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.history.append(total / len(masks))
    model.trained = True
    model.eval()
    return model
