"""Texture extractors: a small reconstruction-trained conv encoder, or VGG16 fc1 activations."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ExtractorUnavailableError, NotTrainedError
from .torchutil import batches, seeded_generator, state_digest, to_tensor

SMALL_ENCODER = "trained-small-encoder"
PRETRAINED = "pretrained-backbone"
ENCODER_INPUT = 128


class SmallEncoder(nn.Module):
    """Four stride-2 convolutions; the 8x8 output map is average pooled to a vector."""

    def __init__(self, dim: int = 128):
        super().__init__()
        widths = [1, 16, 32, 64, dim]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(4))
        self.dim = dim

    @staticmethod
    def _resize(x):
        if x.shape[-1] != ENCODER_INPUT or x.shape[-2] != ENCODER_INPUT:
            x = F.adaptive_avg_pool2d(x, ENCODER_INPUT)
        return x

    def feature_map(self, x):
        x = self._resize(x)
        for conv in self.convs:
            x = F.relu(conv(x))
        return x

    def forward(self, x):
        return self.feature_map(x).mean(dim=(2, 3))


class _Reconstructor(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        widths = [dim, 64, 32, 16]
        self.convs = nn.ModuleList(nn.Conv2d(widths[i], widths[i + 1], 3, padding=1) for i in range(3))
        self.out = nn.Conv2d(16, 1, 3, padding=1)

    def forward(self, z):
        for conv in self.convs:
            z = F.relu(conv(F.interpolate(z, scale_factor=2, mode="bilinear", align_corners=False)))
        z = F.interpolate(z, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.out(z))


class TextureExtractor:
    """Frozen image -> vector map. Subclasses set ``kind``, ``dim`` and ``extractor_id``."""

    kind: str
    dim: int
    extractor_id: str

    def extract(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return self.extract(np.asarray(image)[None])[0]


class SmallEncoderExtractor(TextureExtractor):
    kind = SMALL_ENCODER

    def __init__(self, encoder: SmallEncoder):
        self.encoder = encoder.eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.dim = encoder.dim
        self.extractor_id = f"small-encoder-v1:{state_digest(encoder.state_dict())[:16]}"

    def extract(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim != 3:
            raise DimensionError(f"expected (n, H, W) images, got {images.shape}")
        with torch.no_grad():
            out = [self.encoder(to_tensor(images[i:i + 16])) for i in range(0, len(images), 16)]
        return torch.cat(out).numpy().astype(np.float32)

    def state_dict(self):
        return self.encoder.state_dict()

    @classmethod
    def from_state_dict(cls, state, dim: int):
        enc = SmallEncoder(dim)
        enc.load_state_dict(state)
        return cls(enc)


def train_texture_encoder(images: np.ndarray, dim: int = 128, epochs: int = 30, seed: int = 0,
                          batch_size: int = 5, lr: float = 1e-3) -> SmallEncoderExtractor:
    """Train encoder + throwaway decoder by MSE reconstruction of (pooled) source images."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("need at least one image to train the texture encoder")
    torch.manual_seed(seed)
    encoder, decoder = SmallEncoder(dim), _Reconstructor(dim)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    x_all = SmallEncoder._resize(to_tensor(images))
    gen = seeded_generator(seed)
    for _ in range(epochs):
        for idx in batches(len(images), batch_size, gen):
            x = x_all[idx]
            opt.zero_grad()
            loss = F.mse_loss(decoder(encoder.feature_map(x)), x)
            loss.backward()
            opt.step()
    return SmallEncoderExtractor(encoder)


class BackboneExtractor(TextureExtractor):
    """fc1 activations of VGG16 (after ReLU), optionally PCA-reduced.

    Grayscale input is replicated to three channels, resized to 224x224 and
    ImageNet-normalised.
    """

    kind = PRETRAINED
    _MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    _STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    def __init__(self, backbone: nn.Module, weights_tag: str, pca_dim: Optional[int] = 512):
        self.backbone = backbone.eval()
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.weights_tag = weights_tag
        self.pca_dim = pca_dim
        self.pca_mean: Optional[np.ndarray] = None
        self.pca_components: Optional[np.ndarray] = None
        self.raw_dim = backbone.classifier[0].out_features

    @property
    def dim(self) -> int:
        return self.pca_components.shape[0] if self.pca_components is not None else self.raw_dim

    @property
    def extractor_id(self) -> str:
        tag = f"vgg16-fc1:{self.weights_tag}"
        if self.pca_components is not None:
            digest = hashlib.sha256(self.pca_components.tobytes()).hexdigest()[:12]
            tag += f":pca{self.dim}-{digest}"
        return tag

    @classmethod
    def from_weights(cls, weights_path=None, pca_dim: Optional[int] = 512) -> "BackboneExtractor":
        from torchvision.models import vgg16

        path = Path(weights_path) if weights_path else None
        if path is None or not path.is_file():
            raise ExtractorUnavailableError(
                f"VGG16 weights not found ({weights_path!r}); pass a local state-dict file or "
                f"fall back to kind={SMALL_ENCODER!r}")
        model = vgg16(weights=None)
        model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        return cls(model, hashlib.sha256(path.read_bytes()).hexdigest()[:12], pca_dim)

    def _fc1(self, images: np.ndarray) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(images), 8):
                x = to_tensor(images[i:i + 8]).repeat(1, 3, 1, 1)
                x = F.interpolate(x, size=(224, 224), mode="bilinear", align_corners=False)
                x = (x - self._MEAN) / self._STD
                x = self.backbone.avgpool(self.backbone.features(x)).flatten(1)
                out.append(self.backbone.classifier[1](self.backbone.classifier[0](x)))
        return torch.cat(out).numpy().astype(np.float64)

    def fit_pca(self, images: np.ndarray) -> "BackboneExtractor":
        if not self.pca_dim:
            return self
        raw = self._fc1(np.asarray(images))
        k = min(self.pca_dim, raw.shape[0], raw.shape[1])
        mean = raw.mean(axis=0)
        _, _, vt = np.linalg.svd(raw - mean, full_matrices=False)
        self.pca_mean, self.pca_components = mean, vt[:k]
        return self

    def extract(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim != 3:
            raise DimensionError(f"expected (n, H, W) images, got {images.shape}")
        raw = self._fc1(images)
        if self.pca_dim and self.pca_components is None:
            raise NotTrainedError("PCA not fitted; call fit_pca on source images first")
        if self.pca_components is not None:
            raw = (raw - self.pca_mean) @ self.pca_components.T
        return raw.astype(np.float32)
