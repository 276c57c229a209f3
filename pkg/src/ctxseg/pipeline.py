"""Training of the four methods, memory construction, inference and continual deployment."""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetHandle, preprocess
from .errors import DataError, DimensionError, VariantMismatchError
from .features import query_dim, query_features
from .memory import TEXTURE_ONLY, TEXTURE_SHAPE, DomainMemory, MemoryRecord
from .sae import SAEModel, train_sae
from .segnet import SegModel
from .texture import TextureExtractor, train_texture_encoder
from .torchutil import batches, seeded_generator, state_digest, to_tensor

log = logging.getLogger(__name__)


class Variant(str, Enum):
    NODA = "NoDA"
    CN1 = "ContextNet1"
    CN2 = "ContextNet2"
    TRANSFER = "TransferLearnt"

    @property
    def memory_variant(self) -> Optional[str]:
        return {Variant.CN1: TEXTURE_ONLY, Variant.CN2: TEXTURE_SHAPE}.get(self)

    @property
    def uses_context(self) -> bool:
        return self.memory_variant is not None

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, Variant):
            return name
        aliases = {"noda": cls.NODA, "cn1": cls.CN1, "cn2": cls.CN2, "tl": cls.TRANSFER,
                   "transfer": cls.TRANSFER}
        key = str(name).lower()
        if key in aliases:
            return aliases[key]
        for v in cls:
            if v.value.lower() == key:
                return v
        raise ValueError(f"unknown variant {name!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 5
    learning_rate: float = 1e-3
    seed: int = 0
    T: int = 5
    operator: str = "average"
    aggregation: str = "average"
    resolution: int = 256
    latent_dim: int = 256
    texture_dim: int = 128
    texture_epochs: int = 30
    sae_epochs: int = 150
    wavelet_levels: int = 2

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.T < 1:
            raise ValueError(f"invalid training config: {self}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def dims(self) -> tuple:
        return query_dim(self.resolution, self.wavelet_levels), self.texture_dim, self.latent_dim


@dataclass
class ModelBundle:
    variant: Variant
    seg: SegModel
    config: TrainConfig
    extractor: Optional[TextureExtractor] = None
    sae: Optional[SAEModel] = None
    history: list = field(default_factory=list)

    @property
    def extractor_id(self) -> str:
        return self.extractor.extractor_id if self.extractor is not None else ""

    def parameter_digest(self) -> str:
        return state_digest(self.seg.state_dict())


# -- features ----------------------------------------------------------------

@dataclass
class FeatureTable:
    """Preprocessed images plus per-sample q, t and (optionally) g for one dataset."""
    ids: list
    images: np.ndarray
    masks: Optional[np.ndarray]
    q: np.ndarray
    t: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None


def prepared_images(dataset: DatasetHandle) -> np.ndarray:
    return np.stack([preprocess(s.image) for s in dataset])


def compute_features(dataset: DatasetHandle, config: TrainConfig, extractor=None, sae=None,
                     need_masks: bool = False) -> FeatureTable:
    images = prepared_images(dataset)
    if images.shape[1:] != (config.resolution, config.resolution):
        raise DimensionError(f"{dataset.domain_id}: images are {images.shape[1:]}, config resolution "
                             f"is {config.resolution}")
    masks = None
    if dataset.fully_annotated:
        masks = np.stack([s.mask for s in dataset]).astype(np.float32)
    elif need_masks:
        missing = [s.id for s in dataset if not s.has_mask][:5]
        raise DataError(f"{dataset.domain_id}: masks required, missing for {missing}")
    q = np.stack([query_features(im, config.wavelet_levels) for im in images])
    t = extractor.extract(images) if extractor is not None else None
    g = sae.encode(masks) if (sae is not None and masks is not None) else None
    return FeatureTable(dataset.ids, images, masks, q, t, g)


def train_feature_models(source: DatasetHandle, config: TrainConfig, with_sae: bool = True):
    """Texture encoder from source images; SAE from source masks."""
    images = prepared_images(source)
    extractor = train_texture_encoder(images, dim=config.texture_dim, epochs=config.texture_epochs,
                                      seed=config.seed, batch_size=config.batch_size,
                                      lr=config.learning_rate)
    sae = None
    if with_sae:
        if not source.fully_annotated:
            raise DataError(f"{source.domain_id}: SAE training needs masks on every sample")
        masks = np.stack([s.mask for s in source])
        sae = train_sae(masks, latent_dim=config.latent_dim, epochs=config.sae_epochs, seed=config.seed)
    return extractor, sae


# -- memory ------------------------------------------------------------------

def new_memory(domain_id: str, variant: Variant, config: TrainConfig, extractor_id: str,
               capacity: Optional[int] = None) -> DomainMemory:
    variant = Variant.parse(variant)
    if not variant.uses_context:
        raise VariantMismatchError(f"{variant.value} does not use a memory")
    d_q, d_t, d_g = config.dims
    return DomainMemory(domain_id, variant.memory_variant,
                        (d_q, d_t, d_g if variant is Variant.CN2 else None), extractor_id, capacity)


def build_memory(dataset: DatasetHandle, variant, extractor: TextureExtractor,
                 sae: Optional[SAEModel], config: TrainConfig,
                 features: Optional[FeatureTable] = None) -> DomainMemory:
    """One record per sample: q and t always, g from the mask for ContextNet2."""
    variant = Variant.parse(variant)
    supervised = variant is Variant.CN2
    if supervised:
        missing = [s.id for s in dataset if not s.has_mask]
        if missing:
            raise DataError(f"ContextNet2 memory needs masks; sample {missing[0]!r} has none")
        if sae is None:
            raise VariantMismatchError("ContextNet2 memory needs a trained shape auto-encoder")
    if features is None:
        features = compute_features(dataset, config, extractor, sae if supervised else None)
    memory = new_memory(dataset.domain_id, variant, config, extractor.extractor_id)
    for i, sid in enumerate(features.ids):
        memory.insert(MemoryRecord(sid, features.q[i], features.t[i],
                                   features.g[i] if supervised else None))
    return memory


build_source_memory = build_memory


def context_vectors(memory: DomainMemory, q: np.ndarray, config: TrainConfig,
                    exclude_ids=None) -> np.ndarray:
    """Aggregated context vector per query row; ``exclude_ids[i]`` is left out of row i's lookup."""
    out = []
    for i in range(len(q)):
        exclude = exclude_ids[i] if exclude_ids is not None else None
        out.append(memory.retrieve(q[i], config.T, exclude, config.aggregation).aggregated)
    return np.stack(out)


def context_dim_for(variant: Variant, config: TrainConfig) -> int:
    if not variant.uses_context:
        return 0
    d_q, d_t, d_g = config.dims
    width = d_t + (d_g if variant is Variant.CN2 else 0)
    return width * (config.T if config.aggregation == "concat" else 1)


# -- training ------------------------------------------------------------------

def init_model(variant: Variant, config: TrainConfig) -> SegModel:
    torch.manual_seed(config.seed)
    return SegModel(context_dim_for(variant, config), config.operator, size=config.resolution)


def _fit(model: SegModel, images: np.ndarray, masks: np.ndarray, config: TrainConfig,
         context_fn=None) -> list:
    """Adam on mean BCE. ``context_fn(indices)`` supplies per-sample context each batch."""
    if config.epochs == 0:
        return []
    x_all, y_all = to_tensor(images), to_tensor(masks)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    gen = seeded_generator(config.seed)
    history = []
    model.train()
    for epoch in range(config.epochs):
        ctx_all = context_fn() if context_fn is not None else None
        total = 0.0
        for idx in batches(len(images), config.batch_size, gen):
            ctx = ctx_all[idx] if ctx_all is not None else None
            opt.zero_grad()
            loss = F.binary_cross_entropy_with_logits(model(x_all[idx], ctx), y_all[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(images))
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    model.eval()
    return history


def train_noda(dataset: DatasetHandle, config: TrainConfig) -> ModelBundle:
    """Plain U-Net on source data: the lower baseline."""
    if not dataset.fully_annotated:
        raise DataError(f"{dataset.domain_id}: NoDA training needs masks on every sample")
    model = init_model(Variant.NODA, config)
    images = prepared_images(dataset)
    masks = np.stack([s.mask for s in dataset]).astype(np.float32)
    history = _fit(model, images, masks, config)
    model.eval()
    return ModelBundle(Variant.NODA, model, config, history=history)


def train_contextnet(dataset: DatasetHandle, memory: DomainMemory, variant, config: TrainConfig,
                     extractor: TextureExtractor, sae: Optional[SAEModel] = None,
                     features: Optional[FeatureTable] = None) -> ModelBundle:
    """Train with each sample conditioned on the memory lookup that excludes its own record."""
    variant = Variant.parse(variant)
    if not variant.uses_context:
        raise VariantMismatchError(f"{variant.value} is not a ContextNet variant")
    if memory.variant != variant.memory_variant:
        raise VariantMismatchError(f"{variant.value} needs a {variant.memory_variant!r} memory, "
                                   f"got {memory.variant!r}")
    if memory.extractor_id != extractor.extractor_id:
        raise VariantMismatchError("memory was built with a different texture extractor")
    if not dataset.fully_annotated:
        raise DataError(f"{dataset.domain_id}: training needs masks on every sample")
    if features is None:
        features = compute_features(dataset, config, need_masks=True)
    model = init_model(variant, config)
    ids = features.ids

    def context_fn():
        return torch.from_numpy(context_vectors(memory, features.q, config, exclude_ids=ids))

    history = _fit(model, features.images, features.masks, config, context_fn)
    model.eval()
    return ModelBundle(variant, model, config, extractor, sae if variant is Variant.CN2 else None,
                       history=history)


def transfer_learn(bundle: ModelBundle, target: DatasetHandle, config: Optional[TrainConfig] = None) -> ModelBundle:
    """Fine-tune a copy of a context-free source model on fully annotated target data."""
    if bundle.variant.uses_context:
        raise VariantMismatchError("transfer learning starts from a context-free (NoDA) model")
    if not target.fully_annotated:
        raise DataError(f"{target.domain_id}: transfer learning needs masks on every sample")
    config = config or bundle.config
    model = copy.deepcopy(bundle.seg)
    images = prepared_images(target)
    masks = np.stack([s.mask for s in target]).astype(np.float32)
    history = _fit(model, images, masks, config)
    model.eval()
    return ModelBundle(Variant.TRANSFER, model, config, history=history)


# -- inference -----------------------------------------------------------------

def predict(bundle: ModelBundle, images: np.ndarray, memory: Optional[DomainMemory] = None,
            q: Optional[np.ndarray] = None, batch: int = 16) -> np.ndarray:
    """Probabilities for already-preprocessed (n, H, W) images."""
    images = np.asarray(images, dtype=np.float32)
    ctx = None
    if bundle.variant.uses_context:
        if memory is None:
            raise VariantMismatchError(f"{bundle.variant.value} inference needs a memory")
        if q is None:
            q = np.stack([query_features(im, bundle.config.wavelet_levels) for im in images])
        ctx = torch.from_numpy(context_vectors(memory, q, bundle.config))
    model = bundle.seg.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            c = ctx[i:i + batch] if ctx is not None else None
            out.append(model.predict(to_tensor(images[i:i + batch]), c)[:, 0])
    return torch.cat(out).numpy()


INSERTION_POLICIES = ("always", "only-annotated", "never")


@dataclass
class DeploymentState:
    bundle: ModelBundle
    memory: Optional[DomainMemory]
    insertion_policy: str = "always"
    skipped: list = field(default_factory=list)
    steps: int = 0

    def __post_init__(self):
        if self.insertion_policy not in INSERTION_POLICIES:
            raise ValueError(f"unknown insertion policy {self.insertion_policy!r}")
        want = self.bundle.variant.memory_variant
        if want is not None:
            if self.memory is None:
                raise VariantMismatchError(f"{self.bundle.variant.value} deployment needs a memory")
            if self.memory.variant != want:
                raise VariantMismatchError(f"{self.bundle.variant.value} needs a {want!r} memory, "
                                           f"got {self.memory.variant!r}")
            if self.memory.extractor_id != self.bundle.extractor_id:
                raise VariantMismatchError("memory and bundle use different texture extractors")


def infer(state: DeploymentState, image: np.ndarray) -> np.ndarray:
    """Segment one raw image against the state's memory; never updates parameters."""
    image = np.asarray(image)
    res = state.bundle.config.resolution
    if image.shape != (res, res):
        raise DimensionError(f"image is {image.shape}, model expects ({res}, {res})")
    return predict(state.bundle, preprocess(image)[None], state.memory)[0]


def deploy_step(state: DeploymentState, image: np.ndarray, annotation: Optional[np.ndarray] = None,
                sample_id: Optional[str] = None):
    """Predict first, then (per policy) insert this case into the memory.

    Returns ``(prediction, state)``; the state is updated in place.
    """
    pred = infer(state, image)
    state.steps += 1
    bundle = state.bundle
    if annotation is not None:
        annotation = np.asarray(annotation)
        if annotation.shape != image.shape or not np.isin(annotation, (0, 1)).all():
            raise DataError("annotation must be a binary mask with the image's dimensions")
    if state.memory is None or state.insertion_policy == "never":
        return pred, state
    sid = sample_id or f"deploy-{state.steps - 1:06d}"
    supervised = bundle.variant is Variant.CN2
    if annotation is None and (supervised or state.insertion_policy == "only-annotated"):
        state.skipped.append(sid)
        return pred, state
    prepared = preprocess(image)
    q = query_features(prepared, bundle.config.wavelet_levels)
    t = bundle.extractor(prepared)
    g = bundle.sae.encode(annotation.astype(np.float32)) if supervised else None
    state.memory.insert(MemoryRecord(sid, q, t, g))
    return pred, state
