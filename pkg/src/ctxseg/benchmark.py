"""Four-method benchmark over source and target domains, plus ablation sweeps."""

from __future__ import annotations

import contextlib
import dataclasses
import logging
import statistics
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import DatasetHandle, ShiftSpec, split_dataset, synth_domain
from .errors import DataError, StageError
from .metrics import binarize, dice
from .pipeline import (FeatureTable, ModelBundle, TrainConfig, Variant, build_memory, compute_features,
                       predict, train_contextnet, train_feature_models, train_noda, transfer_learn)

log = logging.getLogger(__name__)

METHODS = (Variant.NODA, Variant.CN1, Variant.CN2, Variant.TRANSFER)
CONTEXT_METHODS = (Variant.CN1, Variant.CN2)
AXES = ("context_size", "memory_size", "operator")
DICE_MODE = "per-image, then mean over images"


@dataclass(frozen=True)
class TargetSplit:
    """Target data visible at deployment (memory / fine-tuning pool) and its held-out test split."""
    memory: DatasetHandle
    test: DatasetHandle

    @property
    def domain_id(self) -> str:
        return self.test.domain_id


@dataclass(frozen=True)
class BenchmarkInputs:
    source: DatasetHandle
    source_test: DatasetHandle
    targets: tuple
    config: TrainConfig
    seeds: tuple

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.targets:
            raise ValueError("at least one target domain is required")
        for ds in (self.source, self.source_test):
            if not ds.fully_annotated:
                raise DataError(f"{ds.domain_id}: source data must be fully annotated")
        for t in self.targets:
            if not (t.memory.fully_annotated and t.test.fully_annotated):
                raise DataError(f"{t.domain_id}: target data must be annotated for scoring")
        names = [t.domain_id for t in self.targets]
        if len(set(names)) != len(names) or self.source.domain_id in names:
            raise DataError("source and target domain ids must be distinct")


def make_inputs(source: DatasetHandle, targets: Sequence[DatasetHandle], config: TrainConfig,
                seeds: Sequence[int], source_train: Optional[int] = None,
                target_memory: Optional[int] = None) -> BenchmarkInputs:
    """Split by id order: the first ``source_train`` source samples train (default 3/4), the first
    ``target_memory`` target samples form the memory pool (default 2/3); the rest are test."""
    n_src = source_train if source_train is not None else (3 * len(source)) // 4
    src_train, src_test = split_dataset(source, n_src)
    splits = []
    for t in targets:
        n_mem = target_memory if target_memory is not None else (2 * len(t)) // 3
        mem, test = split_dataset(t, n_mem)
        splits.append(TargetSplit(mem, test))
    return BenchmarkInputs(src_train, src_test, tuple(splits), config, tuple(int(s) for s in seeds))


def synthetic_benchmark(config: TrainConfig, seeds: Sequence[int], *, n_source: int = 80, n_source_train: int = 60,
                        n_target: int = 60, n_target_memory: int = 40, data_seed: int = 0,
                        invert_fraction: float = 0.2, acquisition_noise: float = 0.08) -> BenchmarkInputs:
    """Synthetic source and one shifted target (gamma 2.2, inverted, noise 0.05, 4 px deformation
    at 256 px, scaled with the working resolution).

    Both domains vary per-image acquisition noise and invert a minority of images, so the source
    is not photometrically uniform.
    """
    size = config.resolution
    common = dict(size=size, invert_fraction=invert_fraction, max_acquisition_noise=acquisition_noise)
    source = synth_domain(n_source, seed=100 + data_seed, domain_id="synth-source", **common)
    shift = ShiftSpec(gamma=2.2, invert=True, noise_sigma=0.05, deform_magnitude=4.0 * size / 256)
    target = synth_domain(n_target, shift, seed=200 + data_seed, domain_id="synth-target", **common)
    return make_inputs(source, [target], config, seeds, n_source_train, n_target_memory)


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# -- per-seed models ---------------------------------------------------------------

@dataclass
class SeedModels:
    """Everything trained for one seed, kept so inference-only sweeps can reuse it."""
    seed: int
    config: TrainConfig
    extractor: object
    sae: object
    bundles: dict
    source_memories: dict
    target_memories: dict
    features: dict = field(default_factory=dict, repr=False)


def _features(models: SeedModels, ds: DatasetHandle) -> FeatureTable:
    key = (ds.domain_id, ds.split, tuple(ds.ids))
    if key not in models.features:
        models.features[key] = compute_features(ds, models.config, models.extractor, models.sae)
    return models.features[key]


def train_context_models(inputs: BenchmarkInputs, models: SeedModels, config: TrainConfig,
                         variants=CONTEXT_METHODS) -> dict:
    src_ft = _features(models, inputs.source)
    out = {}
    for v in variants:
        mem = models.source_memories[v]
        with stage(f"train {v.value} (seed {config.seed})"):
            out[v] = train_contextnet(inputs.source, mem, v, config, models.extractor, models.sae, src_ft)
    return out


def train_seed(inputs: BenchmarkInputs, seed: int) -> SeedModels:
    config = inputs.config.replace(seed=seed)
    with stage(f"feature models (seed {seed})"):
        extractor, sae = train_feature_models(inputs.source, config)
    models = SeedModels(seed, config, extractor, sae, {}, {}, {})
    src_ft = _features(models, inputs.source)
    for v in CONTEXT_METHODS:
        with stage(f"source memory {v.value} (seed {seed})"):
            models.source_memories[v] = build_memory(inputs.source, v, extractor, sae, config, src_ft)
        for t in inputs.targets:
            with stage(f"target memory {v.value}/{t.domain_id} (seed {seed})"):
                models.target_memories[v, t.domain_id] = build_memory(
                    t.memory, v, extractor, sae, config, _features(models, t.memory))
    with stage(f"train NoDA (seed {seed})"):
        models.bundles[Variant.NODA] = train_noda(inputs.source, config)
    models.bundles.update(train_context_models(inputs, models, config))
    for t in inputs.targets:
        with stage(f"transfer to {t.domain_id} (seed {seed})"):
            models.bundles[Variant.TRANSFER, t.domain_id] = transfer_learn(
                models.bundles[Variant.NODA], t.memory, config)
    return models


def evaluate(bundle: ModelBundle, test: FeatureTable, memory=None) -> tuple[list, np.ndarray]:
    """Per-sample Dice; images run one at a time so scores do not depend on batch composition."""
    probs = predict(bundle, test.images, memory, test.q, batch=1)
    preds = binarize(probs)
    scores = [dice(p, m) for p, m in zip(preds, test.masks)]
    return scores, preds


# -- report --------------------------------------------------------------------------

def _summary(values: list) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


@dataclass
class BenchmarkReport:
    source: str
    targets: list
    seeds: list
    config: dict
    records: list
    metadata: dict = field(default_factory=dict)
    cases: list = field(default_factory=list, compare=False, repr=False)
    models: dict = field(default_factory=dict, compare=False, repr=False)

    def scores(self, method, target: str, seed: Optional[int] = None) -> list:
        method = Variant.parse(method).value
        return [r["dice"] for r in self.records if r["method"] == method and r["target"] == target
                and (seed is None or r["seed"] == seed)]

    def seed_means(self, method, target: str) -> list:
        return [float(np.mean(self.scores(method, target, s))) for s in self.seeds]

    def cell(self, method, target: str) -> float:
        """Median over seeds of the per-seed mean Dice."""
        return float(statistics.median(self.seed_means(method, target)))

    def rows(self, in_domain: bool = False) -> list:
        targets = [self.source] if in_domain else self.targets
        out = []
        for target in targets:
            for m in METHODS:
                vals = self.scores(m, target)
                if not vals:
                    continue
                out.append({"method": m.value, "source": self.source, "target": target,
                            **_summary(vals), "median_over_seeds": self.cell(m, target)})
        return out


def run_benchmark(source, targets, config: Optional[TrainConfig] = None, seeds: Sequence[int] = (0,), *,
                  source_train: Optional[int] = None, target_memory: Optional[int] = None,
                  keep_models: bool = False, keep_cases: bool = False) -> BenchmarkReport:
    """Train NoDA, ContextNet1 and ContextNet2 on the source and TransferLearnt per target, then
    score all four on every target test split (and the first three on the source test split).

    ``source`` may be a :class:`BenchmarkInputs`, in which case the remaining split arguments are ignored.
    """
    if isinstance(source, BenchmarkInputs):
        inputs = source
    else:
        inputs = make_inputs(source, targets, config or TrainConfig(), seeds, source_train, target_memory)
    records, cases, kept = [], [], {}
    for seed in inputs.seeds:
        models = train_seed(inputs, seed)
        jobs = [(inputs.source.domain_id, inputs.source_test, m, models.bundles[m],
                 models.source_memories.get(m)) for m in METHODS[:3]]
        for t in inputs.targets:
            for m in METHODS:
                bundle = models.bundles[(m, t.domain_id) if m is Variant.TRANSFER else m]
                jobs.append((t.domain_id, t.test, m, bundle, models.target_memories.get((m, t.domain_id))))
        for target, test, method, bundle, memory in jobs:
            with stage(f"evaluate {method.value} on {target} (seed {seed})"):
                ft = _features(models, test)
                scores, preds = evaluate(bundle, ft, memory)
            for sid, score in zip(ft.ids, scores):
                records.append({"method": method.value, "source": inputs.source.domain_id, "target": target,
                                "seed": seed, "sample_id": sid, "dice": score})
            if keep_cases and seed == inputs.seeds[0]:
                cases.extend((method.value, target, sid, ft.images[i], ft.masks[i], preds[i])
                             for i, sid in enumerate(ft.ids))
        log.info("seed %d done", seed)
        if keep_models:
            kept[seed] = models
    order = {m.value: i for i, m in enumerate(METHODS)}
    records.sort(key=lambda r: (order[r["method"]], r["target"], r["seed"], r["sample_id"]))
    return BenchmarkReport(
        source=inputs.source.domain_id, targets=[t.domain_id for t in inputs.targets],
        seeds=list(inputs.seeds), config=dataclasses.asdict(inputs.config), records=records,
        metadata={"dice": DICE_MODE, "threshold": 0.5,
                  "source_train": len(inputs.source), "source_test": len(inputs.source_test),
                  "target_memory": {t.domain_id: len(t.memory) for t in inputs.targets},
                  "target_test": {t.domain_id: len(t.test) for t in inputs.targets}},
        cases=cases, models=kept)


# -- ablation --------------------------------------------------------------------------

@dataclass
class AblationReport:
    axis: str
    grid: list
    seeds: list
    records: list

    def cell(self, value, method, target: str) -> float:
        method = Variant.parse(method).value
        vals = [r["mean_dice"] for r in self.records
                if r["value"] == value and r["method"] == method and r["target"] == target]
        if not vals:
            raise KeyError((value, method, target))
        return float(statistics.median(vals))

    def rows(self) -> list:
        keys = []
        for r in self.records:
            k = (r["value"], r["method"], r["target"])
            if k not in keys:
                keys.append(k)
        return [{"value": v, "method": m, "target": t, "median_over_seeds": self.cell(v, m, t)}
                for v, m, t in keys]


def _grid_value(axis: str, value):
    if axis == "memory_size":
        if value in (None, "full"):
            return "full"
        n = int(value)
        if n < 0:
            raise ValueError("memory size must be non-negative")
        return n
    if axis == "context_size":
        n = int(value)
        if n < 1:
            raise ValueError("context size must be >= 1")
        return n
    return str(value)


def ablate(inputs: BenchmarkInputs, axis: str, grid: Sequence, methods=CONTEXT_METHODS,
           models: Optional[dict] = None) -> AblationReport:
    """Sweep one axis; memory_size reuses the trained models, the other axes retrain the
    context models. ``models`` maps seed to :class:`SeedModels` from an earlier run."""
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; expected one of {AXES}")
    grid = [_grid_value(axis, v) for v in grid]
    if not grid:
        raise ValueError("ablation grid is empty")
    methods = [Variant.parse(m) for m in methods]
    if any(not m.uses_context for m in methods):
        raise ValueError("ablations apply to ContextNet variants only")
    models = dict(models or {})
    records = []
    for seed in inputs.seeds:
        if seed not in models:
            models[seed] = train_seed(inputs, seed)
        base = models[seed]
        for value in grid:
            bundles = {m: base.bundles[m] for m in methods}
            if axis in ("context_size", "operator"):
                field_name = "T" if axis == "context_size" else "operator"
                if getattr(base.config, field_name) != value:
                    config = base.config.replace(**{field_name: value})
                    bundles = train_context_models(inputs, base, config, methods)
            for t in inputs.targets:
                test = _features(base, t.test)
                for m in methods:
                    memory = base.target_memories[m, t.domain_id]
                    if axis == "memory_size" and value != "full":
                        memory = memory.truncated(value)
                    with stage(f"ablation {axis}={value} {m.value} on {t.domain_id} (seed {seed})"):
                        scores, _ = evaluate(bundles[m], test, memory)
                    records.append({"value": value, "method": m.value, "target": t.domain_id,
                                    "seed": seed, "mean_dice": float(np.mean(scores)), "n": len(scores)})
    return AblationReport(axis, grid, list(inputs.seeds), records)


__all__ = ["METHODS", "AXES", "TargetSplit", "BenchmarkInputs", "BenchmarkReport", "AblationReport",
           "SeedModels", "make_inputs", "synthetic_benchmark", "run_benchmark", "ablate", "train_seed", "evaluate"]
