import numpy as np
import pytest
import torch

from ctxseg.bundle import bundle_from_bytes, bundle_to_bytes, load_bundle, save_bundle
from ctxseg.data import DatasetHandle, ImageSample, ShiftSpec, preprocess, synth_domain
from ctxseg.errors import BundleError, DataError, DimensionError, VariantMismatchError
from ctxseg.memory import TEXTURE_ONLY, TEXTURE_SHAPE
from ctxseg.pipeline import (DeploymentState, TrainConfig, Variant, build_memory, compute_features,
                             context_dim_for, deploy_step, infer, init_model, new_memory, predict,
                             train_contextnet, train_feature_models, train_noda, transfer_learn)

CFG = TrainConfig(epochs=2, resolution=64, texture_epochs=1, sae_epochs=2, latent_dim=64, texture_dim=32)


def digest(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def source():
    return synth_domain(10, seed=1, size=64, domain_id="src")


@pytest.fixture(scope="module")
def target():
    return synth_domain(6, ShiftSpec(gamma=2.0, invert=True), seed=2, size=64, domain_id="tgt")


@pytest.fixture(scope="module")
def feature_models(source):
    return train_feature_models(source, CFG)


@pytest.fixture(scope="module")
def cn2(source, feature_models):
    ext, sae = feature_models
    mem = build_memory(source, Variant.CN2, ext, sae, CFG)
    return train_contextnet(source, mem, Variant.CN2, CFG, ext, sae), mem


class TestVariant:
    def test_memory_variants(self):
        assert Variant.CN1.memory_variant == TEXTURE_ONLY
        assert Variant.CN2.memory_variant == TEXTURE_SHAPE
        assert Variant.NODA.memory_variant is None and Variant.TRANSFER.memory_variant is None

    def test_parse(self):
        assert Variant.parse("cn2") is Variant.CN2
        assert Variant.parse("TransferLearnt") is Variant.TRANSFER
        with pytest.raises(ValueError):
            Variant.parse("cn3")

    def test_default_protocol(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.T, c.learning_rate, c.operator) == (100, 5, 5, 1e-3, "average")

    def test_context_widths(self):
        d_q, d_t, d_g = CFG.dims
        assert context_dim_for(Variant.CN1, CFG) == d_t
        assert context_dim_for(Variant.CN2, CFG) == d_t + d_g
        assert context_dim_for(Variant.CN2, CFG.replace(aggregation="concat")) == 5 * (d_t + d_g)
        assert context_dim_for(Variant.NODA, CFG) == 0


class TestMemoryConstruction:
    def test_one_record_per_sample(self, source, feature_models):
        ext, sae = feature_models
        m1 = build_memory(source, "cn1", ext, sae, CFG)
        m2 = build_memory(source, "cn2", ext, sae, CFG)
        assert len(m1) == len(m2) == len(source)
        assert all(r.g is None for r in m1.records)
        assert all(r.g.shape == (64,) for r in m2.records)
        ft = compute_features(source, CFG, ext, sae)
        np.testing.assert_array_equal(m2.records[3].q, ft.q[3])
        np.testing.assert_array_equal(m2.records[3].t, ft.t[3])
        np.testing.assert_allclose(m2.records[3].g, sae.encode(source[3].mask), rtol=1e-5, atol=1e-6)

    def test_full_size_source_cohort(self):
        cfg = CFG.replace(resolution=32, texture_epochs=0, sae_epochs=0, latent_dim=256)
        cohort = synth_domain(138, seed=5, size=32, domain_id="cohort")
        ext, sae = train_feature_models(cohort, cfg)
        mem = build_memory(cohort, "cn2", ext, sae, cfg)
        assert len(mem) == 138
        assert all(r.g.shape == (256,) for r in mem.records)

    def test_cn2_needs_masks(self, source, feature_models):
        ext, sae = feature_models
        unlabeled = DatasetHandle("src", tuple(ImageSample(s.id, "src", s.image, s.mask if i else None)
                                               for i, s in enumerate(source)))
        with pytest.raises(DataError, match="src_0000"):
            build_memory(unlabeled, "cn2", ext, sae, CFG)
        assert len(build_memory(unlabeled, "cn1", ext, sae, CFG)) == len(source)


class TestTraining:
    def test_noda_deterministic(self, source):
        a, b = train_noda(source, CFG), train_noda(source, CFG)
        assert a.parameter_digest() == b.parameter_digest()
        assert a.history == b.history
        assert a.extractor is None and a.sae is None

    def test_noda_needs_masks(self, source):
        unlabeled = DatasetHandle("src", tuple(ImageSample(s.id, "src", s.image) for s in source))
        with pytest.raises(DataError):
            train_noda(unlabeled, CFG)

    def test_epochs_zero_is_initialization(self, source, feature_models):
        cfg = CFG.replace(epochs=0)
        ext, sae = feature_models
        b = train_contextnet(source, build_memory(source, "cn1", ext, sae, cfg), "cn1", cfg, ext)
        assert same_state(digest(b.seg), digest(init_model(Variant.CN1, cfg)))
        assert b.history == []

    def test_shared_initialization(self):
        plain = digest(init_model(Variant.NODA, CFG))
        ctx = digest(init_model(Variant.CN2, CFG))
        shared = {k: v for k, v in ctx.items() if not k.startswith("context_proj")}
        assert same_state(plain, shared)

    def test_contextnet_deterministic(self, source, feature_models, cn2):
        ext, sae = feature_models
        bundle, mem = cn2
        again = train_contextnet(source, mem, Variant.CN2, CFG, ext, sae)
        assert again.parameter_digest() == bundle.parameter_digest()
        assert bundle.seg.context_dim == 32 + 64

    def test_loss_decreases(self, source, feature_models):
        ext, sae = feature_models
        cfg = CFG.replace(epochs=15)
        mem = build_memory(source, "cn1", ext, None, cfg)
        b = train_contextnet(source, mem, "cn1", cfg, ext)
        assert b.history[-1] < b.history[0]

    def test_variant_mismatch(self, source, feature_models, cn2):
        ext, sae = feature_models
        _, mem2 = cn2
        with pytest.raises(VariantMismatchError):
            train_contextnet(source, mem2, "cn1", CFG, ext)
        with pytest.raises(VariantMismatchError):
            train_contextnet(source, mem2, "noda", CFG, ext)

    def test_transfer_learn(self, source, target):
        noda = train_noda(source, CFG)
        before = noda.parameter_digest()
        tl = transfer_learn(noda, target, CFG)
        assert tl.variant is Variant.TRANSFER and tl.seg is not noda.seg
        assert noda.parameter_digest() == before != tl.parameter_digest()
        assert transfer_learn(noda, target, CFG.replace(epochs=0)).parameter_digest() == before


class TestDeployment:
    def test_empty_memory_sum_equals_unconditioned(self, source, feature_models):
        ext, sae = feature_models
        cfg = CFG.replace(operator="sum", epochs=1)
        b = train_contextnet(source, build_memory(source, "cn1", ext, None, cfg), "cn1", cfg, ext)
        state = DeploymentState(b, new_memory("tgt", Variant.CN1, cfg, ext.extractor_id))
        image = source[0].image
        with torch.no_grad():
            plain = torch.sigmoid(b.seg.decode_logits(*b.seg.encode_image(
                torch.from_numpy(preprocess(image))[None, None]))).numpy()[0, 0]
        np.testing.assert_array_equal(infer(state, image), plain)

    def test_infer_contract(self, cn2, target):
        bundle, mem = cn2
        state = DeploymentState(bundle, mem)
        out = infer(state, target[0].image)
        assert out.shape == (64, 64) and out.min() > 0 and out.max() < 1
        np.testing.assert_array_equal(out, infer(state, target[0].image))
        with pytest.raises(DimensionError):
            infer(state, np.zeros((32, 32)))

    def test_policies(self, cn2, target, feature_models):
        bundle, _ = cn2
        ext, _ = feature_models
        for policy, annotate, grown in (("never", True, 0), ("always", True, 6), ("only-annotated", True, 6),
                                        ("always", False, 0), ("only-annotated", False, 0)):
            state = DeploymentState(bundle, new_memory("tgt", "cn2", CFG, ext.extractor_id), policy)
            for s in target:
                deploy_step(state, s.image, s.mask if annotate else None, s.id)
            assert len(state.memory) == grown, policy
            assert len(state.skipped) == (0 if annotate or policy == "never" else 6)

    def test_cn1_unannotated_always_grows(self, source, target, feature_models):
        ext, _ = feature_models
        b = train_contextnet(source, build_memory(source, "cn1", ext, None, CFG), "cn1", CFG, ext)
        state = DeploymentState(b, new_memory("tgt", "cn1", CFG, ext.extractor_id))
        for s in target:
            deploy_step(state, s.image)
        assert len(state.memory) == len(target) and not state.skipped

    def test_prediction_precedes_insertion(self, cn2, target, feature_models):
        bundle, _ = cn2
        ext, _ = feature_models
        a = DeploymentState(bundle, new_memory("tgt", "cn2", CFG, ext.extractor_id), "always")
        b = DeploymentState(bundle, new_memory("tgt", "cn2", CFG, ext.extractor_id), "never")
        for s in target:
            pa, _ = deploy_step(a, s.image, s.mask, s.id)
            pb, _ = deploy_step(b, s.image, s.mask, s.id)
            if len(a.memory) == 1:
                np.testing.assert_array_equal(pa, pb)

    def test_parameters_constant(self, cn2, target, feature_models):
        bundle, _ = cn2
        ext, _ = feature_models
        before = bundle.parameter_digest()
        state = DeploymentState(bundle, new_memory("tgt", "cn2", CFG, ext.extractor_id))
        for s in target:
            deploy_step(state, s.image, s.mask, s.id)
        assert bundle.parameter_digest() == before

    def test_malformed_annotation(self, cn2, target, feature_models):
        bundle, _ = cn2
        ext, _ = feature_models
        state = DeploymentState(bundle, new_memory("tgt", "cn2", CFG, ext.extractor_id))
        with pytest.raises(DataError):
            deploy_step(state, target[0].image, np.full((64, 64), 2))
        with pytest.raises(DataError):
            deploy_step(state, target[0].image, np.zeros((32, 32)))

    def test_state_validation(self, cn2, source, feature_models):
        bundle, _ = cn2
        ext, sae = feature_models
        with pytest.raises(VariantMismatchError):
            DeploymentState(bundle, build_memory(source, "cn1", ext, None, CFG))
        with pytest.raises(VariantMismatchError):
            DeploymentState(bundle, None)
        with pytest.raises(ValueError):
            DeploymentState(bundle, new_memory("t", "cn2", CFG, ext.extractor_id), "sometimes")


class TestBundle:
    def test_round_trip(self, cn2, source, tmp_path):
        bundle, mem = cn2
        path = save_bundle(bundle, tmp_path / "cn2.bundle")
        loaded = load_bundle(path)
        assert loaded.variant is bundle.variant and loaded.config == bundle.config
        assert loaded.extractor_id == bundle.extractor_id
        assert same_state(digest(loaded.seg), digest(bundle.seg))
        assert same_state(digest(loaded.sae), digest(bundle.sae))
        assert bundle_to_bytes(loaded) == path.read_bytes()
        ft = compute_features(source, CFG)
        np.testing.assert_array_equal(predict(loaded, ft.images, mem, ft.q), predict(bundle, ft.images, mem, ft.q))

    def test_byte_identical_retrain(self, source):
        assert bundle_to_bytes(train_noda(source, CFG)) == bundle_to_bytes(train_noda(source, CFG))

    def test_corrupt_tensor(self, cn2):
        data = bytearray(bundle_to_bytes(cn2[0]))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(BundleError):
            bundle_from_bytes(bytes(data))

    def test_not_a_bundle(self):
        with pytest.raises(BundleError):
            bundle_from_bytes(b"not a zip")
