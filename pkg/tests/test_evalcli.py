import json

import numpy as np
import pytest
from PIL import Image

from ctxseg.benchmark import ablate, evaluate, make_inputs, run_benchmark
from ctxseg.cli import main
from ctxseg.config import format_config, parse_config
from ctxseg.data import ShiftSpec, save_dataset, synth_domain
from ctxseg.errors import ConfigError, DataError, StageError
from ctxseg.pipeline import TrainConfig, Variant
from ctxseg.report import emit_report, parse_results, read_results, results_text

CFG = TrainConfig(epochs=2, resolution=64, texture_epochs=1, sae_epochs=2, latent_dim=64, texture_dim=32)
CFG_TEXT = "".join(f"{k}={getattr(CFG, k)}\n" for k in
                   ("epochs", "resolution", "texture_epochs", "sae_epochs", "latent_dim", "texture_dim"))


@pytest.fixture(scope="module")
def domains():
    src = synth_domain(8, seed=1, size=64, domain_id="src")
    tgts = [synth_domain(6, ShiftSpec(gamma=2.0, invert=True), seed=2, size=64, domain_id="tgtA"),
            synth_domain(6, ShiftSpec(noise_sigma=0.05), seed=3, size=64, domain_id="tgtB")]
    return src, tgts


@pytest.fixture(scope="module")
def inputs(domains):
    src, tgts = domains
    return make_inputs(src, tgts, CFG, [0, 1], source_train=6, target_memory=4)


@pytest.fixture(scope="module")
def report(inputs):
    return run_benchmark(inputs, None, keep_models=True, keep_cases=True)


class TestConfig:
    def test_parse(self):
        cfg = parse_config("# comment\nepochs = 7\nlearning_rate=0.01\noperator=concat  # inline\n")
        assert (cfg.epochs, cfg.learning_rate, cfg.operator) == (7, 0.01, "concat")
        assert cfg.batch_size == 5

    def test_round_trip(self):
        assert parse_config(format_config(CFG)) == CFG

    @pytest.mark.parametrize("text", ["bogus=1", "epochs", "epochs=abc", "epochs=1\nepochs=2",
                                      "operator=product", "aggregation=max", "batch_size=0"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


class TestBenchmark:
    def test_rows(self, report):
        rows = report.rows()
        assert len(rows) == 4 * 2
        assert {(r["method"], r["target"]) for r in rows} == {(m.value, t) for m in Variant for t in ("tgtA", "tgtB")}
        assert all(r["n"] == 2 * 2 for r in rows)
        assert len(report.rows(in_domain=True)) == 3

    def test_identical_test_samples(self, report):
        for t in report.targets:
            ids = [[r["sample_id"] for r in report.records if r["method"] == m.value and r["target"] == t]
                   for m in Variant]
            assert all(x == ids[0] for x in ids)

    def test_cell_is_median_of_seed_means(self, report):
        means = report.seed_means("cn2", "tgtA")
        assert len(means) == 2
        assert report.cell("cn2", "tgtA") == pytest.approx(np.median(means))

    def test_order_invariance(self, report, inputs):
        models = report.models[0]
        bundle = models.bundles[Variant.CN2]
        mem = models.target_memories[Variant.CN2, "tgtA"]
        ft = next(v for k, v in models.features.items() if k[0] == "tgtA" and k[1] == "test")
        forward, _ = evaluate(bundle, ft, mem)
        rev = type(ft)(ft.ids[::-1], ft.images[::-1], ft.masks[::-1], ft.q[::-1])
        backward, _ = evaluate(bundle, rev, mem)
        assert forward == backward[::-1]

    def test_deterministic(self, report, inputs):
        again = run_benchmark(inputs, None)
        assert again == report
        assert results_text(again) == results_text(report)

    def test_stage_named_on_failure(self, domains):
        src, tgts = domains
        bad = make_inputs(src, tgts, CFG.replace(latent_dim=30), [0], 6, 4)
        with pytest.raises(StageError, match="feature models"):
            run_benchmark(bad, None)

    def test_unannotated_target(self, domains):
        src, tgts = domains
        from ctxseg.data import DatasetHandle, ImageSample
        bare = DatasetHandle("bare", tuple(ImageSample(s.id, "bare", s.image) for s in tgts[0]))
        with pytest.raises(DataError):
            make_inputs(src, [bare], CFG, [0])


class TestAblation:
    def test_single_value_matches_benchmark(self, report, inputs):
        ab = ablate(inputs, "memory_size", ["full"], models=report.models)
        for t in report.targets:
            for m in ("ContextNet1", "ContextNet2"):
                assert ab.cell("full", m, t) == pytest.approx(report.cell(m, t), abs=1e-12)
        ab = ablate(inputs, "context_size", [CFG.T], methods=["cn2"], models=report.models)
        assert ab.cell(CFG.T, "cn2", "tgtA") == pytest.approx(report.cell("cn2", "tgtA"), abs=1e-12)

    def test_memory_axis(self, report, inputs):
        ab = ablate(inputs, "memory_size", [0, 2, "full"], models=report.models)
        assert ab.grid == [0, 2, "full"] and len(ab.rows()) == 3 * 2 * 2

    def test_retraining_axis(self, report, inputs):
        ab = ablate(inputs, "operator", ["sum"], methods=["cn1"], models=report.models)
        assert {r["value"] for r in ab.records} == {"sum"}

    def test_bad_inputs(self, inputs, report):
        with pytest.raises(ValueError):
            ablate(inputs, "memory_size", [], models=report.models)
        with pytest.raises(ValueError):
            ablate(inputs, "depth", [1], models=report.models)
        with pytest.raises(ValueError):
            ablate(inputs, "memory_size", ["full"], methods=["noda"], models=report.models)


class TestReport:
    def test_round_trip_and_files(self, report, tmp_path):
        paths = emit_report(report, tmp_path / "a")
        assert read_results(paths["results"]) == report
        assert parse_results(results_text(report)) == report
        first = paths["results"].read_bytes()
        paths_b = emit_report(report, tmp_path / "b")
        assert paths_b["results"].read_bytes() == first
        assert len(paths["overlays"]) == 3 * 2 + 2 * 4 * 2  # first seed: samples x methods
        assert [p.name for p in paths["plots"]] == ["tgtA.png", "tgtB.png"]
        assert "ContextNet2" in paths["table"].read_text()
        with Image.open(paths["overlays"][0]) as im:
            assert im.size == (3 * 64, 64)

    def test_records_metadata(self, report):
        meta = json.loads(results_text(report).splitlines()[0])
        assert meta["metadata"]["dice"].startswith("per-image")
        assert meta["seeds"] == [0, 1]


class TestCli:
    def test_usage_errors(self, capsys):
        assert main([]) == 1
        assert main(["train", "--variant", "cn3", "--source", "x", "--out", "y"]) == 1
        assert main(["eval", "--source", "x", "--targets", "y", "--seeds", "a", "--out", "z"]) == 1

    def test_config_error(self, tmp_path):
        (tmp_path / "c.txt").write_text("depth=3\n")
        assert main(["train", "--variant", "noda", "--source", str(tmp_path), "--config",
                     str(tmp_path / "c.txt"), "--out", str(tmp_path / "b")]) == 1

    def test_data_error(self, tmp_path):
        assert main(["train", "--variant", "noda", "--source", str(tmp_path / "missing"),
                     "--out", str(tmp_path / "b")]) == 2
        (tmp_path / "m.ctxm").write_bytes(b"garbage")
        assert main(["deploy", "--bundle", str(tmp_path / "m.ctxm"), "--images", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 2

    def test_workflow(self, tmp_path, domains):
        src, tgts = domains
        save_dataset(src, tmp_path)
        save_dataset(tgts[0], tmp_path)
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(CFG_TEXT)
        s, t = str(tmp_path / "src"), str(tmp_path / "tgtA")
        assert main(["synth", "--out", str(tmp_path / "syn"), "--n", "3", "--size", "64", "--invert"]) == 0
        assert len(list((tmp_path / "syn" / "masks").glob("*.png"))) == 3
        assert main(["train", "--variant", "cn2", "--source", s, "--config", str(cfg),
                     "--out", str(tmp_path / "cn2.bundle")]) == 0
        assert main(["build-memory", "--bundle", str(tmp_path / "cn2.bundle"), "--data", t,
                     "--variant", "cn2", "--out", str(tmp_path / "t.ctxm")]) == 0
        assert main(["build-memory", "--bundle", str(tmp_path / "cn2.bundle"), "--data", t,
                     "--variant", "cn1", "--out", str(tmp_path / "x.ctxm")]) == 2
        assert main(["deploy", "--bundle", str(tmp_path / "cn2.bundle"), "--images", f"{t}/images",
                     "--masks", f"{t}/masks", "--policy", "always", "--out", str(tmp_path / "dep")]) == 0
        summary = json.loads((tmp_path / "dep" / "deploy.json").read_text())
        assert summary["memory_records"] == 6 and summary["parameters_unchanged"]
        assert len(list((tmp_path / "dep" / "masks").glob("*.png"))) == 6
        assert main(["deploy", "--bundle", str(tmp_path / "cn2.bundle"), "--images", f"{t}/images",
                     "--policy", "only-annotated", "--out", str(tmp_path / "dep2")]) == 0
        assert len(json.loads((tmp_path / "dep2" / "deploy.json").read_text())["skipped"]) == 6
        assert main(["eval", "--source", s, "--targets", t, "--config", str(cfg), "--seeds", "0",
                     "--no-overlays", "--out", str(tmp_path / "ev")]) == 0
        assert len(read_results(tmp_path / "ev" / "results.jsonl").rows()) == 4
        assert main(["ablate", "--axis", "memory_size", "--grid", "2,full", "--source", s, "--targets", t,
                     "--config", str(cfg), "--out", str(tmp_path / "ab")]) == 0
        assert (tmp_path / "ab" / "ablation.jsonl").exists()
