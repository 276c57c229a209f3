"""Result files: JSON-lines records, a text table, mask overlays and bar plots."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .benchmark import AblationReport, BenchmarkReport

RESULTS = "results.jsonl"
TABLE = "table.txt"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def results_text(report: BenchmarkReport) -> str:
    meta = {"type": "meta", "source": report.source, "targets": report.targets, "seeds": report.seeds,
            "config": report.config, "metadata": report.metadata}
    lines = [_dumps(meta)] + [_dumps({"type": "sample", **r}) for r in report.records]
    return "\n".join(lines) + "\n"


def parse_results(text: str) -> BenchmarkReport:
    lines = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not lines or lines[0].get("type") != "meta":
        raise ValueError("results file must start with a meta record")
    meta = lines[0]
    records = []
    for rec in lines[1:]:
        rec = dict(rec)
        if rec.pop("type", None) != "sample":
            raise ValueError(f"unexpected record {rec!r}")
        records.append(rec)
    return BenchmarkReport(meta["source"], meta["targets"], meta["seeds"], meta["config"], records,
                           meta["metadata"])


def read_results(path) -> BenchmarkReport:
    return parse_results(Path(path).read_text())


def format_table(report: BenchmarkReport) -> str:
    header = f"{'method':<16}{'target':<14}{'mean':>8}{'std':>8}{'n':>6}{'median/seeds':>14}"
    out = [f"source: {report.source}   seeds: {report.seeds}   dice: {report.metadata.get('dice', '')}",
           header, "-" * len(header)]
    for in_domain in (True, False):
        for r in report.rows(in_domain=in_domain):
            target = r["target"] + (" (in)" if in_domain else "")
            out.append(f"{r['method']:<16}{target:<14}{r['mean']:>8.4f}{r['std']:>8.4f}{r['n']:>6}"
                       f"{r['median_over_seeds']:>14.4f}")
    return "\n".join(out) + "\n"


def _to_u8(a: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(np.round(np.asarray(a, dtype=np.float64) * scale), 0, 255).astype(np.uint8)


def overlay_image(image, gt, pred) -> np.ndarray:
    """input | ground truth | prediction, side by side."""
    return np.concatenate([_to_u8(image, 255), _to_u8(gt, 255), _to_u8(pred, 255)], axis=1)


def _bar_plot(report: BenchmarkReport, target: str, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in report.rows() if r["target"] == target]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([r["method"] for r in rows], [r["mean"] for r in rows], yerr=[r["std"] for r in rows],
           color="#4c72b0", capsize=4)
    ax.set_ylim(0, 1)
    ax.set_ylabel("Dice")
    ax.set_title(f"{report.source} -> {target}")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: BenchmarkReport, out_dir, overlays: bool = True, plots: bool = True) -> dict:
    """Write the results file, table, per-case overlays (when the report kept cases) and plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / RESULTS, "table": out / TABLE, "overlays": [], "plots": []}
    paths["results"].write_text(results_text(report))
    paths["table"].write_text(format_table(report))
    if overlays:
        for method, target, sid, image, gt, pred in report.cases:
            d = out / "overlays" / target / method
            d.mkdir(parents=True, exist_ok=True)
            p = d / f"{sid}.png"
            Image.fromarray(overlay_image(image, gt, pred)).save(p)
            paths["overlays"].append(p)
    if plots:
        (out / "plots").mkdir(exist_ok=True)
        for target in report.targets:
            p = out / "plots" / f"{target}.png"
            _bar_plot(report, target, p)
            paths["plots"].append(p)
    return paths


def ablation_text(report: AblationReport) -> str:
    meta = {"type": "meta", "axis": report.axis, "grid": report.grid, "seeds": report.seeds}
    return "\n".join([_dumps(meta)] + [_dumps({"type": "value", **r}) for r in report.records]) + "\n"


def parse_ablation(text: str) -> AblationReport:
    lines = [json.loads(line) for line in text.splitlines() if line.strip()]
    meta, records = lines[0], []
    for rec in lines[1:]:
        rec = dict(rec)
        rec.pop("type")
        records.append(rec)
    return AblationReport(meta["axis"], meta["grid"], meta["seeds"], records)


def emit_ablation(report: AblationReport, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "ablation.jsonl", "table": out / "ablation.txt"}
    paths["results"].write_text(ablation_text(report))
    lines = [f"axis: {report.axis}   seeds: {report.seeds}",
             f"{'value':<10}{'method':<16}{'target':<14}{'median Dice':>12}"]
    for r in report.rows():
        lines.append(f"{str(r['value']):<10}{r['method']:<16}{r['target']:<14}{r['median_over_seeds']:>12.4f}")
    paths["table"].write_text("\n".join(lines) + "\n")
    return paths
