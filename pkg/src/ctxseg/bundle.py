"""Model bundle archive.

A zip (stored, fixed timestamps) holding ``manifest.json`` and one raw little-endian
tensor file per parameter/buffer. The manifest records the variant, TrainConfig,
extractor id and a sha256 per tensor.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import zipfile
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import BundleError
from .pipeline import ModelBundle, TrainConfig, Variant
from .sae import SAEModel
from .segnet import SegModel
from .texture import PRETRAINED, SMALL_ENCODER, BackboneExtractor, SmallEncoderExtractor
from .torchutil import tensor_bytes

FORMAT = "ctxseg-bundle"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _tensor_entries(group: str, state: dict):
    for name in sorted(state):
        t = state[name]
        data = tensor_bytes(t)
        yield {
            "group": group, "name": name, "shape": list(t.shape),
            "dtype": "<f4" if t.is_floating_point() else "<i8",
            "sha256": hashlib.sha256(data).hexdigest(),
            "file": f"tensors/{group}/{name}.bin",
        }, data


def bundle_to_bytes(bundle: ModelBundle) -> bytes:
    seg = bundle.seg
    manifest = {
        "format": FORMAT, "version": VERSION,
        "variant": bundle.variant.value,
        "config": dataclasses.asdict(bundle.config),
        "extractor_id": bundle.extractor_id,
        "seg": {"context_dim": seg.context_dim, "operator": seg.operator, "widths": list(seg.widths),
                "projected_width": seg.projected_width, "size": seg.size},
        "extractor": None, "sae": None,
        "history": [float(h) for h in bundle.history],
        "tensors": [],
    }
    groups = [("seg", seg.state_dict())]
    ext = bundle.extractor
    if ext is not None:
        if ext.kind == SMALL_ENCODER:
            manifest["extractor"] = {"kind": ext.kind, "dim": ext.dim}
            groups.append(("texture", ext.state_dict()))
        else:
            manifest["extractor"] = {"kind": ext.kind, "weights_tag": ext.weights_tag, "pca_dim": ext.pca_dim}
            if ext.pca_components is not None:
                groups.append(("texture", {"pca_mean": torch.from_numpy(ext.pca_mean),
                                           "pca_components": torch.from_numpy(ext.pca_components)}))
    if bundle.sae is not None:
        manifest["sae"] = {"size": bundle.sae.size, "latent_dim": bundle.sae.latent_dim,
                           "trained": bundle.sae.trained, "history": list(bundle.sae.history)}
        groups.append(("sae", bundle.sae.state_dict()))

    payload = []
    for group, state in groups:
        for entry, data in _tensor_entries(group, state):
            manifest["tensors"].append(entry)
            payload.append((entry["file"], data))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for name, data in payload:
            _write(zf, name, data)
    return buf.getvalue()


def save_bundle(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.write_bytes(bundle_to_bytes(bundle))
    return path


def _read_state(zf: zipfile.ZipFile, manifest: dict, group: str) -> dict:
    state = {}
    for entry in manifest["tensors"]:
        if entry["group"] != group:
            continue
        try:
            data = zf.read(entry["file"])
        except KeyError as exc:
            raise BundleError(f"bundle is missing {entry['file']}") from exc
        except (zipfile.BadZipFile, zlib.error) as exc:
            raise BundleError(f"corrupt tensor {group}/{entry['name']}: {exc}") from exc
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise BundleError(f"checksum mismatch for tensor {group}/{entry['name']}")
        arr = np.frombuffer(data, dtype=entry["dtype"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return state


def bundle_from_bytes(data: bytes, vgg_weights=None) -> ModelBundle:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
        manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise BundleError(f"not a model bundle: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise BundleError("not a model bundle (format tag)")
    if manifest.get("version") != VERSION:
        raise BundleError(f"bundle version {manifest.get('version')} unsupported")
    with zf:
        config = TrainConfig(**manifest["config"])
        s = manifest["seg"]
        seg = SegModel(s["context_dim"], s["operator"], s["widths"], s["projected_width"], s["size"])
        seg.load_state_dict(_read_state(zf, manifest, "seg"))
        seg.eval()

        extractor = None
        ext = manifest["extractor"]
        if ext is not None and ext["kind"] == SMALL_ENCODER:
            extractor = SmallEncoderExtractor.from_state_dict(_read_state(zf, manifest, "texture"), ext["dim"])
        elif ext is not None and ext["kind"] == PRETRAINED:
            extractor = BackboneExtractor.from_weights(vgg_weights, ext["pca_dim"])
            pca = _read_state(zf, manifest, "texture")
            if pca:
                extractor.pca_mean = pca["pca_mean"].numpy().astype(np.float64)
                extractor.pca_components = pca["pca_components"].numpy().astype(np.float64)
        if extractor is not None and extractor.extractor_id != manifest["extractor_id"]:
            raise BundleError("texture extractor id does not match the manifest")

        sae = None
        if manifest["sae"] is not None:
            info = manifest["sae"]
            sae = SAEModel(info["size"], info["latent_dim"])
            sae.load_state_dict(_read_state(zf, manifest, "sae"))
            sae.trained = info["trained"]
            sae.history = list(info["history"])
            sae.eval()
    return ModelBundle(Variant(manifest["variant"]), seg, config, extractor, sae, list(manifest["history"]))


def load_bundle(path, vgg_weights=None) -> ModelBundle:
    return bundle_from_bytes(Path(path).read_bytes(), vgg_weights)
