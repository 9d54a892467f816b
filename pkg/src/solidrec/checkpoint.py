"""Checkpoint directories: one ``.npy`` file per tensor plus ``manifest.json``."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .codebook import SemanticCodebook, tensor_checksum
from .config import ExperimentConfig
from .training import ModelDims, SolidModel, build_model

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _file_name(key: str) -> str:
    return key.replace("/", "_") + ".npy"


def save_checkpoint(
    directory,
    model: SolidModel,
    config: ExperimentConfig,
    dims: ModelDims,
    stage: str,
    extra: dict | None = None,
) -> dict:
    """Write every tensor of ``model`` and a manifest with config hash, shapes and seed."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for key, t in sorted(model.state_dict().items()):
        arr = t.detach().cpu().contiguous().numpy()
        np.save(d / _file_name(key), arr, allow_pickle=False)
        tensors[key] = {
            "file": _file_name(key),
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
        }
    manifest = {
        "format": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_sha256": config.digest(),
        "seed": config.seed,
        "variant": config.model.variant.name,
        "stage": stage,
        "dims": asdict(dims),
        "tensors": tensors,
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"{path}: missing checkpoint manifest")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(directory, verify: bool = True) -> tuple[SolidModel, ExperimentConfig, dict]:
    """Rebuild the model recorded in ``directory``; returns (model, config, manifest)."""
    d = Path(directory)
    manifest = read_manifest(d)
    config = ExperimentConfig.from_dict(manifest["config"])
    dims = ModelDims(**manifest["dims"])
    tensors = {}
    for key, meta in manifest["tensors"].items():
        arr = np.load(d / meta["file"], allow_pickle=False)
        if list(arr.shape) != meta["shape"]:
            raise CheckpointError(f"{key}: shape {arr.shape} != manifest {meta['shape']}")
        if verify and hashlib.sha256(arr.tobytes()).hexdigest() != meta["sha256"]:
            raise CheckpointError(f"{key}: checksum mismatch")
        tensors[key] = torch.from_numpy(arr)
    dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
    model = build_model(config.model.variant, dims, config.backbone, config.generator, config.seed, dtype)
    if "codebook.D" in tensors:
        model.codebook = SemanticCodebook(tensors["codebook.D"].clone())
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"state mismatch: missing {missing}, unexpected {unexpected}")
    return model, config, manifest


def codebook_provenance(model: SolidModel) -> dict:
    """Checksums tying a codebook to the semantic encoder it was seeded from."""
    out = {}
    if model.codebook is not None:
        out["codebook_sha256"] = tensor_checksum(model.codebook.D)
    if model.semantic_generator is not None:
        out["semantic_encoder_sha256"] = tensor_checksum(model.semantic_generator.embedding.weight[1:])
    return out
