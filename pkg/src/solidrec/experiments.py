"""Glue between configs, data preparation, training runs and their output files."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from . import semantics as sem
from .checkpoint import codebook_provenance, save_checkpoint
from .codebook import save_codebook
from .config import ExperimentConfig, ModelConfig
from .data import DataError, InteractionLog, SplitDataset, build_dataset, load_interactions, read_dataset
from .evaluation import make_perturbations, stability_variance
from .synthetic import SyntheticData, generate, read_categories
from .training import FULL, ITEM_DSR, MODULE_ROWS, ModelDims, RunResult, Variant, predict, run_variant

logger = logging.getLogger(__name__)

MODALITIES = ("id", "image", "text")
MODALITY_ROWS = tuple(c for r in (1, 2, 3) for c in itertools.combinations(MODALITIES, r))


@dataclass
class Prepared:
    data: SplitDataset
    semantic_map: sem.SemanticMap
    modalities: sem.ModalityEmbeddings
    log: InteractionLog | None = None
    categories: dict | None = None
    synthetic: SyntheticData | None = None
    input_checksums: dict | None = None

    @property
    def n_semantics(self) -> int:
        return self.semantic_map.k

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.data.user_vocab_size, self.data.item_vocab_size, self.n_semantics)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _raw_data(cfg: ExperimentConfig):
    """(split dataset, modalities, categories, log, synthetic, checksums) before lifting."""
    d = cfg.data
    if d.synthetic:
        syn = generate(d.synthetic_config(cfg.seed))
        data = build_dataset(syn.log, d.seq_len, d.negatives, cfg.seed)
        return data, syn.modalities, syn.categories, syn.log, syn, {}
    if not d.path:
        raise DataError("data.path is required when data.synthetic is false")
    path = Path(d.path)
    checksums = {}
    if path.is_dir():
        data, _ = read_dataset(path)
        log = None
        checksums["dataset_manifest"] = file_sha256(path / "manifest.json")
    else:
        log = load_interactions(path, d.format or None)
        data = build_dataset(log, d.seq_len, d.negatives, cfg.seed)
        checksums["interactions"] = file_sha256(path)
    if not d.modalities_dir:
        raise DataError("data.modalities_dir is required for real data")
    try:
        modalities = sem.read_modalities(d.modalities_dir)
    except ValueError as exc:
        raise DataError(f"{d.modalities_dir}: {exc}") from exc
    if modalities.n_items != data.item_vocab_size:
        raise DataError(f"modality tables cover {modalities.n_items} items, dataset has {data.item_vocab_size}")
    categories = read_categories(d.categories) if d.categories else None
    return data, modalities, categories, log, None, checksums


def semantic_map_for(cfg: ExperimentConfig, modalities, categories, n_items: int, selection=None) -> sem.SemanticMap:
    fused = sem.fuse_modalities(modalities, selection or cfg.semantics.modalities)
    if cfg.semantics.source == "category":
        if categories is None:
            raise DataError("semantics.source = category needs category labels")
        smap, _ = sem.semantics_from_categories(fused, categories)
        return smap
    k = cfg.semantics.k or (cfg.data.semantics if cfg.data.synthetic else sem.default_semantic_count(n_items))
    return sem.cluster_semantics(fused, k, seed=cfg.seed, max_iter=cfg.semantics.max_iter)


def lift_dataset(data: SplitDataset, smap: sem.SemanticMap) -> SplitDataset:
    out = {}
    for name in ("train", "valid", "test"):
        s = getattr(data, name)
        out[name] = replace(s, seq_c=sem.lift_array(s.seq_v, smap))
    return replace(data, **out)


def prepare(cfg: ExperimentConfig, selection=None) -> Prepared:
    data, modalities, categories, log, syn, checksums = _raw_data(cfg)
    smap = semantic_map_for(cfg, modalities, categories, data.item_vocab_size, selection)
    return Prepared(lift_dataset(data, smap), smap, modalities, log, categories, syn, checksums)


def relift(prepared: Prepared, cfg: ExperimentConfig, selection) -> Prepared:
    """Same interactions, semantics recomputed from a different modality subset."""
    smap = semantic_map_for(cfg, prepared.modalities, prepared.categories, prepared.data.item_vocab_size, selection)
    return replace(prepared, data=lift_dataset(prepared.data, smap), semantic_map=smap)


def train(prepared: Prepared, cfg: ExperimentConfig, variant: Variant | None = None, warm_start=None, dtype=torch.float32) -> RunResult:
    variant = variant or cfg.model.variant
    return run_variant(
        variant, prepared.data, prepared.n_semantics, cfg.train, cfg.backbone, cfg.generator,
        cfg.eval.ks, dtype, warm_start,
    )


def run_rows(prepared: Prepared, cfg: ExperimentConfig, rows=MODULE_ROWS) -> dict[Variant, RunResult]:
    """Train each ablation row, reusing a finished first stage wherever a row extends another."""
    results: dict[Variant, RunResult] = {}
    for v in rows:
        base = next((results[b] for b in results if b.stages == v.stages[:1] and len(v.stages) > 1), None)
        results[v] = train(prepared, cfg, v, warm_start=base)
    return results


# -- output files -----------------------------------------------------------------


def write_run(directory, result: RunResult, cfg: ExperimentConfig, prepared: Prepared) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "run_log.tsv").write_text("stage\tepoch\ttrain_loss\tvalid_auc\n" + "".join(line + "\n" for line in result.log))
    result.report.write(d, "test_report")
    cfg.save(d / "config.txt")
    prov = codebook_provenance(result.model)
    save_checkpoint(d / "checkpoint", result.model, replace(cfg, model=_model_section(result.variant)), prepared.dims, result.eval_stage, prov)
    if result.model.codebook is not None:
        save_codebook(d / "codebook", result.model.codebook)
        with open(d / "codebook_usage.tsv", "w") as f:
            f.write("code\tcount\n")
            for c, n in enumerate(result.codebook_hist):
                f.write(f"{c}\t{n}\n")
        if result.dead_codes:
            logger.warning("%s: %d dead codes %s", result.variant.name, len(result.dead_codes), result.dead_codes)
    sem.write_semantic_map(d / "semantics", prepared.semantic_map)
    manifest = {
        "variant": result.variant.name,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "inputs": prepared.input_checksums or {},
        "outputs": {p.name: file_sha256(p) for p in sorted(d.iterdir()) if p.is_file() and p.name != "manifest.json"},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _model_section(variant: Variant):
    return ModelConfig(variant.spg, variant.sml, variant.scl, variant.static)


def write_table(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as f:
        f.write("\t".join(header) + "\n")
        for r in rows:
            f.write("\t".join(f"{x:.10f}" if isinstance(x, float) else str(x) for x in r) + "\n")


def metric_row(report, ks) -> list[float]:
    row = [report.auc, report.uauc]
    for k in ks:
        row += [report.ndcg[k], report.recall[k]]
    return row


def metric_header(ks) -> list[str]:
    h = ["auc", "uauc"]
    for k in ks:
        h += [f"ndcg@{k}", f"recall@{k}"]
    return h


# -- stability --------------------------------------------------------------------


def stability(prepared: Prepared, cfg: ExperimentConfig, results: dict[str, RunResult]) -> dict[str, dict[str, float]]:
    """Variance summary of per-user AUC under one-behavior perturbations, per named model."""
    perturbed, skipped = make_perturbations(
        prepared.data.test, prepared.data.histories, prepared.semantic_map.assignment,
        cfg.eval.perturbations, seed=cfg.seed,
    )
    if skipped:
        logger.info("stability: %d users without a perturbation source", len(skipped))
    out = {}
    for name, r in results.items():
        def score(s, r=r):
            return predict(r.model, s, r.eval_stage, cfg.train.T, cfg.train.eval_batch_size)

        _, out[name] = stability_variance(score, perturbed)
    return out


def default_stability_models(results: dict[Variant, RunResult]) -> dict[str, RunResult]:
    return {"solid": results[FULL], "dsr": results[ITEM_DSR]}

