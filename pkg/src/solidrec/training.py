"""Losses and the staged optimisation pipeline.

Stages:

* ``sr``  - static model, no generated parameters.
* ``dsr`` - dynamic layers generated from the item sequence.
* ``spg`` - dynamic layers generated from the semantic sequence.
* ``sml`` - trunk (semantic) + clipped branch (item) generation.
* ``scl`` - as ``sml`` but the branch reads codebook-quantized item
  representations, plus ``lam`` x commitment loss. Without a trunk the branch
  output is used unclipped.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, Recommender
from .codebook import SemanticCodebook, codebook_usage, commitment_loss, init_from_metacode, quantize
from .data import Samples, SplitDataset, sample_negatives
from .evaluation import EvalReport, auc, evaluate
from .hypernet import GeneratorConfig, ParamGenerator, extract_metacode, fuse_params
from .semantics import kmeans

logger = logging.getLogger(__name__)

STAGES = ("sr", "dsr", "spg", "sml", "scl")


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"[{stage}] epoch {epoch}: {message}")
        self.stage = stage
        self.epoch = epoch


class StageError(RuntimeError):
    """Wraps any failure inside a pipeline stage with the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 20
    lam: float = 0.1
    T: float = 0.01
    seed: int = 0
    patience: int = 3
    min_rel_improvement: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0  # Adam L2 term
    eval_batch_size: int = 8192
    restore_best: bool = True
    resample_negatives: bool = False  # fresh training negatives every epoch after the first

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.lam < 0 or self.T < 0 or self.weight_decay < 0:
            raise ValueError("lam, T and weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size >= 1, epochs >= 0 and patience >= 1 required")
        self.betas = tuple(self.betas)


def ce_loss(y_hat: torch.Tensor, y: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    if y.numel() and not bool(((y == 0) | (y == 1)).all()):
        raise ValueError("labels must be 0 or 1")
    y = y.to(y_hat.dtype)
    p = y_hat.clamp(eps, 1 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


# -- model assembly ----------------------------------------------------------------


class SolidModel(nn.Module):
    """Backbone plus whichever generators / codebook the current stage uses."""

    def __init__(
        self,
        backbone: Recommender,
        item_generator: ParamGenerator | None = None,
        semantic_generator: ParamGenerator | None = None,
        codebook: SemanticCodebook | None = None,
    ):
        super().__init__()
        self.backbone = backbone
        self.item_generator = item_generator
        self.semantic_generator = semantic_generator
        self.codebook = codebook
        self.straight_through = True

    def _seq(self, batch):
        return batch["seq_c"] if self.backbone.sequence_source == "semantic" else batch["seq_v"]

    def trunk(self, batch):
        return self.semantic_generator(batch["seq_c"])

    def dynamic_params(self, batch, stage: str, T: float = 0.01):
        """Generated matrices for ``stage`` plus auxiliary tensors (codes, commitment loss)."""
        aux: dict = {}
        if stage == "sr":
            return None, aux
        if stage == "dsr":
            return self.item_generator(batch["seq_v"]), aux
        if stage == "spg":
            return self.trunk(batch), aux
        if stage == "sml":
            return fuse_params(self.trunk(batch), self.item_generator(batch["seq_v"]), T), aux
        if stage == "scl":
            if self.codebook is None:
                raise ValueError("scl stage needs a codebook")
            gen = self.item_generator
            E, mask = gen.embed(batch["seq_v"])
            Eq, idx = quantize(E, self.codebook.D, mask, self.straight_through)
            aux["indices"] = idx
            aux["commitment"] = commitment_loss(E, self.codebook.D[idx.clamp(min=0)], mask)
            branch = gen.generate(gen.encode(Eq, mask))
            if self.semantic_generator is None:
                return branch, aux
            return fuse_params(self.trunk(batch), branch, T), aux
        raise ValueError(f"unknown stage {stage!r}")

    def forward(self, batch, stage: str, T: float = 0.01):
        theta_d, aux = self.dynamic_params(batch, stage, T)
        logits = self.backbone(batch["users"], batch["targets"], self._seq(batch), theta_d)
        return logits, aux


def stage_loss(model: SolidModel, batch, stage: str, cfg: TrainConfig):
    """(total, ce, commitment) for one batch; total == ce + lam * commitment."""
    logits, aux = model(batch, stage, cfg.T)
    ce = ce_loss(torch.sigmoid(logits), batch["labels"])
    if stage == "scl":
        mse = aux["commitment"]
        return ce + cfg.lam * mse, ce, mse
    return ce, ce, torch.zeros((), dtype=ce.dtype)


def to_batch(samples: Samples, idx=None, dtype=torch.float32) -> dict[str, torch.Tensor]:
    sl = slice(None) if idx is None else idx
    return {
        "users": torch.as_tensor(samples.users[sl]),
        "targets": torch.as_tensor(samples.targets[sl] + 1),
        "seq_v": torch.as_tensor(samples.seq_v[sl]),
        "seq_c": torch.as_tensor(samples.seq_c[sl]),
        "labels": torch.as_tensor(samples.labels[sl]).to(dtype),
    }


class TensorSamples:
    """Samples converted to tensors once, sliced per batch."""

    def __init__(self, samples: Samples, dtype=torch.float32):
        self.samples = samples
        self.full = to_batch(samples, dtype=dtype)

    def __len__(self):
        return len(self.samples)

    def batch(self, idx):
        return {k: v[idx] for k, v in self.full.items()}


@torch.no_grad()
def predict(model: SolidModel, samples, stage: str, T: float = 0.01, batch_size: int = 8192) -> np.ndarray:
    ts = samples if isinstance(samples, TensorSamples) else TensorSamples(samples)
    model.eval()
    out = []
    for start in range(0, len(ts), batch_size):
        logits, _ = model(ts.batch(slice(start, start + batch_size)), stage, T)
        out.append(torch.sigmoid(logits).double().numpy())
    model.train()
    return np.concatenate(out) if out else np.zeros(0)


@torch.no_grad()
def collect_codes(model: SolidModel, samples, batch_size: int = 8192) -> np.ndarray:
    ts = samples if isinstance(samples, TensorSamples) else TensorSamples(samples)
    out = []
    for start in range(0, len(ts), batch_size):
        b = ts.batch(slice(start, start + batch_size))
        E, mask = model.item_generator.embed(b["seq_v"])
        _, idx = quantize(E, model.codebook.D, mask)
        out.append(idx.numpy())
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


# -- stage loop ----------------------------------------------------------------------


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    valid_auc: float

    def line(self) -> str:
        return f"{self.stage}\t{self.epoch}\t{self.train_loss:.10f}\t{self.valid_auc:.10f}"


@dataclass
class StageState:
    stage: str
    model: SolidModel
    epoch_losses: list[float] = field(default_factory=list)
    valid_aucs: list[float] = field(default_factory=list)
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def codebook(self):
        return self.model.codebook

    @property
    def generators(self):
        return self.model.item_generator, self.model.semantic_generator


def negative_resampler(data: SplitDataset, cfg: TrainConfig, stage_seed: int):
    """Per-epoch redraw of the training negatives, same count per positive, seeded by (seed, stage, epoch)."""
    if not cfg.resample_negatives:
        return None
    pos = data.train.positives()
    k = len(data.train) // max(len(pos), 1) - 1

    def draw(epoch: int) -> Samples:
        return sample_negatives(pos, k, data.item_vocab_size, data.histories, seed=(cfg.seed * 100 + stage_seed) * 10_000 + epoch)

    return draw


def _improved(new: float, best: float, min_rel: float) -> bool:
    if not math.isfinite(best):
        return True
    return (new - best) / max(abs(best), 1e-12) >= min_rel


def fit_stage(
    model: SolidModel,
    stage: str,
    train: Samples,
    valid: Samples | None,
    cfg: TrainConfig,
    stage_seed: int = 0,
    log=None,
    resample=None,
) -> StageState:
    """Adam over every parameter the model holds, early-stopped on validation AUC.

    ``resample(epoch)``, if given, returns the training samples for epochs >= 1.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    dtype = next(model.parameters()).dtype
    tr = TensorSamples(train, dtype)
    va = TensorSamples(valid, dtype) if valid is not None and len(valid) else None
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + stage_seed)
    state = StageState(stage, model)
    best, best_state, bad = -math.inf, None, 0
    model.train()
    for epoch in range(cfg.epochs):
        if resample is not None and epoch > 0:
            tr = TensorSamples(resample(epoch), dtype)
        perm = torch.randperm(len(tr), generator=gen)
        total, n = 0.0, 0
        for start in range(0, len(tr), cfg.batch_size):
            b = tr.batch(perm[start:start + cfg.batch_size])
            loss, _, _ = stage_loss(model, b, stage, cfg)
            if not torch.isfinite(loss):
                raise DivergenceError(stage, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b["labels"])
            n += len(b["labels"])
        mean_loss = total / max(n, 1)
        v_auc = auc(predict(model, va, stage, cfg.T, cfg.eval_batch_size), va.samples.labels) if va else float("nan")
        rec = EpochRecord(stage, epoch, mean_loss, v_auc)
        state.epoch_losses.append(mean_loss)
        state.valid_aucs.append(v_auc)
        state.records.append(rec)
        logger.info(rec.line())
        if log is not None:
            log.append(rec.line())
        if va is None:
            continue
        if _improved(v_auc, best, cfg.min_rel_improvement):
            best, bad, state.best_epoch = v_auc, 0, epoch
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    if cfg.restore_best and best_state is not None:
        model.load_state_dict(best_state)
    return state


# -- variants and the full pipeline ---------------------------------------------------


@dataclass(frozen=True)
class Variant:
    """Ablation switches: semantic parameter generation, metacode learning, codebook learning."""

    spg: bool = True
    sml: bool = True
    scl: bool = True
    static: bool = False

    def __post_init__(self):
        if self.sml and not self.spg:
            raise ValueError("sml requires spg")
        if self.static and (self.spg or self.sml or self.scl):
            raise ValueError("the static SR model takes no module flags")

    @property
    def name(self) -> str:
        if self.static:
            return "sr"
        return f"spg{int(self.spg)}_sml{int(self.sml)}_scl{int(self.scl)}"

    @property
    def stages(self) -> tuple[str, ...]:
        if self.static:
            return ("sr",)
        first = "sml" if self.sml else ("spg" if self.spg else "dsr")
        return (first, "scl") if self.scl else (first,)

    @property
    def uses_semantics(self) -> bool:
        return self.spg

    @property
    def eval_stage(self) -> str:
        return self.stages[-1]


FULL = Variant(True, True, True)
ITEM_DSR = Variant(False, False, False)
MODULE_ROWS = (
    Variant(False, False, False),
    Variant(True, False, False),
    Variant(True, True, False),
    Variant(False, False, True),
    Variant(True, True, True),
)


@dataclass
class ModelDims:
    n_users: int
    n_items: int
    n_semantics: int


def build_model(variant: Variant, dims: ModelDims, backbone_cfg: BackboneConfig, gen_cfg: GeneratorConfig, seed: int, dtype=torch.float32) -> SolidModel:
    torch.manual_seed(seed)
    # without metacode or codebook learning the backbone reads the semantic sequence too
    source = "semantic" if variant.spg and not variant.sml and not variant.scl else "item"
    backbone = Recommender(backbone_cfg, dims.n_users, dims.n_items, dims.n_semantics, source, static_dynamic=variant.static)
    specs = backbone_cfg.dynamic_layer_specs
    sem_gen = ParamGenerator(gen_cfg, dims.n_semantics, specs, backbone_cfg.seq_len) if variant.spg else None
    needs_item = not variant.static and (not variant.spg or variant.sml or variant.scl)
    item_gen = ParamGenerator(gen_cfg, dims.n_items, specs, backbone_cfg.seq_len) if needs_item else None
    if item_gen is not None and sem_gen is not None:
        item_gen.zero_output_()  # a clipped branch must start inside the clip window to get gradients
    return SolidModel(backbone, item_gen, sem_gen).to(dtype)


def init_codebook(model: SolidModel, n_codes: int, seed: int = 0) -> SemanticCodebook:
    """Metacode from the semantic encoder when there is one; else k-means of the item table."""
    if model.semantic_generator is not None:
        metacode = extract_metacode(model.semantic_generator)
        return init_from_metacode(metacode, n_codes=n_codes)
    items = model.item_generator.embedding.weight.detach()[1:]
    _, centroids, _ = kmeans(items.double().numpy(), n_codes, seed=seed)
    return init_from_metacode(torch.as_tensor(centroids, dtype=items.dtype))


@dataclass
class RunResult:
    variant: Variant
    model: SolidModel
    states: list[StageState]
    log: list[str]
    report: EvalReport | None = None
    codebook_hist: np.ndarray | None = None
    dead_codes: list[int] | None = None

    @property
    def eval_stage(self) -> str:
        return self.variant.eval_stage


def run_variant(
    variant: Variant,
    data: SplitDataset,
    n_semantics: int,
    cfg: TrainConfig,
    backbone_cfg: BackboneConfig | None = None,
    gen_cfg: GeneratorConfig | None = None,
    ks=(10, 20),
    dtype=torch.float32,
    warm_start: RunResult | None = None,
) -> RunResult:
    """Train every stage of ``variant`` then evaluate on the test split.

    ``warm_start`` may carry an already-trained first stage of the same variant
    family (e.g. the ``sml`` run when ``variant`` is the full model); training
    is deterministic, so reusing it gives the same result as re-running it.
    """
    backbone_cfg = backbone_cfg or BackboneConfig(seq_len=data.train.seq_len)
    gen_cfg = gen_cfg or GeneratorConfig()
    dims = ModelDims(data.user_vocab_size, data.item_vocab_size, n_semantics)
    log: list[str] = []
    states: list[StageState] = []
    stages = variant.stages
    if warm_start is not None:
        if warm_start.variant.stages != stages[:1]:
            raise ValueError("warm start does not match the first stage")
        model = copy.deepcopy(warm_start.model)
        states.extend(warm_start.states)
        log.extend(warm_start.log)
        stages = stages[1:]
    else:
        model = build_model(variant, dims, backbone_cfg, gen_cfg, cfg.seed, dtype)
    for i, stage in enumerate(stages):
        try:
            if stage == "scl":
                model.codebook = init_codebook(model, n_semantics, cfg.seed).to(dtype)
            sid = STAGES.index(stage)
            states.append(fit_stage(model, stage, data.train, data.valid, cfg, sid, log, negative_resampler(data, cfg, sid)))
        except DivergenceError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
            raise StageError(stage, exc) from exc
    result = RunResult(variant, model, states, log)
    scores = predict(model, data.test, variant.eval_stage, cfg.T, cfg.eval_batch_size)
    result.report = evaluate(scores, data.test, ks)
    if model.codebook is not None:
        result.codebook_hist, result.dead_codes = codebook_usage(collect_codes(model, data.train), model.codebook.n_codes)
    return result


def run_pipeline(data: SplitDataset, n_semantics: int, cfg: TrainConfig, backbone_cfg=None, gen_cfg=None, ks=(10, 20)) -> RunResult:
    """Metacode stage to convergence, codebook init, codebook stage, test evaluation.

    ``data`` must already carry semantic sequences (see ``semantics.lift_array``).
    The returned model holds the semantic generator, item generator and codebook.
    """
    if not data.train.seq_c.any():
        raise ValueError("semantic sequences are empty; lift s_v to s_c first")
    return run_variant(FULL, data, n_semantics, cfg, backbone_cfg, gen_cfg, ks)


def infer_semantic_count(data: SplitDataset) -> int:
    """Largest semantic id present in any split (ids are 1-based)."""
    return int(max(s.seq_c.max(initial=0) for s in (data.train, data.valid, data.test)))


def _train_single(variant: Variant, data: SplitDataset, cfg: TrainConfig, backbone_cfg, gen_cfg, n_semantics, dtype) -> StageState:
    backbone_cfg = backbone_cfg or BackboneConfig(seq_len=data.train.seq_len)
    gen_cfg = gen_cfg or GeneratorConfig()
    if variant.spg and n_semantics is None:
        n_semantics = infer_semantic_count(data)
        if n_semantics == 0:
            raise ValueError("semantic sequences are empty; lift s_v to s_c first")
    dims = ModelDims(data.user_vocab_size, data.item_vocab_size, n_semantics or 0)
    model = build_model(variant, dims, backbone_cfg, gen_cfg, cfg.seed, dtype)
    stage = variant.stages[0]
    try:
        sid = STAGES.index(stage)
        return fit_stage(model, stage, data.train, data.valid, cfg, sid, resample=negative_resampler(data, cfg, sid))
    except DivergenceError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError(stage, exc) from exc


def train_sr(data: SplitDataset, cfg: TrainConfig, backbone_cfg=None, dtype=torch.float32) -> StageState:
    return _train_single(Variant(False, False, False, static=True), data, cfg, backbone_cfg, None, None, dtype)


def train_dsr(data: SplitDataset, cfg: TrainConfig, gen_cfg=None, backbone_cfg=None, dtype=torch.float32) -> StageState:
    return _train_single(ITEM_DSR, data, cfg, backbone_cfg, gen_cfg, None, dtype)


def train_semantic_to_param(data, cfg: TrainConfig, gen_cfg=None, backbone_cfg=None, n_semantics=None, dtype=torch.float32) -> StageState:
    return _train_single(Variant(True, False, False), data, cfg, backbone_cfg, gen_cfg, n_semantics, dtype)


def train_metacode(data, cfg: TrainConfig, gen_cfg=None, backbone_cfg=None, n_semantics=None, dtype=torch.float32) -> StageState:
    return _train_single(Variant(True, True, False), data, cfg, backbone_cfg, gen_cfg, n_semantics, dtype)


def train_codebook(state: StageState, data: SplitDataset, cfg: TrainConfig) -> StageState:
    """Second stage on a copy of a finished metacode stage; the codebook starts from its metacode."""
    if state.stage != "sml" or state.model.semantic_generator is None or state.model.item_generator is None:
        raise ValueError("train_codebook needs a completed sml stage")
    model = copy.deepcopy(state.model)
    n_codes = model.semantic_generator.embedding.num_embeddings - 1
    try:
        model.codebook = init_codebook(model, n_codes, cfg.seed)
        sid = STAGES.index("scl")
        return fit_stage(model, "scl", data.train, data.valid, cfg, sid, resample=negative_resampler(data, cfg, sid))
    except DivergenceError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError("scl", exc) from exc


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
