"""The primary recommendation model: embeddings, sequence encoder, static MLP and dynamic layers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

ENCODER_KINDS = ("target_attention", "recurrent", "self_attention")


@dataclass(frozen=True)
class DynamicLayerSpec:
    n_in: int
    n_out: int

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError(f"dynamic layer dims must be positive, got {self.n_in}x{self.n_out}")

    @property
    def size(self) -> int:
        return self.n_in * self.n_out


def as_specs(specs) -> tuple[DynamicLayerSpec, ...]:
    return tuple(s if isinstance(s, DynamicLayerSpec) else DynamicLayerSpec(*s) for s in specs)


@dataclass
class BackboneConfig:
    encoder_kind: str = "self_attention"
    embed_dim: int = 32
    mlp_layers: int = 2
    mlp_hidden: int = 64
    dynamic_layer_specs: tuple = ((32, 16),)
    seq_len: int = 10

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.embed_dim < 1 or self.mlp_layers < 1 or self.mlp_hidden < 1:
            raise ValueError("embed_dim, mlp_layers and mlp_hidden must be positive")
        self.dynamic_layer_specs = as_specs(self.dynamic_layer_specs)
        if not self.dynamic_layer_specs:
            raise ValueError("at least one dynamic layer is required")
        for a, b in zip(self.dynamic_layer_specs, self.dynamic_layer_specs[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"dynamic layers do not chain: {a} -> {b}")


def embed_sequence(seq: torch.Tensor, table: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Row lookup plus a non-pad mask. ``table`` is the raw weight matrix."""
    if seq.numel() and (int(seq.min()) < 0 or int(seq.max()) >= table.shape[0]):
        raise IndexError(f"sequence id out of range for a table with {table.shape[0]} rows")
    return F.embedding(seq, table), seq != 0


class SequenceEncoder(nn.Module):
    """Pools a (B, L, d) representation set into a (B, d) sequence feature.

    Pad positions get zero attention weight (attention kinds) or are skipped
    (recurrent). All-pad rows produce a zero vector and ``valid == False``.
    """

    def __init__(self, kind: str, dim: int, max_len: int, attn_hidden: int | None = None):
        super().__init__()
        if kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {kind!r}")
        self.kind = kind
        self.dim = dim
        if kind == "target_attention":
            h = attn_hidden or dim
            self.score = nn.Sequential(nn.Linear(3 * dim, h), nn.ReLU(), nn.Linear(h, 1))
        elif kind == "recurrent":
            self.cell = nn.GRUCell(dim, dim)
        else:
            self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
            self.q = nn.Linear(dim, dim, bias=False)
            self.k = nn.Linear(dim, dim, bias=False)
            self.v = nn.Linear(dim, dim, bias=False)
            self.out = nn.Linear(dim, dim)
            self.norm = nn.LayerNorm(dim)

    @staticmethod
    def _masked_softmax(logits, mask):
        any_valid = mask.any(-1, keepdim=True)
        logits = torch.where(mask, logits, torch.full_like(logits, -math.inf))
        logits = torch.where(any_valid, logits, torch.zeros_like(logits))
        return torch.softmax(logits, -1) * mask

    def forward(self, E, mask, target=None):
        valid = mask.any(-1)
        if self.kind == "target_attention":
            if target is None:
                raise ValueError("target_attention needs a target representation")
            t = target.unsqueeze(1).expand_as(E)
            logits = self.score(torch.cat([E, t, E * t], -1)).squeeze(-1)
            w = self._masked_softmax(logits, mask)
            feat = (w.unsqueeze(-1) * E).sum(1)
        elif self.kind == "recurrent":
            h = E.new_zeros(E.shape[0], self.dim)
            for step in range(E.shape[1]):
                h_new = self.cell(E[:, step], h)
                h = torch.where(mask[:, step, None], h_new, h)
            feat = h
        else:
            L = E.shape[1]
            x = E + self.pos[-L:]
            last = x[:, -1]
            logits = (self.q(last).unsqueeze(1) * self.k(x)).sum(-1) / math.sqrt(self.dim)
            w = self._masked_softmax(logits, mask)
            ctx = (w.unsqueeze(-1) * self.v(x)).sum(1)
            feat = self.norm(last + self.out(ctx))
        return feat * valid.unsqueeze(-1).to(feat.dtype), valid


class Recommender(nn.Module):
    """CTR model: concat(user, target, sequence feature) -> static MLP -> dynamic layers -> sigmoid head.

    ``sequence_source="semantic"`` feeds the semantic sequence to the sequence
    encoder instead of the item sequence. Targets and sequences are table
    indices (dense item id + 1; 0 is padding). With ``static_dynamic=True`` the
    dynamic layers are ordinary learned matrices (the plain SR model).
    """

    def __init__(
        self,
        config: BackboneConfig,
        n_users: int,
        n_items: int,
        n_semantics: int | None = None,
        sequence_source: str = "item",
        static_dynamic: bool = False,
    ):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.sequence_source = sequence_source
        self.user_emb = nn.Embedding(n_users, d)
        self.item_emb = nn.Embedding(n_items + 1, d)
        if sequence_source == "semantic":
            if not n_semantics:
                raise ValueError("semantic sequence source needs n_semantics")
            self.sem_emb = nn.Embedding(n_semantics + 1, d)
        elif sequence_source != "item":
            raise ValueError(f"unknown sequence_source {sequence_source!r}")
        for emb in self.embeddings():
            nn.init.normal_(emb.weight, std=0.1)
        self.encoder = SequenceEncoder(config.encoder_kind, d, config.seq_len)
        specs = config.dynamic_layer_specs
        dims = [3 * d] + [config.mlp_hidden] * (config.mlp_layers - 1) + [specs[0].n_in]
        self.mlp = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))
        self.static_dynamic = static_dynamic
        if static_dynamic:
            self.static_k = nn.ParameterList(
                nn.Parameter(torch.randn(s.n_in, s.n_out) / math.sqrt(s.n_in)) for s in specs
            )
        self.head = nn.Linear(specs[-1].n_out, 1)

    def embeddings(self):
        yield self.user_emb
        yield self.item_emb
        if self.sequence_source == "semantic":
            yield self.sem_emb

    @property
    def specs(self) -> tuple[DynamicLayerSpec, ...]:
        return self.config.dynamic_layer_specs

    def features(self, users, targets, seq):
        """Static part: returns the input of the first dynamic layer."""
        table = self.sem_emb.weight if self.sequence_source == "semantic" else self.item_emb.weight
        E, mask = embed_sequence(seq, table)
        t = self.item_emb(targets)
        e, _ = self.encoder(E, mask, t)
        x = torch.cat([self.user_emb(users), t, e], -1)
        for layer in self.mlp:
            x = torch.relu(layer(x))
        return x

    def apply_dynamic(self, x, theta_d):
        n = len(theta_d)
        if n != len(self.specs):
            raise ValueError(f"expected {len(self.specs)} dynamic matrices, got {n}")
        for i, (K, spec) in enumerate(zip(theta_d, self.specs)):
            if K.dim() == 2:
                K = K.unsqueeze(0).expand(x.shape[0], -1, -1)
            if K.shape[1:] != (spec.n_in, spec.n_out) or x.shape[-1] != spec.n_in:
                raise ValueError(
                    f"dynamic layer {i}: feature width {x.shape[-1]} vs K {tuple(K.shape[1:])}, "
                    f"expected ({spec.n_in}, {spec.n_out})"
                )
            x = (x.unsqueeze(-1) * K).sum(1)
            if i < n - 1:
                x = torch.relu(x)
        return x

    def forward(self, users, targets, seq, theta_d=None):
        """Logits (B,). ``theta_d`` is a list of per-sample (B, N_in, N_out) matrices."""
        if theta_d is None:
            if not self.static_dynamic:
                raise ValueError("dynamic model called without theta_d")
            theta_d = list(self.static_k)
        x = self.apply_dynamic(self.features(users, targets, seq), theta_d)
        return self.head(x).squeeze(-1)


@dataclass
class ParameterBundle:
    """Static tensors (by name) plus the dynamic-layer matrices."""

    theta_s: dict[str, torch.Tensor]
    theta_d: list[torch.Tensor] = field(default_factory=list)

    def validate(self, specs) -> None:
        specs = as_specs(specs)
        if len(self.theta_d) != len(specs):
            raise ValueError(f"{len(self.theta_d)} dynamic tensors for {len(specs)} specs")
        for i, (K, s) in enumerate(zip(self.theta_d, specs)):
            if tuple(K.shape[-2:]) != (s.n_in, s.n_out):
                raise ValueError(f"dynamic layer {i}: shape {tuple(K.shape)} != {(s.n_in, s.n_out)}")
        for name, t in list(self.theta_s.items()) + [(f"theta_d[{i}]", K) for i, K in enumerate(self.theta_d)]:
            if not torch.isfinite(t).all():
                raise ValueError(f"{name} has non-finite entries")


def bundle_of(model: Recommender, theta_d=None) -> ParameterBundle:
    return ParameterBundle(dict(model.named_parameters()), list(theta_d or []))


def forward(users, targets, seq, bundle: ParameterBundle, model: Recommender) -> torch.Tensor:
    """Click probability as a pure function of inputs and ``bundle``."""
    if bundle.theta_d or not model.static_dynamic:
        bundle.validate(model.specs)
    theta_d = bundle.theta_d or None
    logits = functional_call(model, bundle.theta_s, (users, targets, seq), {"theta_d": theta_d})
    return torch.sigmoid(logits)
