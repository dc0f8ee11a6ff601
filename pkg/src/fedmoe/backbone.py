"""Small frozen transformer encoder hosting one MoE adapter per block.

All attention/FFN/layer-norm weights (and the input projection, positional
table, and classification head) are drawn once from ``frozen_seed`` and never
trained; every client in a federation shares them bit-for-bit.  The only
trainable parameters are the per-block adapters — plus the head when
``trainable_head`` is set.

Each block is post-norm; the adapter runs parallel to the FFN and augments
its output before the residual add:

    h   = LN1(h + Attention(h))
    out = LN2(h + FFN(h) + sum_m w_m(h) * E_m(h))
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .adapter import MoEAdapter, RoutingStats
from .errors import AggregationError, ConfigurationError, DimensionError
from .tensor import Tensor, parameter


@dataclass(frozen=True)
class AdapterConfig:
    """How to build the adapter injected at every block."""

    ranks: tuple[int, ...]
    k: int
    gating_mode: str = "topk_softmax"
    activation: str = "gelu"

    def build(self, dim: int, rng: np.random.Generator) -> MoEAdapter:
        return MoEAdapter(dim=dim, ranks=list(self.ranks), k=self.k,
                          gating_mode=self.gating_mode,
                          activation=self.activation, rng=rng)


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 2
    dim: int = 32
    heads: int = 4
    seq_len: int = 8
    classes: int = 4
    input_dim: int = 16
    frozen_seed: int = 0
    trainable_head: bool = False

    def __post_init__(self):
        for name in ("layers", "dim", "heads", "seq_len", "classes", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.dim % self.heads != 0:
            raise ConfigurationError(
                f"width {self.dim} not divisible by {self.heads} heads")


class TransformerBlock:
    """Post-norm encoder block with an adapter parallel to its FFN."""

    def __init__(self, dim: int, heads: int, adapter: MoEAdapter,
                 rng: np.random.Generator):
        scale = dim ** -0.5
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Tensor(rng.normal(0.0, scale, size=(dim, dim)))
        self.wk = Tensor(rng.normal(0.0, scale, size=(dim, dim)))
        self.wv = Tensor(rng.normal(0.0, scale, size=(dim, dim)))
        self.wo = Tensor(rng.normal(0.0, scale, size=(dim, dim)))
        self.w1 = Tensor(rng.normal(0.0, scale, size=(dim, 2 * dim)))
        self.w2 = Tensor(rng.normal(0.0, (2 * dim) ** -0.5, size=(2 * dim, dim)))
        self.ln1_gain = Tensor(np.ones(dim))
        self.ln1_bias = Tensor(np.zeros(dim))
        self.ln2_gain = Tensor(np.ones(dim))
        self.ln2_bias = Tensor(np.zeros(dim))
        self.adapter = adapter

    def frozen_tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.w1, self.w2,
                self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias]

    def _attention(self, h: Tensor) -> Tensor:
        b, s, d = h.shape
        nh, hd = self.heads, self.head_dim
        q = (h @ self.wq).reshape(b, s, nh, hd).transpose((0, 2, 1, 3))
        k = (h @ self.wk).reshape(b, s, nh, hd).transpose((0, 2, 1, 3))
        v = (h @ self.wv).reshape(b, s, nh, hd).transpose((0, 2, 1, 3))
        scores = (q @ k.transpose((0, 1, 3, 2))) * (hd ** -0.5)
        ctx = tz.softmax(scores) @ v
        ctx = ctx.transpose((0, 2, 1, 3)).reshape(b, s, d)
        return ctx @ self.wo

    def forward(self, h: Tensor) -> Tensor:
        b, s, d = h.shape
        h = tz.layer_norm(h + self._attention(h), self.ln1_gain, self.ln1_bias)
        ffn = tz.gelu(h @ self.w1) @ self.w2
        aug = self.adapter.forward(ffn.reshape(b * s, d), h.reshape(b * s, d))
        return tz.layer_norm(h + aug.reshape(b, s, d),
                             self.ln2_gain, self.ln2_bias)


class Backbone:
    """Frozen encoder stack + classification head over mean-pooled states."""

    def __init__(self, cfg: BackboneConfig, adapter_cfg: AdapterConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.frozen_seed)
        self.w_in = Tensor(rng.normal(0.0, cfg.input_dim ** -0.5,
                                      size=(cfg.input_dim, cfg.dim)))
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(cfg.seq_len, cfg.dim)))
        self.blocks = [
            TransformerBlock(cfg.dim, cfg.heads,
                             adapter_cfg.build(cfg.dim, rng), rng)
            for _ in range(cfg.layers)
        ]
        head = rng.normal(0.0, cfg.dim ** -0.5, size=(cfg.dim, cfg.classes))
        self.head = parameter(head) if cfg.trainable_head else Tensor(head)
        # Token-mean routing distributions of the latest forward, per layer.
        self.last_layer_probs: list[Tensor] = []

    @property
    def adapters(self) -> list[MoEAdapter]:
        return [b.adapter for b in self.blocks]

    def forward(self, batch, collect_stats: bool = False
                ) -> tuple[Tensor, list[RoutingStats]]:
        """Logits [batch, C] plus each layer's routing stats."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        cfg = self.cfg
        if x.ndim != 3 or x.shape[1] != cfg.seq_len or x.shape[2] != cfg.input_dim:
            raise DimensionError(
                f"batch shape {x.shape}, expected (*, {cfg.seq_len}, "
                f"{cfg.input_dim})")
        for adapter in self.adapters:
            adapter.collect_stats = collect_stats
        h = x @ self.w_in + self.pos
        for block in self.blocks:
            h = block.forward(h)
        logits = h.mean(axis=1) @ self.head
        self.last_layer_probs = [b.adapter.last_mean_probs for b in self.blocks]
        return logits, [b.adapter.stats for b in self.blocks]

    # -- parameter accounting -----------------------------------------------

    def trainable_parameters(self) -> list[Tensor]:
        """Adapters in layer order (head last when trainable)."""
        params: list[Tensor] = []
        for block in self.blocks:
            params.extend(block.adapter.parameters())
        if self.cfg.trainable_head:
            params.append(self.head)
        return params

    def parameter_names(self) -> list[str]:
        names: list[str] = []
        for i, block in enumerate(self.blocks):
            names.extend(f"layer{i}.{n}" for n in block.adapter.parameter_names())
        if self.cfg.trainable_head:
            names.append("head")
        return names

    def load_trainable(self, values: list[np.ndarray]) -> None:
        """Copy a flat list (same order as trainable_parameters) into place."""
        per_adapter = len(self.blocks[0].adapter.parameters())
        expected = per_adapter * len(self.blocks) + int(self.cfg.trainable_head)
        if len(values) != expected:
            raise AggregationError(
                f"expected {expected} tensors, got {len(values)}")
        for i, block in enumerate(self.blocks):
            block.adapter.load_parameters(values[i * per_adapter:
                                                 (i + 1) * per_adapter])
        if self.cfg.trainable_head:
            v = np.asarray(values[-1], dtype=np.float64)
            if v.shape != self.head.values.shape:
                raise AggregationError(
                    f"head: shape {v.shape} does not match {self.head.shape}")
            self.head.values[...] = v

    def frozen_tensors(self) -> list[Tensor]:
        out = [self.w_in, self.pos]
        for block in self.blocks:
            out.extend(block.frozen_tensors())
        if not self.cfg.trainable_head:
            out.append(self.head)
        return out

    def frozen_checksum(self) -> str:
        """SHA-256 over every frozen tensor; stable across a whole experiment."""
        digest = hashlib.sha256()
        for t in self.frozen_tensors():
            digest.update(np.ascontiguousarray(t.values).tobytes())
        return digest.hexdigest()

    def reset_stats(self) -> None:
        for adapter in self.adapters:
            adapter.stats.reset()


def build_backbone(cfg: BackboneConfig, adapter_cfg: AdapterConfig) -> Backbone:
    """Construct the frozen stack; same config -> bit-identical weights."""
    return Backbone(cfg, adapter_cfg)
