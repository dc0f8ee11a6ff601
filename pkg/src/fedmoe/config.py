"""Experiment configuration: flat dotted keys over typed sections.

Config files are plain ``key = value`` text (``#`` comments); the same
dotted keys work as CLI flag overrides.  ``ExperimentConfig.resolve`` layers
defaults <- preset <- file <- flags, coerces types from the section
dataclasses, and validates every cross-field constraint before any compute.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .adapter import GATING_MODES, ACTIVATIONS
from .backbone import AdapterConfig, BackboneConfig
from .data import PARTITION_SCHEMES, PartitionSpec
from .errors import ConfigurationError
from .losses import AuxLossConfig

ENV_OUTPUT_ROOT = "FEDMOE_RUNS"


@dataclass(frozen=True)
class BackboneSection:
    layers: int = 2
    dim: int = 32
    heads: int = 4
    seq_len: int = 8
    trainable_head: bool = False


@dataclass(frozen=True)
class AdapterSection:
    experts: int = 8
    rank: int = 2               # shared per-expert intermediate rank
    gating_mode: str = "topk_softmax"
    activation: str = "gelu"


@dataclass(frozen=True)
class SparsitySection:
    mode: str = "fixed"          # "fixed" | "capability"
    k: int = 2
    k_high: int = 4
    k_low: int = 1
    high_fraction: float = 0.5   # leading clients are the high-capability ones
    eval_k: int = 0              # 0 = max over client K_n


@dataclass(frozen=True)
class FederationSection:
    clients: int = 4
    rounds: int = 20
    epochs: int = 1
    batch_size: int = 128
    lr: float = 3e-4
    weight_decay: float = 0.01
    reset_optimizer: bool = False  # fresh Adam moments every round when true


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"    # "synthetic" | "csv"
    csv_path: str = ""
    n: int = 2000
    classes: int = 4
    input_dim: int = 16
    separation: float = 3.0
    partition: str = "one_label"
    alpha: float = 1.0
    test_fraction: float = 0.2


@dataclass(frozen=True)
class SeedsSection:
    run: int = 0
    data: int = 0
    frozen: int = 0


@dataclass(frozen=True)
class OutputSection:
    dir: str = ""                # empty: $FEDMOE_RUNS or ./runs


_SECTIONS = {
    "backbone": BackboneSection,
    "adapter": AdapterSection,
    "sparsity": SparsitySection,
    "federation": FederationSection,
    "aux": AuxLossConfig,
    "data": DataSection,
    "seeds": SeedsSection,
    "output": OutputSection,
}

# public dotted key -> (section, field); "aux.lambda" keeps the usual symbol
_FIELD_ALIASES = {"aux.lambda": ("aux", "lam")}

PRESETS = {
    # 4 text-like clients, 20 rounds, batch 128, Adam 3e-4 / wd 0.01
    "agnews-like": {},
    # 10 image-like clients, 10-way labels, otherwise identical
    "cifar-like": {"federation.clients": "10", "data.classes": "10",
                   "data.n": "5000"},
}


def _field_map() -> dict[str, tuple[str, str, type]]:
    """Every public dotted key -> (section attr, field name, type)."""
    table: dict[str, tuple[str, str, type]] = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            table[f"{section}.{f.name}"] = (section, f.name, f.type)
    for public, (section, name) in _FIELD_ALIASES.items():
        cls = _SECTIONS[section]
        ftype = next(f.type for f in fields(cls) if f.name == name)
        del table[f"{section}.{name}"]
        table[public] = (section, name, ftype)
    return table


_FIELDS = _field_map()
_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _coerce(key: str, raw: str, ftype) -> object:
    if isinstance(ftype, str):  # dataclass fields carry annotation strings
        ftype = _TYPES[ftype]
    text = raw.strip()
    try:
        if ftype is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"{key}: {exc}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; unknown keys fail with the key named."""
    out: dict[str, str] = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{path}:{lineno}: expected `key = value`")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = raw.strip()
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneSection
    adapter: AdapterSection
    sparsity: SparsitySection
    federation: FederationSection
    aux: AuxLossConfig
    data: DataSection
    seeds: SeedsSection
    output: OutputSection

    # -- construction -------------------------------------------------------

    @classmethod
    def default(cls) -> "ExperimentConfig":
        return cls(**{name: section() for name, section in _SECTIONS.items()})

    @classmethod
    def resolve(cls, *layers: dict[str, str]) -> "ExperimentConfig":
        """Defaults overlaid with each ``{dotted key: raw string}`` layer,
        later layers winning, then validated."""
        merged: dict[str, str] = {}
        for layer in layers:
            for key in layer:
                if key not in _FIELDS:
                    raise ConfigurationError(f"unknown config key {key!r}")
            merged.update(layer)
        per_section: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
        for key, raw in merged.items():
            section, name, ftype = _FIELDS[key]
            per_section[section][name] = _coerce(key, raw, ftype)
        cfg = cls(**{name: section_cls(**per_section[name])
                     for name, section_cls in _SECTIONS.items()})
        cfg.validate()
        return cfg

    def to_items(self) -> list[tuple[str, str]]:
        """Canonical (key, value) pairs covering every field, sorted."""
        items = []
        for key, (section, name, _ftype) in _FIELDS.items():
            items.append((key, _format(getattr(getattr(self, section), name))))
        return sorted(items)

    def canonical_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_items())

    def hash_id(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.canonical_text())

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        adp, spr, fed, dat = self.adapter, self.sparsity, self.federation, self.data
        if adp.experts < 1:
            raise ConfigurationError("adapter.experts must be >= 1")
        if adp.rank < 1:
            raise ConfigurationError("adapter.rank must be >= 1")
        if adp.gating_mode not in GATING_MODES:
            raise ConfigurationError(
                f"adapter.gating_mode must be one of {GATING_MODES}")
        if adp.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"adapter.activation must be one of {ACTIVATIONS}")

        if spr.mode not in ("fixed", "capability"):
            raise ConfigurationError("sparsity.mode must be fixed or capability")
        for key, value in (("sparsity.k", spr.k), ("sparsity.k_high", spr.k_high),
                           ("sparsity.k_low", spr.k_low)):
            if not 1 <= value <= adp.experts:
                raise ConfigurationError(
                    f"{key} = {value} outside [1, {adp.experts}]")
        if spr.eval_k != 0 and not 1 <= spr.eval_k <= adp.experts:
            raise ConfigurationError(
                f"sparsity.eval_k = {spr.eval_k} outside [1, {adp.experts}]")
        if not 0.0 <= spr.high_fraction <= 1.0:
            raise ConfigurationError("sparsity.high_fraction outside [0, 1]")

        if fed.clients < 1:
            raise ConfigurationError("federation.clients must be >= 1")
        if fed.rounds < 0:
            raise ConfigurationError("federation.rounds must be >= 0")
        if fed.epochs < 1:
            raise ConfigurationError("federation.epochs must be >= 1")
        if fed.batch_size < 1:
            raise ConfigurationError("federation.batch_size must be >= 1")
        if fed.lr < 0 or fed.weight_decay < 0:
            raise ConfigurationError("federation.lr and weight_decay must be >= 0")

        # the threshold can only ever release the gate if it exceeds 1/M
        if self.aux.lam > 0.0 and self.aux.theta_th <= 1.0 / adp.experts:
            raise ConfigurationError(
                f"aux.theta_th = {self.aux.theta_th} never deactivates with "
                f"{adp.experts} experts (needs > {1.0 / adp.experts:.4g})")

        if dat.source not in ("synthetic", "csv"):
            raise ConfigurationError("data.source must be synthetic or csv")
        if dat.source == "csv" and not dat.csv_path:
            raise ConfigurationError("data.csv_path required for csv source")
        if dat.source == "synthetic":
            if dat.classes < 2:
                raise ConfigurationError("data.classes must be >= 2")
            if dat.n < dat.classes:
                raise ConfigurationError("data.n must cover every class")
            if dat.separation <= 0:
                raise ConfigurationError("data.separation must be > 0")
            if dat.partition == "one_label" and fed.clients < dat.classes:
                raise ConfigurationError(
                    f"one_label partition needs federation.clients >= "
                    f"{dat.classes}")
        if not 0.0 < dat.test_fraction < 1.0:
            raise ConfigurationError("data.test_fraction outside (0, 1)")
        # delegate the remaining shape/scheme checks to the builders
        self.partition_spec()
        self.backbone_config(self.data.classes if dat.source == "synthetic"
                             else 2)
        self.adapter_config()

    # -- builders -------------------------------------------------------------

    def backbone_config(self, classes: int) -> BackboneConfig:
        b = self.backbone
        return BackboneConfig(layers=b.layers, dim=b.dim, heads=b.heads,
                              seq_len=b.seq_len, classes=classes,
                              input_dim=self.data.input_dim,
                              frozen_seed=self.seeds.frozen,
                              trainable_head=b.trainable_head)

    def adapter_config(self) -> AdapterConfig:
        a = self.adapter
        default_k = (self.sparsity.k if self.sparsity.mode == "fixed"
                     else self.sparsity.k_high)
        return AdapterConfig(ranks=(a.rank,) * a.experts, k=default_k,
                             gating_mode=a.gating_mode, activation=a.activation)

    def partition_spec(self) -> PartitionSpec:
        if self.data.partition not in PARTITION_SCHEMES:
            raise ConfigurationError(
                f"data.partition must be one of {PARTITION_SCHEMES}")
        return PartitionSpec(scheme=self.data.partition,
                             n_clients=self.federation.clients,
                             alpha=self.data.alpha, seed=self.seeds.data)

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        """A new config with raw-string overrides applied on this one."""
        base = dict(self.to_items())
        return ExperimentConfig.resolve(base, overrides)
