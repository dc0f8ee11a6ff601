"""Synchronous federated training over adapter parameters.

Every round: broadcast the global adapter parameters, train each client
locally on its own shard, average the uploads weighted by shard size, then
evaluate the new global model on the held-out test set.  Only adapter
parameters (and the head, when trainable) move over the wire; the frozen
backbone is reproduced locally from the shared seed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from . import __version__
from .backbone import Backbone, build_backbone
from .config import ExperimentConfig
from .data import LabeledDataset, load_csv, partition, synth_dataset, train_test_split
from .errors import AggregationError, ConfigurationError, InputError, UsageError
from .losses import aux_loss_layer, total_loss
from .metrics import (LoadMatrix, UtilizationReport, evaluate_accuracy,
                      export_heatmap_csv, export_mean_probs_csv,
                      utilization_kl)
from .tensor import Adam

METRICS_COLUMNS = ("round", "client_id", "task_loss", "aux_loss",
                   "accuracy", "mean_util_kl")

CHECKPOINT_MAGIC = "fedmoe-checkpoint 1"


# ---------------------------------------------------------------------------
# state


@dataclass
class ClientState:
    """One participant: private shard, sparsity budget, local model + Adam."""

    client_id: int
    shard: LabeledDataset
    backbone: Backbone
    k_n: int
    capability: str = "high"
    optimizer: Adam | None = None

    def adapter_params(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.backbone.trainable_parameters()]


@dataclass
class ServerState:
    global_params: list[np.ndarray]
    round_index: int = 0
    history: list["RoundReport"] = field(default_factory=list)


@dataclass
class ClientRoundMetrics:
    client_id: int
    task_loss: float   # mean over the round's optimization steps
    aux_loss: float    # mean reduced aux value (before the lambda weight)
    steps: int


@dataclass
class RoundReport:
    round_index: int
    clients: list[ClientRoundMetrics]
    task_loss: float   # shard-size-weighted mean of client task losses
    aux_loss: float
    accuracy: float
    eval_k: int
    utilization: UtilizationReport
    load: LoadMatrix


@dataclass(frozen=True)
class SparsityPolicy:
    mode: str = "fixed"      # "fixed" | "capability"
    k: int = 2
    k_high: int = 4
    k_low: int = 1


# ---------------------------------------------------------------------------
# round primitives


def broadcast(server: ServerState, clients: list[ClientState]) -> None:
    """Copy the global parameters into every client model (values, not refs)."""
    for client in clients:
        client.backbone.load_trainable([v.copy() for v in server.global_params])


def local_train(client: ClientState, cfg: ExperimentConfig,
                round_index: int) -> tuple[list[np.ndarray], ClientRoundMetrics]:
    """One client's local pass; returns updated params and loss averages.

    The shuffle stream is seeded by (run seed, round, client id) so a replay
    of the same experiment revisits identical batches.
    """
    if len(client.shard) == 0:
        raise ConfigurationError(
            f"client {client.client_id}: empty shard cannot train")
    fed, aux_cfg = cfg.federation, cfg.aux
    backbone = client.backbone
    for adapter in backbone.adapters:
        adapter.k = client.k_n

    if client.optimizer is None or fed.reset_optimizer:
        client.optimizer = Adam(backbone.trainable_parameters(), lr=fed.lr,
                                weight_decay=fed.weight_decay)
    opt = client.optimizer

    rng = np.random.default_rng((cfg.seeds.run, round_index, client.client_id))
    n = len(client.shard)
    task_sum = aux_sum = 0.0
    steps = 0
    for _ in range(fed.epochs):
        order = rng.permutation(n)
        for start in range(0, n, fed.batch_size):
            idx = order[start:start + fed.batch_size]
            labels = client.shard.labels[idx]
            opt.zero_grad()
            with tz.Tape() as tape:
                logits, _ = backbone.forward(client.shard.features[idx])
                task = tz.cross_entropy(logits, labels)
                if aux_cfg.lam > 0.0:
                    terms = [aux_loss_layer(p, aux_cfg)
                             for p in backbone.last_layer_probs]
                else:
                    terms = []
                loss = total_loss(task, terms, aux_cfg)
                tape.backward(loss)
            opt.step()
            task_sum += task.item()
            if terms:
                vals = [t.item() for t in terms]
                reduced = (sum(vals) / len(vals)
                           if aux_cfg.layer_reduction == "mean" else sum(vals))
                aux_sum += reduced
            steps += 1
    metrics = ClientRoundMetrics(client.client_id, task_sum / steps,
                                 aux_sum / steps, steps)
    return client.adapter_params(), metrics


def aggregate(uploads: list[tuple[list[np.ndarray], int]]) -> list[np.ndarray]:
    """Shard-size-weighted average of parameter uploads.

    Anchored on the first upload (out = v0 + sum_n w_n (v_n - v0)) so a
    consensus round reproduces the upload bit for bit.
    """
    if not uploads:
        raise UsageError("aggregate requires at least one upload")
    ref, _ = uploads[0]
    total = 0
    for n, (params, size) in enumerate(uploads):
        if size <= 0:
            raise AggregationError(
                f"client {n}: shard size {size} is not positive")
        if len(params) != len(ref):
            raise AggregationError(
                f"client {n}: uploaded {len(params)} tensors, expected "
                f"{len(ref)}")
        for j, (p, r) in enumerate(zip(params, ref)):
            if p.shape != r.shape:
                raise AggregationError(
                    f"client {n}: parameter {j} shape {p.shape} does not "
                    f"match {r.shape}")
        total += size
    weights = [size / total for (_, size) in uploads]
    drift = abs(sum(weights) - 1.0)
    if drift > 1e-12:
        raise AggregationError(f"aggregation weights sum off by {drift:.3g}")
    out = [np.array(r, dtype=np.float64, copy=True) for r in ref]
    for w, (params, _) in zip(weights[1:], uploads[1:]):
        for j, p in enumerate(params):
            out[j] += w * (p - ref[j])
    return out


def assign_sparsity(clients: list[ClientState], policy: SparsityPolicy,
                    n_experts: int) -> None:
    """Set each client's active-expert budget K_n from the policy."""
    if policy.mode not in ("fixed", "capability"):
        raise ConfigurationError(f"unknown sparsity mode {policy.mode!r}")
    for name, k in (("k", policy.k), ("k_high", policy.k_high),
                    ("k_low", policy.k_low)):
        if not 1 <= k <= n_experts:
            raise ConfigurationError(
                f"sparsity {name} = {k} outside [1, {n_experts}]")
    for client in clients:
        if policy.mode == "fixed":
            client.k_n = policy.k
        else:
            client.k_n = (policy.k_high if client.capability == "high"
                          else policy.k_low)


def resolve_eval_k(cfg: ExperimentConfig, clients: list[ClientState]) -> int:
    """Evaluation budget: configured value, else the widest client budget."""
    if cfg.sparsity.eval_k:
        return cfg.sparsity.eval_k
    return max(c.k_n for c in clients)


def run_round(server: ServerState, clients: list[ClientState],
              eval_backbone: Backbone, test: LabeledDataset,
              cfg: ExperimentConfig) -> RoundReport:
    """broadcast -> local training on every client -> aggregate -> evaluate."""
    round_index = server.round_index
    broadcast(server, clients)
    uploads = []
    fragments = []
    for client in clients:
        params, frag = local_train(client, cfg, round_index)
        uploads.append((params, len(client.shard)))
        fragments.append(frag)
    server.global_params = aggregate(uploads)
    server.round_index = round_index + 1

    sizes = np.array([len(c.shard) for c in clients], dtype=np.float64)
    weights = sizes / sizes.sum()
    task = float(np.dot(weights, [f.task_loss for f in fragments]))
    aux = float(np.dot(weights, [f.aux_loss for f in fragments]))

    eval_k = resolve_eval_k(cfg, clients)
    for adapter in eval_backbone.adapters:
        adapter.k = eval_k
    accuracy = evaluate_accuracy(eval_backbone, server.global_params, test)
    load = LoadMatrix.from_stats([a.stats for a in eval_backbone.adapters])
    util = utilization_kl(load)

    report = RoundReport(round_index=round_index, clients=fragments,
                         task_loss=task, aux_loss=aux, accuracy=accuracy,
                         eval_k=eval_k, utilization=util, load=load)
    server.history.append(report)
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(names: list[str], arrays: list[np.ndarray], path) -> None:
    """Text header (name, shape, offset, bytes) + little-endian float64 blob."""
    if len(names) != len(arrays):
        raise UsageError("save_checkpoint: names and arrays disagree")
    header = io.StringIO()
    header.write(f"{CHECKPOINT_MAGIC}\n")
    header.write(f"tensors {len(names)}\n")
    payload = bytearray()
    for name, arr in zip(names, arrays):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = ",".join(str(s) for s in arr.shape)
        header.write(f"{name} {shape} {len(payload)} {len(data)}\n")
        payload.extend(data)
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        fh.write(bytes(payload))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint back into an ordered name -> float64 array map."""
    with open(path, "rb") as fh:
        blob = fh.read()
    stream = io.BytesIO(blob)

    def line() -> str:
        raw = stream.readline()
        if not raw:
            raise InputError(f"{path}: truncated checkpoint header")
        return raw.decode("ascii").rstrip("\n")

    if line() != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    tag, _, count_text = line().partition(" ")
    if tag != "tensors" or not count_text.isdigit():
        raise InputError(f"{path}: malformed tensor count")
    entries = []
    for _ in range(int(count_text)):
        parts = line().split(" ")
        if len(parts) != 4:
            raise InputError(f"{path}: malformed tensor record {parts!r}")
        name, shape_text, offset_text, nbytes_text = parts
        shape = tuple(int(s) for s in shape_text.split(","))
        entries.append((name, shape, int(offset_text), int(nbytes_text)))
    if line() != "end":
        raise InputError(f"{path}: missing header terminator")
    base = stream.tell()
    out: dict[str, np.ndarray] = {}
    for name, shape, offset, nbytes in entries:
        raw = blob[base + offset:base + offset + nbytes]
        if len(raw) != nbytes:
            raise InputError(f"{path}: payload truncated for {name}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return out


# ---------------------------------------------------------------------------
# metrics file


def _cell(value: float) -> str:
    return f"{value:.12g}"


def write_metrics_csv(reports: list[RoundReport], path) -> None:
    """Per-round rows: one per client plus a ``global`` summary row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for report in reports:
            for frag in report.clients:
                writer.writerow([report.round_index, frag.client_id,
                                 _cell(frag.task_loss), _cell(frag.aux_loss),
                                 "", ""])
            writer.writerow([report.round_index, "global",
                             _cell(report.task_loss), _cell(report.aux_loss),
                             _cell(report.accuracy),
                             _cell(report.utilization.mean_kl)])


# ---------------------------------------------------------------------------
# whole experiments


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    server: ServerState
    clients: list[ClientState]
    eval_backbone: Backbone
    test: LabeledDataset
    parameter_names: list[str]
    run_dir: Path | None


def _load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.data
    if d.source == "csv":
        return load_csv(d.csv_path, cfg.backbone.seq_len, d.input_dim)
    return synth_dataset(d.n, d.classes, cfg.backbone.seq_len, d.input_dim,
                         d.separation, cfg.seeds.data)


def build_clients(cfg: ExperimentConfig, train: LabeledDataset
                  ) -> list[ClientState]:
    """Partition the training set and stand up one local model per client."""
    shards = partition(train, cfg.partition_spec())
    backbone_cfg = cfg.backbone_config(train.class_count)
    adapter_cfg = cfg.adapter_config()
    n_high = round(cfg.sparsity.high_fraction * len(shards))
    clients = []
    for i, indices in enumerate(shards):
        capability = "high" if i < n_high else "low"
        clients.append(ClientState(
            client_id=i, shard=train.subset(indices),
            backbone=build_backbone(backbone_cfg, adapter_cfg),
            k_n=cfg.sparsity.k, capability=capability))
    policy = SparsityPolicy(mode=cfg.sparsity.mode, k=cfg.sparsity.k,
                            k_high=cfg.sparsity.k_high, k_low=cfg.sparsity.k_low)
    assign_sparsity(clients, policy, cfg.adapter.experts)
    return clients


def run_experiment(cfg: ExperimentConfig,
                   run_dir: Path | str | None = None) -> ExperimentResult:
    """Run the full round schedule; write run artifacts when a dir is given.

    Artifacts: ``config.txt`` (canonical, replayable), ``metrics.csv``,
    ``checkpoint.bin`` (final global parameters), ``metadata.txt``, and the
    final round's ``heatmap.csv`` / ``mean_probs.csv``.
    """
    dataset = _load_dataset(cfg)
    train, test = train_test_split(dataset, cfg.data.test_fraction,
                                   cfg.seeds.data)
    clients = build_clients(cfg, train)
    eval_backbone = build_backbone(cfg.backbone_config(train.class_count),
                                   cfg.adapter_config())
    server = ServerState(
        global_params=[p.values.copy()
                       for p in eval_backbone.trainable_parameters()])

    reports = []
    for _ in range(cfg.federation.rounds):
        reports.append(run_round(server, clients, eval_backbone, test, cfg))

    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out / "config.txt")
        write_metrics_csv(reports, out / "metrics.csv")
        names = eval_backbone.parameter_names()
        save_checkpoint(names, server.global_params, out / "checkpoint.bin")
        if reports:
            export_heatmap_csv(reports[-1].load, out / "heatmap.csv")
            export_mean_probs_csv(reports[-1].load, out / "mean_probs.csv")
        _write_metadata(cfg, clients, eval_backbone, train, test,
                        out / "metadata.txt")
    return ExperimentResult(reports=reports, server=server, clients=clients,
                            eval_backbone=eval_backbone, test=test,
                            parameter_names=eval_backbone.parameter_names(),
                            run_dir=out)


def _write_metadata(cfg: ExperimentConfig, clients: list[ClientState],
                    eval_backbone: Backbone, train: LabeledDataset,
                    test: LabeledDataset, path) -> None:
    lines = [
        f"version = {__version__}",
        f"config_hash = {cfg.hash_id()}",
        f"eval_k = {resolve_eval_k(cfg, clients)}",
        "weight_decay_mode = decoupled",
        f"frozen_checksum = {eval_backbone.frozen_checksum()}",
        f"classes = {train.class_count}",
        f"train_examples = {len(train)}",
        f"test_examples = {len(test)}",
        f"shard_sizes = {','.join(str(len(c.shard)) for c in clients)}",
        f"client_k = {','.join(str(c.k_n) for c in clients)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")
