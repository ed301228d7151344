"""Run a configured experiment end to end and persist its artifacts."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .config import ExperimentConfig
from .data import (
    ClientDataset,
    LabeledDataset,
    Partition,
    count_matrix,
    load_idx_mnist,
    partition_dirichlet,
    partition_pathological,
    synth_gaussian_mixture,
    write_partition_csv,
)
from .errors import CwFedError, PartitionError
from .federation import (
    ROUND_DRIVERS,
    AlgorithmKind,
    RoundReport,
    ServerState,
    aggregate_class_wise_global,
    client_omega,
    init_cw_server,
    init_local_only,
    init_single_server,
    run_finetune,
)
from .metrics import (
    RunSummary,
    best_mean_accuracy,
    fmt,
    gradient_norm_ratio_diagnostic,
    norm_heatmap,
    pattern_correlation_or_none,
    write_batch_trace,
    write_heatmap,
    write_lambda_sweep,
    write_per_client_trace,
)
from .nn import Batch, ModelParams, accuracy, loss_and_grad

log = logging.getLogger(__name__)


@dataclass
class Simulation:
    """Everything a run produced, kept in memory."""

    cfg: ExperimentConfig
    clients: Partition
    server: ServerState
    reports: list[RoundReport]
    local_models: list[ModelParams]
    global_models: list[ModelParams]
    finetuned: Optional[list[ModelParams]] = None

    @property
    def counts(self) -> np.ndarray:
        return count_matrix(self.clients)

    @property
    def final_mean_omega(self) -> float:
        return self.reports[-1].mean_omega

    def communication(self) -> list[dict[str, int]]:
        return [
            {"round": r.round, "uploaded_params": r.uploaded_params, "downloaded_params": r.downloaded_params}
            for r in self.reports
        ]


def build_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return synth_gaussian_mixture(ds.classes, ds.dim, ds.per_class, ds.separation, seeding.rng_for(cfg.seed, seeding.DATA))
    base = Path(cfg.base_dir)
    try:
        return load_idx_mnist(base / ds.images, base / ds.labels, ds.limit)
    except OSError as exc:
        raise CwFedError(f"could not load MNIST from {ds.images!r}/{ds.labels!r}: {exc}") from exc


def build_partition(cfg: ExperimentConfig, data: LabeledDataset) -> Partition:
    rng = seeding.rng_for(cfg.seed, seeding.PARTITION)
    part = cfg.partition
    try:
        if part.kind == "pathological":
            return partition_pathological(data, cfg.clients, part.classes_per_client, rng)
        return partition_dirichlet(data, cfg.clients, part.beta, rng)
    except (PartitionError, ValueError) as exc:
        raise PartitionError(f"partition ({part.kind}) failed: {exc}") from exc


def _init_state(cfg: ExperimentConfig, arch: list[int], clients: Sequence[ClientDataset]) -> ServerState:
    kind = cfg.algorithm.kind
    if kind == "cwfedavg":
        return init_cw_server(arch, clients, cfg.seed, shared_init=cfg.shared_init)
    if kind == "local_only":
        return init_local_only(arch, clients, cfg.seed)
    return init_single_server(arch, clients, cfg.seed)


def simulate(cfg: ExperimentConfig, clients: Optional[Partition] = None) -> Simulation:
    """Partition, initialise and run all rounds; no files written."""
    if clients is None:
        clients = build_partition(cfg, build_dataset(cfg))
    arch = cfg.architecture(clients[0].train.dim)
    server = _init_state(cfg, arch, clients)
    driver = ROUND_DRIVERS[cfg.algorithm.kind]
    reports = []
    for _ in range(cfg.rounds):
        server, report = driver(server, clients, cfg, cfg.algorithm)
        reports.append(report)
        log.debug("round %d mean acc %.4f mean omega %.4f", report.round, report.mean_accuracy, report.mean_omega)

    locals_ = []
    for i, m in enumerate(server.local_models):
        if m is None:
            if cfg.algorithm.kind == "cwfedavg":
                m = aggregate_class_wise_global(server, i)
            else:
                m = server.global_models[0].copy()
        locals_.append(m)

    sim = Simulation(cfg, clients, server, reports, locals_, list(server.global_models))
    if cfg.algorithm.kind == "fedavg_finetune":
        sim.finetuned = run_finetune(server.global_models[0], clients, cfg)
        ft = RoundReport(
            round=cfg.rounds + 1,
            accuracies=np.array([accuracy(m, c.test.features, c.test.labels) for m, c in zip(sim.finetuned, clients)]),
            omegas=np.array([client_omega(m, c) for m, c in zip(sim.finetuned, clients)]),
            uploaded_params=0,
            downloaded_params=0,
        )
        reports.append(ft)
        sim.local_models = sim.finetuned
    _log_gradient_diagnostic(sim)
    return sim


def _log_gradient_diagnostic(sim: Simulation) -> None:
    if not log.isEnabledFor(logging.DEBUG):
        return
    for model, client in zip(sim.local_models, sim.clients):
        _, grads = loss_and_grad(model, Batch(client.train.features, client.train.labels))
        res = gradient_norm_ratio_diagnostic(grads, client.class_counts)
        log.debug("client %d gradient-ratio residuals:\n%s", client.client_id, np.array2string(res, precision=3))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def export(sim: Simulation, out_dir) -> RunSummary:
    """Write CSV artifacts and ``manifest.json``; return the run summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = sim.cfg
    k = cfg.num_classes

    artifacts = {}

    def record(name: str) -> Path:
        artifacts[name] = out / name
        return out / name

    write_per_client_trace(record("accuracy_trace.csv"), sim.reports, "accuracies")
    write_per_client_trace(record("omega_trace.csv"), sim.reports, "omegas")
    local_hm = norm_heatmap(sim.local_models, "client")
    write_heatmap(record("norm_heatmap_local.csv"), local_hm, "client")
    if cfg.algorithm.kind != "local_only":
        prefix = "class_model" if cfg.algorithm.kind == "cwfedavg" else "global"
        write_heatmap(record("norm_heatmap_global.csv"), norm_heatmap(sim.global_models, prefix), "model")
    write_partition_csv(sim.clients, record("data_distribution.csv"))
    if cfg.trace_batches:
        write_batch_trace(record("omega_batch_trace.csv"), sim.reports)

    best, best_round = best_mean_accuracy(sim.reports)
    corr = pattern_correlation_or_none(local_hm, sim.counts)
    comm = sim.communication()
    manifest = {
        "algorithm": cfg.algorithm.label,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "num_classes": k,
        "num_clients": len(sim.clients),
        "params_per_model": sim.local_models[0].num_params,
        "truncated_samples": {str(j): n for j, n in sorted(sim.clients.truncated.items())},
        "communication": comm,
        "communication_total": {
            "uploaded_params": sum(c["uploaded_params"] for c in comm),
            "downloaded_params": sum(c["downloaded_params"] for c in comm),
        },
        "summary": {
            "best_mean_accuracy": fmt(best),
            "best_round": sim.reports[best_round].round,
            "final_mean_omega": fmt(sim.final_mean_omega),
            "pattern_correlation": None if corr is None else fmt(corr),
        },
        "artifacts": {name: _sha256(p) for name, p in sorted(artifacts.items())},
    }
    blob = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
    (out / "manifest.json").write_bytes(blob)
    checksum = hashlib.sha256(blob).hexdigest()

    return RunSummary(
        best_mean_accuracy=best,
        best_round=sim.reports[best_round].round,
        accuracy_trace=[r.mean_accuracy for r in sim.reports],
        final_mean_omega=sim.final_mean_omega,
        config_hash=cfg.config_hash(),
        algorithm=cfg.algorithm.label,
        manifest_checksum=checksum,
        pattern_correlation=corr,
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunSummary:
    sim = simulate(cfg)
    summary = export(sim, out_dir or cfg.output_dir)
    log.info(
        "%s: best mean accuracy %.4f at round %d, final mean omega %.4f",
        summary.algorithm, summary.best_mean_accuracy, summary.best_round, summary.final_mean_omega,
    )
    return summary


def lambda_sweep(base_cfg: ExperimentConfig, lambdas: Sequence[float], out_dir=None) -> list[tuple[float, float, int, float]]:
    """One cwFedAVG-with-WDR run per lambda on the same seed and partition.

    Returns rows ``(lambda, best_mean_accuracy, best_round, mean_final_omega)``
    sorted by lambda, and writes ``lambda_sweep.csv`` when ``out_dir`` is set.
    """
    if not lambdas:
        raise ValueError("no lambda values given")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambda values must be >= 0")
    clients = build_partition(base_cfg, build_dataset(base_cfg))
    rows = []
    for lam in sorted(float(x) for x in lambdas):
        cfg = base_cfg.replace(algorithm=AlgorithmKind("cwfedavg", "estimated_wdr", lam))
        sim = simulate(cfg, clients)
        if out_dir is not None:
            export(sim, Path(out_dir) / f"lambda_{lam:g}")
        best, best_idx = best_mean_accuracy(sim.reports)
        rows.append((lam, best, sim.reports[best_idx].round, sim.final_mean_omega))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_lambda_sweep(Path(out_dir) / "lambda_sweep.csv", rows)
    return rows


def export_partition(cfg: ExperimentConfig, path) -> Partition:
    clients = build_partition(cfg, build_dataset(cfg))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_partition_csv(clients, path)
    return clients
