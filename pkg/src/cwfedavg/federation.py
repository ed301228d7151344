"""Simulated server and round drivers.

cwFedAVG keeps one global model per class. Each round the server builds a
personalized starting model for client ``i`` as ``sum_j p_ij * w_j`` over the
class globals, clients train and upload, and the server rebuilds every class
global as a weighted mean of the uploads with weights ``n_i * p_ij``
normalised per class. ``p_ij`` is the true label share or the estimate read
from the uploaded model's output-layer row norms.

FedAVG, FedProx and local-only training share the same client loop so the
baselines differ only in what is downloaded and how uploads are combined.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import seeding
from .data import ClientDataset, true_distribution
from .nn import GradientSet, ModelParams, RegularizerHook, accuracy, init_params, linear_combine, train_local
from .wdr import WdrConfig, estimate_or_uniform, make_wdr_hook

log = logging.getLogger(__name__)

CW_MODES = ("true_dist", "estimated_no_wdr", "estimated_wdr")
KINDS = ("fedavg", "fedavg_finetune", "fedprox", "local_only", "cwfedavg")


@dataclass(frozen=True)
class AlgorithmKind:
    kind: str
    mode: Optional[str] = None
    lam: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown algorithm {self.kind!r}; expected one of {KINDS}")
        if self.kind == "cwfedavg":
            if self.mode not in CW_MODES:
                raise ValueError(f"cwfedavg mode must be one of {CW_MODES}, got {self.mode!r}")
        elif self.mode is not None:
            raise ValueError(f"mode only applies to cwfedavg, not {self.kind}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.mu >= 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")

    @property
    def label(self) -> str:
        if self.kind == "cwfedavg":
            return f"cwfedavg-{self.mode}"
        return self.kind


@dataclass
class RoundReport:
    round: int
    accuracies: np.ndarray
    omegas: np.ndarray
    uploaded_params: int
    downloaded_params: int
    wall_time: float = 0.0
    warnings: list[str] = field(default_factory=list)
    batch_omegas: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def mean_omega(self) -> float:
        return float(np.mean(self.omegas))


@dataclass
class ServerState:
    """Server-side state for cwFedAVG (K class globals) or single-global baselines (K=1)."""

    global_models: list[ModelParams]
    est_distributions: np.ndarray
    sample_counts: np.ndarray
    round: int = 0
    local_models: list[Optional[ModelParams]] = field(default_factory=list)

    def __post_init__(self):
        self.est_distributions = np.asarray(self.est_distributions, dtype=np.float64)
        self.sample_counts = np.asarray(self.sample_counts, dtype=np.int64)
        shapes = {tuple(m.shapes) for m in self.global_models}
        if len(shapes) != 1:
            raise ValueError("global models must share one architecture")
        if not self.local_models:
            self.local_models = [None] * len(self.sample_counts)

    @property
    def num_clients(self) -> int:
        return len(self.sample_counts)


def init_cw_server(
    architecture: Sequence[int],
    clients: Sequence[ClientDataset],
    seed: int,
    shared_init: bool = False,
) -> ServerState:
    """K random class globals and uniform initial estimates.

    ``shared_init`` starts every class global from the tensor a FedAVG run
    with the same seed would use.
    """
    k = architecture[-1]
    if shared_init:
        base = init_params(architecture, seeding.rng_for(seed, seeding.INIT, 0))
        globals_ = [base.copy() for _ in range(k)]
    else:
        globals_ = [init_params(architecture, seeding.rng_for(seed, seeding.INIT, j)) for j in range(k)]
    m = len(clients)
    return ServerState(
        global_models=globals_,
        est_distributions=np.full((m, k), 1.0 / k),
        sample_counts=[c.num_samples for c in clients],
    )


def init_single_server(architecture: Sequence[int], clients: Sequence[ClientDataset], seed: int) -> ServerState:
    k = architecture[-1]
    return ServerState(
        global_models=[init_params(architecture, seeding.rng_for(seed, seeding.INIT, 0))],
        est_distributions=np.full((len(clients), k), 1.0 / k),
        sample_counts=[c.num_samples for c in clients],
    )


def init_local_only(architecture: Sequence[int], clients: Sequence[ClientDataset], seed: int) -> ServerState:
    """Each client gets its own independently seeded model; the single 'global' is unused."""
    state = init_single_server(architecture, clients, seed)
    state.local_models = [
        init_params(architecture, seeding.rng_for(seed, seeding.INIT, 1_000_000 + c.client_id)) for c in clients
    ]
    return state


def aggregate_class_wise_local(
    locals_: Sequence[ModelParams],
    weights_per_class: np.ndarray,
    previous: Optional[Sequence[ModelParams]] = None,
) -> list[ModelParams]:
    """Class globals from uploads: ``w_j = sum_i q_ij w_i`` with ``q_ij = m_ij / sum_i m_ij``.

    ``weights_per_class[i, j]`` is the unnormalised mass ``p_i * p_ij`` (any
    common scale, e.g. ``n_i * p_ij``). A class with zero total mass keeps
    ``previous[j]``.
    """
    mass = np.asarray(weights_per_class, dtype=np.float64)
    if mass.ndim != 2 or mass.shape[0] != len(locals_):
        raise ValueError(f"weights_per_class must be (M, K) with M={len(locals_)}, got {mass.shape}")
    if (mass < 0).any():
        raise ValueError("class weights must be non-negative")
    totals = mass.sum(axis=0)
    out = []
    for j in range(mass.shape[1]):
        if totals[j] > 0:
            out.append(linear_combine(locals_, mass[:, j] / totals[j]))
        elif previous is not None:
            out.append(previous[j].copy())
        else:
            raise ValueError(f"class {j} has zero aggregation mass and no previous model")
    return out


def aggregate_class_wise_global(server: ServerState, client_id: int, distribution: Optional[np.ndarray] = None) -> ModelParams:
    """Personalized model ``sum_j p_ij * w_j`` for one client.

    Uses the server's stored estimate unless ``distribution`` is given.
    """
    p = server.est_distributions[client_id] if distribution is None else np.asarray(distribution, dtype=np.float64)
    if len(p) != len(server.global_models):
        raise ValueError(f"distribution has {len(p)} entries for {len(server.global_models)} class models")
    return linear_combine(server.global_models, p)


def fedavg_aggregate(locals_: Sequence[ModelParams], sample_counts: Sequence[int]) -> ModelParams:
    n = np.asarray(sample_counts, dtype=np.float64)
    return linear_combine(locals_, n / n.sum())


def fedprox_loss_hook(global_snapshot: ModelParams, mu: float) -> RegularizerHook:
    """Proximal term ``mu/2 * |w - w_global|^2``."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    anchor = global_snapshot.copy()

    def hook(params: ModelParams) -> tuple[float, GradientSet]:
        diff = params - anchor
        sq = float(np.dot(diff.flatten(), diff.flatten()))
        return 0.5 * mu * sq, diff * mu

    return hook


def _participants(cfg, round_idx: int, m: int) -> list[int]:
    rate = getattr(cfg, "participation", 1.0)
    if rate >= 1.0:
        return list(range(m))
    count = max(1, int(round(rate * m)))
    rng = seeding.rng_for(cfg.seed, seeding.PARTICIPATION, round_idx)
    return sorted(int(i) for i in rng.choice(m, size=count, replace=False))


def _train_client(
    start: ModelParams,
    client: ClientDataset,
    cfg,
    round_idx: int,
    reg: Optional[RegularizerHook],
    report: RoundReport,
    *,
    epochs: Optional[int] = None,
    purpose: int = seeding.SHUFFLE,
) -> ModelParams:
    target = true_distribution(client)
    on_batch = None
    if getattr(cfg, "trace_batches", False):
        counter = iter(range(10**9))

        def on_batch(params: ModelParams) -> None:
            est, _ = estimate_or_uniform(params)
            report.batch_omegas.append((client.client_id, next(counter), float(np.linalg.norm(target - est))))

    return train_local(
        start,
        client.train.features,
        client.train.labels,
        epochs=cfg.local_epochs if epochs is None else epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        rng=seeding.rng_for(cfg.seed, purpose, client.client_id, round_idx),
        reg=reg,
        on_batch=on_batch,
    )


def client_omega(model: ModelParams, client: ClientDataset) -> float:
    est, _ = estimate_or_uniform(model)
    return float(np.linalg.norm(true_distribution(client) - est))


def _new_report(round_idx: int, m: int) -> RoundReport:
    return RoundReport(round_idx, np.zeros(m), np.zeros(m), 0, 0)


def run_round_cwfedavg(
    server: ServerState, clients: Sequence[ClientDataset], cfg, algorithm: AlgorithmKind
) -> tuple[ServerState, RoundReport]:
    """One round of class-wise FedAVG; ``server`` is updated in place and returned."""
    t0 = time.perf_counter()
    r = server.round + 1
    m = len(clients)
    report = _new_report(r, m)
    active = _participants(cfg, r, m)
    n_params = server.global_models[0].num_params
    true_p = np.stack([true_distribution(c) for c in clients])
    use_true = algorithm.mode == "true_dist"
    download_p = true_p if use_true else server.est_distributions

    uploads: dict[int, ModelParams] = {}
    for i, client in enumerate(clients):
        start = aggregate_class_wise_global(server, i, download_p[i])
        if i not in active:
            report.accuracies[i] = accuracy(start, client.test.features, client.test.labels)
            report.omegas[i] = client_omega(start, client)
            continue
        reg = None
        if algorithm.mode == "estimated_wdr":
            reg = make_wdr_hook(true_p[i], WdrConfig(lam=algorithm.lam))
        local = _train_client(start, client, cfg, r, reg, report)
        uploads[i] = local
        server.local_models[i] = local
        report.accuracies[i] = accuracy(local, client.test.features, client.test.labels)
        report.omegas[i] = client_omega(local, client)
        report.downloaded_params += n_params
        report.uploaded_params += n_params

    if use_true:
        server.est_distributions = true_p.copy()
    else:
        for i, local in uploads.items():
            est, fallback = estimate_or_uniform(local)
            if fallback:
                msg = f"round {r}: client {i} has an all-zero output layer; using uniform estimate"
                log.warning(msg)
                report.warnings.append(msg)
            server.est_distributions[i] = est

    ids = sorted(uploads)
    p_hat = true_p if use_true else server.est_distributions
    mass = server.sample_counts[ids, None] * p_hat[ids]
    server.global_models = aggregate_class_wise_local([uploads[i] for i in ids], mass, server.global_models)
    server.round = r
    report.wall_time = time.perf_counter() - t0
    return server, report


def run_round_fedavg(
    server: ServerState, clients: Sequence[ClientDataset], cfg, algorithm: AlgorithmKind
) -> tuple[ServerState, RoundReport]:
    """Broadcast, train, average by sample count. Also drives FedProx when ``algorithm.mu`` applies."""
    t0 = time.perf_counter()
    r = server.round + 1
    m = len(clients)
    report = _new_report(r, m)
    active = _participants(cfg, r, m)
    glob = server.global_models[0]
    n_params = glob.num_params

    uploads: dict[int, ModelParams] = {}
    for i, client in enumerate(clients):
        if i not in active:
            report.accuracies[i] = accuracy(glob, client.test.features, client.test.labels)
            report.omegas[i] = client_omega(glob, client)
            continue
        reg = fedprox_loss_hook(glob, algorithm.mu) if algorithm.kind == "fedprox" else None
        local = _train_client(glob, client, cfg, r, reg, report)
        uploads[i] = local
        server.local_models[i] = local
        report.accuracies[i] = accuracy(local, client.test.features, client.test.labels)
        report.omegas[i] = client_omega(local, client)
        report.downloaded_params += n_params
        report.uploaded_params += n_params

    ids = sorted(uploads)
    server.global_models = [fedavg_aggregate([uploads[i] for i in ids], server.sample_counts[ids])]
    server.round = r
    report.wall_time = time.perf_counter() - t0
    return server, report


def run_round_local_only(
    server: ServerState, clients: Sequence[ClientDataset], cfg, algorithm: AlgorithmKind
) -> tuple[ServerState, RoundReport]:
    """Every client trains its own model; nothing leaves the client."""
    t0 = time.perf_counter()
    r = server.round + 1
    m = len(clients)
    report = _new_report(r, m)
    active = _participants(cfg, r, m)
    for i, client in enumerate(clients):
        model = server.local_models[i]
        if i in active:
            model = _train_client(model, client, cfg, r, None, report)
            server.local_models[i] = model
        report.accuracies[i] = accuracy(model, client.test.features, client.test.labels)
        report.omegas[i] = client_omega(model, client)
    server.round = r
    report.wall_time = time.perf_counter() - t0
    return server, report


def run_finetune(
    global_model: ModelParams, clients: Sequence[ClientDataset], cfg, epochs: Optional[int] = None
) -> list[ModelParams]:
    """Copy the global to every client and train locally for ``finetune_epochs``."""
    epochs = getattr(cfg, "finetune_epochs", 1) if epochs is None else epochs
    out = []
    scratch = _new_report(0, len(clients))
    for client in clients:
        if epochs == 0:
            out.append(global_model.copy())
            continue
        out.append(_train_client(global_model, client, cfg, 0, None, scratch, epochs=epochs, purpose=seeding.FINETUNE))
    return out


ROUND_DRIVERS = {
    "cwfedavg": run_round_cwfedavg,
    "fedavg": run_round_fedavg,
    "fedavg_finetune": run_round_fedavg,
    "fedprox": run_round_fedavg,
    "local_only": run_round_local_only,
}
