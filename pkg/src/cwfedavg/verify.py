"""Built-in invariant checks, run by ``cwfedavg verify``.

Each check compares an implementation path against an independent
evaluation (finite differences, explicit loops over parameters) and
returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import seeding
from .config import PartitionSpec, config_from_dict
from .data import true_distribution
from .federation import (
    AlgorithmKind,
    ServerState,
    aggregate_class_wise_global,
    aggregate_class_wise_local,
    fedprox_loss_hook,
)
from .nn import Batch, ModelParams, init_params, linear_combine, loss_and_grad
from .runner import build_dataset, build_partition, simulate
from .wdr import WdrConfig, make_wdr_hook, wdr_gradient, wdr_penalty

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7

Check = tuple[str, bool, str]


def unflatten(template: ModelParams, vec: np.ndarray) -> ModelParams:
    layers, pos = [], 0
    for w, b in template.layers:
        nw = vec[pos:pos + w.size].reshape(w.shape)
        pos += w.size
        nb = vec[pos:pos + b.size].copy()
        pos += b.size
        layers.append((nw.copy(), nb))
    return ModelParams(layers)


def numerical_gradient(f: Callable[[ModelParams], float], params: ModelParams, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to every flattened parameter."""
    x = params.flatten()
    g = np.zeros_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + h
        fp = f(unflatten(params, x))
        x[k] = orig - h
        fm = f(unflatten(params, x))
        x[k] = orig
        g[k] = (fp - fm) / (2 * h)
    return g


def gradients_match(analytic: np.ndarray, numeric: np.ndarray) -> tuple[bool, float]:
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (err <= REL_TOL * scale) | (err <= ABS_FLOOR)
    worst = float(np.max(np.where(scale > 0, err / np.maximum(scale, 1e-300), 0.0)))
    return bool(ok.all()), worst


def _random_net(rng: np.random.Generator) -> tuple[ModelParams, Batch]:
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 9))] + [int(rng.integers(2, 17)) for _ in range(depth - 1)] + [int(rng.integers(2, 6))]
    params = init_params(sizes, rng)
    for w, b in params.layers:
        b += rng.normal(0, 0.1, size=b.shape)
    n = int(rng.integers(1, 8))
    batch = Batch(rng.normal(size=(n, sizes[0])), rng.integers(0, sizes[-1], size=n))
    return params, batch


def check_loss_gradients(trials: int = 20, seed: int = 0) -> Check:
    rng = seeding.rng_for(seed, seeding.VERIFY, 1)
    worst = 0.0
    for t in range(trials):
        params, batch = _random_net(rng)
        k = params.num_classes
        target = rng.dirichlet(np.ones(k))
        hooks = [None, make_wdr_hook(target, WdrConfig(lam=float(rng.uniform(0.1, 5.0))))]
        hooks.append(fedprox_loss_hook(init_params(params.architecture, rng), float(rng.uniform(0.0, 1.0))))
        for reg in hooks:
            _, g = loss_and_grad(params, batch, reg)
            num = numerical_gradient(lambda p: loss_and_grad(p, batch, reg)[0], params)
            ok, w = gradients_match(g.flatten(), num)
            worst = max(worst, w)
            if not ok:
                return "loss gradient vs finite differences", False, f"trial {t}: relative error {w:.2e}"
    return "loss gradient vs finite differences", True, f"{trials} nets x 3 hooks, worst rel. err {worst:.1e}"


def check_wdr_gradient(trials: int = 100, seed: int = 0) -> Check:
    rng = seeding.rng_for(seed, seeding.VERIFY, 2)
    done, worst = 0, 0.0
    while done < trials:
        params, _ = _random_net(rng)
        target = rng.dirichlet(np.ones(params.num_classes))
        if wdr_penalty(params, target) <= 1e-3:
            continue
        cfg = WdrConfig(lam=1.0)
        analytic = params.zeros_like()
        analytic.layers[-1] = (wdr_gradient(params, target, cfg), analytic.layers[-1][1])
        num = numerical_gradient(lambda p: wdr_penalty(p, target), params)
        ok, w = gradients_match(analytic.flatten(), num)
        worst = max(worst, w)
        if not ok:
            return "WDR gradient vs finite differences", False, f"trial {done}: relative error {w:.2e}"
        done += 1
    return "WDR gradient vs finite differences", True, f"{trials} cases, worst rel. err {worst:.1e}"


def brute_class_wise_local(flat_locals: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Explicit loops: ``w_j[e] = sum_i n_ij * w_i[e] / sum_i n_ij``."""
    m, p = flat_locals.shape
    k = counts.shape[1]
    out = np.zeros((k, p))
    for j in range(k):
        denom = 0.0
        for i in range(m):
            denom += counts[i, j]
        for e in range(p):
            acc = 0.0
            for i in range(m):
                acc += counts[i, j] * flat_locals[i, e]
            out[j, e] = acc / denom
    return out


def brute_class_wise_global(flat_globals: np.ndarray, dist: np.ndarray) -> np.ndarray:
    k, p = flat_globals.shape
    out = np.zeros(p)
    for e in range(p):
        acc = 0.0
        for j in range(k):
            acc += dist[j] * flat_globals[j, e]
        out[e] = acc
    return out


def random_small_model(rng: np.random.Generator, k: int, max_params: int = 50) -> list[int]:
    """Architecture ending in ``k`` outputs with at most ``max_params`` parameters."""
    while True:
        arch = [int(rng.integers(1, 5))] + ([int(rng.integers(1, 5))] if rng.random() < 0.5 else []) + [k]
        n = sum(a * b + b for a, b in zip(arch[:-1], arch[1:]))
        if n <= max_params:
            return arch


def check_aggregation(trials: int = 200, seed: int = 0) -> Check:
    rng = seeding.rng_for(seed, seeding.VERIFY, 3)
    worst = 0.0
    for t in range(trials):
        m, k = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        arch = random_small_model(rng, k)
        locals_ = [init_params(arch, rng) for _ in range(m)]
        counts = rng.integers(0, 20, size=(m, k))
        counts[np.arange(m), rng.integers(0, k, size=m)] += 1  # no empty client
        counts[rng.integers(0, m, size=k), np.arange(k)] += 1  # no empty class
        n = counts.sum(axis=1)
        p = counts / n[:, None]
        # mass n_i * p_ij, which equals n_ij up to rounding
        got = aggregate_class_wise_local(locals_, n[:, None] * p)
        flat = np.stack([mdl.flatten() for mdl in locals_])
        want = brute_class_wise_local(flat, counts)
        err = max(float(np.max(np.abs(g.flatten() - w))) for g, w in zip(got, want))
        worst = max(worst, err)
        if err > 1e-12:
            return "class-wise aggregation vs direct evaluation", False, f"local, trial {t}: error {err:.2e}"

        server = ServerState(got, p, n)
        for i in range(m):
            personal = aggregate_class_wise_global(server, i)
            want_i = brute_class_wise_global(np.stack([g.flatten() for g in got]), p[i])
            err = float(np.max(np.abs(personal.flatten() - want_i)))
            worst = max(worst, err)
            if err > 1e-12:
                return "class-wise aggregation vs direct evaluation", False, f"global, trial {t}: error {err:.2e}"
    return "class-wise aggregation vs direct evaluation", True, f"{trials} instances, max abs err {worst:.1e}"


def check_linearity(trials: int = 50, seed: int = 0) -> Check:
    rng = seeding.rng_for(seed, seeding.VERIFY, 4)
    for _ in range(trials):
        arch = random_small_model(rng, int(rng.integers(1, 5)))
        a, b, c = (init_params(arch, rng) for _ in range(3))
        al, be, ga = rng.normal(size=3)
        lhs = linear_combine([linear_combine([a, b], [al, be]), c], [1.0, ga]).flatten()
        rhs = linear_combine([a, b, c], [al, be, ga]).flatten()
        if np.max(np.abs(lhs - rhs)) > 1e-12:
            return "linear_combine linearity", False, "nested and flat combinations differ"
    return "linear_combine linearity", True, f"{trials} cases"


def uniform_equivalence_config(rounds: int = 20, classes: int = 4, clients: int = 8, seed: int = 0, per_shard: int = 20):
    """Uniform-class setting where class-wise and plain averaging must coincide."""
    raw = {
        "seed": seed,
        "clients": clients,
        "rounds": rounds,
        "dataset": {"kind": "synthetic", "classes": classes, "dim": 6, "per_class": clients * per_shard, "separation": 3.0},
        "partition": {"kind": "pathological", "classes_per_client": classes},
        "training": {"lr": 0.05, "hidden": [8], "shared_init": True},
        "algorithm": {"kind": "fedavg"},
    }
    return config_from_dict(raw)


def uniform_equivalence_deviation(rounds: int = 20, classes: int = 4, clients: int = 8, seed: int = 0) -> tuple[float, list[float]]:
    """Largest elementwise gap between any class global and the FedAVG global, per round."""
    from .federation import init_cw_server, init_single_server, run_round_cwfedavg, run_round_fedavg

    cfg = uniform_equivalence_config(rounds, classes, clients, seed)
    parts = build_partition(cfg, build_dataset(cfg))
    for c in parts:
        p = true_distribution(c)
        if not np.allclose(p, 1.0 / classes, rtol=0, atol=0):
            raise AssertionError(f"client {c.client_id} is not exactly uniform: {c.class_counts}")
    arch = cfg.architecture(parts[0].train.dim)
    fed = init_single_server(arch, parts, cfg.seed)
    cw = init_cw_server(arch, parts, cfg.seed, shared_init=True)
    fa, ca = AlgorithmKind("fedavg"), AlgorithmKind("cwfedavg", "true_dist")
    per_round = []
    for _ in range(rounds):
        fed, _ = run_round_fedavg(fed, parts, cfg, fa)
        cw, _ = run_round_cwfedavg(cw, parts, cfg, ca)
        g = fed.global_models[0].flatten()
        per_round.append(max(float(np.max(np.abs(w.flatten() - g))) for w in cw.global_models))
    return max(per_round), per_round


def check_uniform_equivalence(rounds: int = 5) -> Check:
    dev, _ = uniform_equivalence_deviation(rounds=rounds, classes=3, clients=4)
    return "uniform data: class globals equal FedAVG global", dev <= 1e-9, f"{rounds} rounds, max deviation {dev:.1e}"


def check_single_client_roundtrip() -> Check:
    cfg = uniform_equivalence_config(rounds=3, classes=3, clients=1).replace(
        partition=PartitionSpec("dirichlet", beta=0.5),
        algorithm=AlgorithmKind("cwfedavg", "true_dist"),
        shared_init=False,
    )
    sim = simulate(cfg)
    server = sim.server
    dist = true_distribution(sim.clients[0])
    personal = aggregate_class_wise_global(server, 0, dist)
    err = float(np.max(np.abs(personal.flatten() - sim.local_models[0].flatten())))
    return "single client: download equals own upload", err <= 1e-12, f"max deviation {err:.1e}"


ALL_CHECKS = [
    check_loss_gradients,
    check_wdr_gradient,
    check_aggregation,
    check_linearity,
    check_uniform_equivalence,
    check_single_client_roundtrip,
]


def run_all(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for fn in ALL_CHECKS:
        t0 = time.perf_counter()
        name, passed, detail = fn()
        ok &= passed
        echo(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok
