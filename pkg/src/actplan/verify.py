"""Self-checks run by ``actplan verify``.

Each check compares two independent routes: the collectives against an
elementwise sum, the split layer against the single-rank layer, analytic
gradients against central differences, instrumented byte ledgers against
the closed-form memory model, and simulated pipeline peaks against the
first-stage totals.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .config import PRESETS, ModelShape, ParallelLayout, RecomputeStrategy
from .memory import extras_bytes, per_layer_bytes, total_first_stage_bytes
from .pipeline import simulate_memory
from .seqpar.collectives import CommLog, RankShardedTensor, all_gather, all_reduce, reduce_scatter, ring_volume
from .seqpar.layer import (
    ATTENTION_CORE,
    HarnessConfig,
    LayerParams,
    RecomputeMismatchError,
    init_params,
    parallel_block_backward,
    parallel_block_forward,
    reference_block_backward,
    reference_block_forward,
    selective_recompute_attention,
)

DEFAULT_SEED = 42
TP_SIZES = (1, 2, 4)


@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    max_error: float = 0.0
    tolerance: float = 0.0
    details: list[str] = field(default_factory=list)


@dataclass
class VerifyReport:
    seed: int
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "passed": self.passed, "checks": [asdict(c) for c in self.checks]}


def seed_from_env() -> int:
    return int(os.environ.get("ACTPLAN_SEED", DEFAULT_SEED))


def random_harness_config(rng: np.random.Generator, **overrides) -> HarnessConfig:
    """A toy layer whose s, h and a all split evenly over 1, 2 and 4 ranks."""
    a = int(rng.choice([4, 8]))
    head_dim = int(rng.integers(1, 4))
    kw = dict(a=a, h=a * head_dim, s=int(rng.choice([4, 8, 12])), b=int(rng.integers(1, 3)),
              causal=bool(rng.integers(0, 2)), seed=int(rng.integers(0, 2**31)))
    kw.update(overrides)
    return HarnessConfig(**kw)


def _max_abs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def check_collectives(rng: np.random.Generator, cases: int = 1000) -> CheckResult:
    """all_reduce == all_gather(reduce_scatter()) and both equal a brute-force sum."""
    worst = 0.0
    failures = []
    for i in range(cases):
        t = int(rng.integers(1, 9))
        rows = t * int(rng.integers(1, 4))
        shape = (rows, int(rng.integers(1, 5)))
        integer = i % 2 == 0
        if integer:
            parts = [rng.integers(-1000, 1000, size=shape) for _ in range(t)]
        else:
            parts = [rng.normal(size=shape) for _ in range(t)]
        brute = np.zeros(shape, dtype=parts[0].dtype)
        for idx in np.ndindex(shape):
            acc = parts[0][idx]
            for r in range(1, t):
                acc = acc + parts[r][idx]
            brute[idx] = acc
        reduced = all_reduce(parts)
        composed = all_gather(reduce_scatter(parts, axis=0), axis=0)
        for r in range(t):
            if integer:
                ok = np.array_equal(reduced[r], brute) and np.array_equal(composed[r], brute)
            else:
                err = max(_max_abs(reduced[r], composed[r]), _max_abs(reduced[r], brute))
                worst = max(worst, err)
                ok = err <= 1e-12
            if not ok:
                failures.append(f"case {i} rank {r}")
                break
    return CheckResult("collective_identity", not failures, cases, worst, 1e-12, failures[:5])


def _run_parallel(x, dy, params, cfg, t, sp):
    axis = "sequence" if sp else "none"
    y, state = parallel_block_forward(RankShardedTensor.shard(x, t, axis), params, cfg, sp)
    dx, grads, _ = parallel_block_backward(RankShardedTensor.shard(dy, t, axis), state)
    return y.full(), dx.full(), grads, state


def check_equivalence(rng: np.random.Generator, shapes: int = 20, tol: float = 1e-10) -> CheckResult:
    """Split layer (t = 1, 2, 4; with and without sequence sharding) matches the single-rank layer."""
    worst = 0.0
    failures = []
    for i in range(shapes):
        cfg = random_harness_config(rng)
        params = init_params(cfg, rng)
        x = rng.normal(size=(cfg.s, cfg.b, cfg.h))
        dy = rng.normal(size=x.shape)
        y_ref, state = reference_block_forward(x, params, cfg)
        dx_ref, g_ref = reference_block_backward(dy, state)
        for t in TP_SIZES:
            for sp in (True, False):
                y, dx, grads, _ = _run_parallel(x, dy, params, cfg, t, sp)
                errs = [_max_abs(y, y_ref), _max_abs(dx, dx_ref)]
                errs += [_max_abs(getattr(grads, n), getattr(g_ref, n)) for n in g_ref.names()]
                err = max(errs)
                if t == 1 and not (np.array_equal(y, y_ref) and np.array_equal(dx, dx_ref)):
                    failures.append(f"shape {i}: t=1 not bit-identical")
                worst = max(worst, err)
                if err > tol:
                    failures.append(f"shape {i} t={t} sp={sp}: {err:.3g}")
    return CheckResult("parallel_equivalence", not failures, shapes, worst, tol, failures[:5])


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def finite_difference_errors(cfg: HarnessConfig, params: LayerParams, x: np.ndarray, t: int,
                             rng: np.random.Generator, step: float = 1e-5,
                             max_entries: int | None = None) -> dict[str, float]:
    """Relative error between sequence-parallel gradients and central differences, per tensor."""
    weights = rng.normal(size=x.shape)

    def loss(xv: np.ndarray, pv: LayerParams) -> float:
        y, _ = parallel_block_forward(RankShardedTensor.shard(xv, t, "sequence"), pv, cfg)
        return float(np.sum(y.full() * weights))

    _, state = parallel_block_forward(RankShardedTensor.shard(x, t, "sequence"), params, cfg)
    dx, grads, _ = parallel_block_backward(RankShardedTensor.shard(weights, t, "sequence"), state)
    analytic = {"x": dx.full(), **{n: getattr(grads, n) for n in params.names()}}

    out = {}
    for name, grad in analytic.items():
        base = x if name == "x" else getattr(params, name)
        indices = list(np.ndindex(base.shape))
        if max_entries is not None and len(indices) > max_entries:
            pick = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[k] for k in sorted(pick)]
        numeric = np.empty(len(indices))
        for j, idx in enumerate(indices):
            vals = []
            for sign in (1, -1):
                xv, pv = x, params
                if name == "x":
                    xv = x.copy()
                    xv[idx] += sign * step
                else:
                    pv = params.copy()
                    getattr(pv, name)[idx] += sign * step
                vals.append(loss(xv, pv))
            numeric[j] = (vals[0] - vals[1]) / (2 * step)
        picked = np.array([grad[idx] for idx in indices])
        out[name] = _relative(picked, numeric)
    return out


def check_gradients(rng: np.random.Generator, cases: int = 3, tol: float = 1e-6) -> CheckResult:
    worst = 0.0
    failures = []
    for i in range(cases):
        cfg = random_harness_config(rng, s=4, b=1, a=4, h=8, dropout=0.1 if i % 2 else 0.0)
        params = init_params(cfg, rng)
        x = rng.normal(size=(cfg.s, cfg.b, cfg.h))
        errors = finite_difference_errors(cfg, params, x, 2, rng)
        for name, err in errors.items():
            worst = max(worst, err)
            if err > tol:
                failures.append(f"case {i} {name}: {err:.3g}")
    return CheckResult("finite_difference_gradients", not failures, cases, worst, tol, failures[:5])


def _analytic_layer_bytes(cfg: HarnessConfig, t: int, strategy: str) -> int:
    shape = ModelShape(a=cfg.a, h=cfg.h, L=1, s=cfg.s, v=1)
    return per_layer_bytes(shape, ParallelLayout(t=t, b=cfg.b), RecomputeStrategy.parse(strategy), cfg.bytes)


def check_ledger(rng: np.random.Generator, shapes: int = 100) -> CheckResult:
    """Instrumented per-rank bytes equal the closed-form per-layer formulas exactly."""
    failures = []
    for i in range(shapes):
        cfg = random_harness_config(rng, selective=bool(i % 2))
        params = init_params(cfg, rng)
        x = rng.normal(size=(cfg.s, cfg.b, cfg.h))
        prefix = "selective" if cfg.selective else "none"
        _, ref = reference_block_forward(x, params, cfg)
        expected = _analytic_layer_bytes(cfg, 1, prefix)
        if ref.ledger.total_bytes != expected:
            failures.append(f"shape {i} reference: {ref.ledger.total_bytes} != {expected}")
        core = 5 * cfg.a * cfg.s * cfg.s * cfg.b
        for t in TP_SIZES:
            for sp in (True, False):
                axis = "sequence" if sp else "none"
                _, state = parallel_block_forward(RankShardedTensor.shard(x, t, axis), params, cfg, sp)
                expected = _analytic_layer_bytes(cfg, t, prefix + ("+seq" if sp else ""))
                for r, ledger in enumerate(state.ledgers):
                    if ledger.total_bytes != expected:
                        failures.append(f"shape {i} t={t} sp={sp} rank {r}: {ledger.total_bytes} != {expected}")
                    if cfg.selective and ledger.discarded_bytes * t != core:
                        failures.append(f"shape {i} t={t} rank {r}: discarded {ledger.discarded_bytes}")
    return CheckResult("byte_ledger", not failures, shapes, 0.0, 0.0, failures[:5])


def check_comm_volume(rng: np.random.Generator, shapes: int = 10) -> CheckResult:
    """Tensor parallel: 4 all-reduces; tensor+sequence: 4 all-gathers + 4 reduce-scatters; equal bytes."""
    failures = []
    for i in range(shapes):
        cfg = random_harness_config(rng)
        params = init_params(cfg, rng)
        x = rng.normal(size=(cfg.s, cfg.b, cfg.h))
        for t in (2, 4):
            logs = {}
            for sp in (True, False):
                log = CommLog()
                axis = "sequence" if sp else "none"
                _, state = parallel_block_forward(RankShardedTensor.shard(x, t, axis), params, cfg, sp, log)
                parallel_block_backward(RankShardedTensor.shard(x, t, axis), state)
                logs[sp] = log
            sp_log, tp_log = logs[True], logs[False]
            counts = (sp_log.count("all_gather", "activation"), sp_log.count("reduce_scatter", "activation"),
                      sp_log.count("all_reduce", "activation"), tp_log.count("all_reduce", "activation"),
                      tp_log.count("all_gather"), tp_log.count("reduce_scatter"))
            if counts != (4, 4, 0, 4, 0, 0):
                failures.append(f"shape {i} t={t}: counts {counts}")
            elem = cfg.bytes.activation_elem
            if sp_log.volume(elem, "activation") != tp_log.volume(elem, "activation"):
                failures.append(f"shape {i} t={t}: volumes differ")
            expected = 4 * ring_volume("all_reduce", cfg.s * cfg.b * cfg.h, t, elem)
            if tp_log.volume(elem, "activation") != expected:
                failures.append(f"shape {i} t={t}: modeled volume mismatch")
    return CheckResult("communication_volume", not failures, shapes, 0.0, 0.0, failures[:5])


def check_pipeline_peaks(strategies: tuple[str, ...] = ("none+seq", "selective+seq")) -> CheckResult:
    """Simulated rank-0 peak equals the first-stage total plus extras for every preset."""
    failures = []
    for name, cfg in PRESETS.items():
        for label in strategies:
            strategy = RecomputeStrategy.parse(label)
            peak = simulate_memory(cfg.shape, cfg.layout, strategy, dealloc=True, ranks=[0]).peak_per_rank[0]
            expected = (total_first_stage_bytes(cfg.shape, cfg.layout, strategy)
                        + extras_bytes(cfg.shape, cfg.layout).total)
            if peak != expected:
                failures.append(f"{name} {label}: {peak} != {expected}")
    return CheckResult("pipeline_peak", not failures, len(PRESETS) * len(strategies), 0.0, 0.0, failures)


def check_selective_recompute(rng: np.random.Generator, cases: int = 5) -> CheckResult:
    """Recomputed attention-core tensors are bit-equal to the forward's; gradients unchanged."""
    failures = []
    for i in range(cases):
        cfg = random_harness_config(rng, dropout=0.1)
        params = init_params(cfg, rng)
        x = rng.normal(size=(cfg.s, cfg.b, cfg.h))
        dy = rng.normal(size=x.shape)
        _, kept = reference_block_forward(x, params, cfg)
        again = selective_recompute_attention(kept.store["query"], kept.store["key"], kept.store["value"], cfg)
        for name, arr in zip(ATTENTION_CORE, again.arrays):
            if not np.array_equal(arr, kept.store[name]):
                failures.append(f"case {i}: {name} differs")
        sel_cfg = replace(cfg, selective=True)
        _, dropped = reference_block_forward(x, params, sel_cfg)
        dx_a, g_a = reference_block_backward(dy, kept)
        dx_b, g_b = reference_block_backward(dy, dropped)
        if not np.array_equal(dx_a, dx_b) or any(
                not np.array_equal(getattr(g_a, n), getattr(g_b, n)) for n in g_a.names()):
            failures.append(f"case {i}: selective gradients differ")
        wrong_seed = replace(cfg, seed=cfg.seed + 1)
        try:
            selective_recompute_attention(dropped.store["query"], dropped.store["key"], dropped.store["value"],
                                          wrong_seed, fingerprint=dropped.store.fingerprint)
        except RecomputeMismatchError:
            pass
        else:
            failures.append(f"case {i}: seed mismatch not detected")
    return CheckResult("selective_recompute", not failures, cases, 0.0, 0.0, failures[:5])


def run_all(seed: int | None = None) -> VerifyReport:
    seed = seed_from_env() if seed is None else seed
    rng = np.random.default_rng(seed)
    checks = [
        check_collectives(rng),
        check_equivalence(rng),
        check_gradients(rng),
        check_ledger(rng),
        check_comm_volume(rng),
        check_pipeline_peaks(),
        check_selective_recompute(rng),
    ]
    return VerifyReport(seed, checks)
