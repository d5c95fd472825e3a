"""Independent brute-force references used by the derived-value tests and the
verify suite: scalar-loop SGD, direct mean reduction, exhaustive assignment
search, finite-difference gradients, and closed-form pipeline schedules.

Oracles share only type definitions and the elementary per-layer math with
the modules they check; every loop, reduction order, and update application
here is written independently, mostly as plain scalar Python.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import modelcore
from .errors import ConfigError
from .modelcore import Batch, ModelSpec, ParameterVector


# ---------------------------------------------------------------------------
# gradients


def fd_gradient(
    model: ModelSpec, values: np.ndarray, x: np.ndarray, t: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central finite differences of the loss, coordinate by coordinate."""
    base = np.asarray(values, dtype=np.float64)
    grad = np.empty_like(base)
    for i in range(base.shape[0]):
        vp = base.copy()
        vp[i] += h
        vm = base.copy()
        vm[i] -= h
        grad[i] = (modelcore.full_loss(model, vp, x, t) - modelcore.full_loss(model, vm, x, t)) / (
            2.0 * h
        )
    return grad


def gradient_errors(analytic: np.ndarray, estimate: np.ndarray) -> tuple[float, float]:
    """(max_abs_err, max_rel_err) with a scale-aware floor on the denominator."""
    a = np.asarray(analytic)
    f = np.asarray(estimate)
    abs_err = np.abs(a - f)
    floor = 1e-6 * max(1.0, float(np.abs(a).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float(abs_err.max(initial=0.0)), float((abs_err / denom).max(initial=0.0))


def scalar_forward(model: ModelSpec, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pure-Python forward pass, used to cross-check the vectorized one."""
    rows = [list(map(float, row)) for row in np.asarray(x)]
    offset = 0
    for lay in model.layers:
        w_len = lay.in_dim * lay.out_dim
        w = values[offset : offset + w_len]
        b = values[offset + w_len : offset + w_len + lay.out_dim]
        offset += lay.param_count
        nxt = []
        for row in rows:
            out_row = []
            for o in range(lay.out_dim):
                acc = 0.0
                for j in range(lay.in_dim):
                    acc += float(w[o * lay.in_dim + j]) * row[j]
                acc += float(b[o])
                if lay.activation == "tanh":
                    acc = float(np.tanh(acc))
                elif lay.activation == "relu":
                    acc = acc if acc > 0.0 else 0.0
                out_row.append(acc)
            nxt.append(out_row)
        rows = nxt
    return np.array(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# sequential SGD references


def sgd_reference(
    model: ModelSpec,
    values0: np.ndarray,
    batches: Sequence[Batch],
    eta: float,
    n_accum: int = 1,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Plain sequential SGD over the full model.

    Layer math comes from the shared per-layer definitions; the batch loop,
    accumulation, and update application are scalar Python, independent of
    the pipeline executor. Returns the final values and a copy of the values
    after every applied update.
    """
    sub = modelcore.full_submodel(model)
    vals = np.array(values0, dtype=np.float64)
    n = vals.shape[0]
    acc = np.zeros(n, dtype=np.float64)
    in_acc = 0
    trajectory: list[np.ndarray] = []
    for batch in batches:
        pv = ParameterVector(vals, modelcore._blocks_of(sub))
        y, ctx = modelcore.forward(sub, pv, batch.inputs)
        _, dy = modelcore.loss_and_grad(model.loss, y, batch.targets)
        g, _ = modelcore.backward(sub, pv, ctx, dy)
        for i in range(n):
            acc[i] += g[i]
        in_acc += 1
        if in_acc == n_accum:
            for i in range(n):
                vals[i] = vals[i] - eta * (acc[i] / n_accum)
                acc[i] = 0.0
            in_acc = 0
            trajectory.append(vals.copy())
    return vals, trajectory


def two_replica_reference(
    model: ModelSpec,
    values0: np.ndarray,
    batch_pairs: Sequence[tuple[Batch, Batch]],
    eta: float,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Synchronous two-replica data-parallel SGD with averaging every step."""
    sub = modelcore.full_submodel(model)
    vals = np.array(values0, dtype=np.float64)
    trajectory = []
    for ba, bb in batch_pairs:
        grads = []
        for batch in (ba, bb):
            pv = ParameterVector(vals, modelcore._blocks_of(sub))
            y, ctx = modelcore.forward(sub, pv, batch.inputs)
            _, dy = modelcore.loss_and_grad(model.loss, y, batch.targets)
            g, _ = modelcore.backward(sub, pv, ctx, dy)
            grads.append(g)
        for i in range(vals.shape[0]):
            a = vals[i] - eta * grads[0][i]
            b = vals[i] - eta * grads[1][i]
            vals[i] = (a + b) / 2.0
        trajectory.append(vals.copy())
    return vals, trajectory


# ---------------------------------------------------------------------------
# reductions


def mean_reference(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise arithmetic mean by scalar loop, in input order."""
    n = len(vectors[0])
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for v in vectors:
            s += float(v[i])
        out[i] = s / len(vectors)
    return out


# ---------------------------------------------------------------------------
# exhaustive assignment search


def oracle_fitness(
    assignment: Sequence[int],
    pool,
    footprint,
    q: int,
    lam_ram: float | None = None,
    lam_empty: float | None = None,
) -> tuple[float, float, float]:
    """(imbalance, penalty, total) for one assignment, re-derived from scratch.

    Same definition as the production fitness, written as explicit loops so
    the two can disagree only if one of them is wrong.
    """
    m = footprint.M
    min_bw = min(node.bandwidth_Bps for node in pool)
    scale = 10.0 * m / min_bw
    if lam_ram is None:
        lam_ram = scale
    if lam_empty is None:
        lam_empty = scale

    times = []
    penalty = 0.0
    for cid in range(1, q + 1):
        members = [node for node, c in zip(pool, assignment) if c == cid]
        if not members:
            penalty += lam_ram * 1.0 + lam_empty
            times.append(0.0)
            continue
        ram_sum = 0.0
        for node in members:
            ram_sum += node.ram_bytes
        tsum = 0.0
        for node in members:
            tsum += (m * node.ram_bytes / ram_sum) / node.bandwidth_Bps
        times.append(tsum)
        if ram_sum < m:
            penalty += lam_ram * (m - ram_sum) / m
    imbalance = 0.0
    for a in range(q):
        for b in range(a + 1, q):
            d = abs(times[a] - times[b])
            if d > imbalance:
                imbalance = d
    return imbalance, penalty, imbalance + penalty


def exhaustive_partition(pool, footprint, q: int):
    """Enumerate every assignment; argmin total fitness, lexicographic ties.

    Returns (assignment tuple, (imbalance, penalty, total), feasible).
    """
    n = len(pool)
    if q**n > 10**6:
        raise ConfigError(f"search space {q}^{n} exceeds the enumeration budget")
    best = None
    best_fit = None
    for cand in itertools.product(range(1, q + 1), repeat=n):
        fit = oracle_fitness(cand, pool, footprint, q)
        if best_fit is None or fit[2] < best_fit[2]:
            best, best_fit = cand, fit
    return best, best_fit, best_fit[1] == 0.0


# ---------------------------------------------------------------------------
# pipeline schedules


def sync_pipeline_schedule(
    stage_costs: Sequence[tuple[float, float]], n_batches: int = 50
) -> float:
    """Idle fraction of a strict one-in-flight sequential pipeline.

    Builds the explicit timeline (forward sweep, then backward sweep, one
    batch at a time) and measures the average per-stage idle share. Equals
    (P-1)/P for equal stage costs.
    """
    p = len(stage_costs)
    t = 0.0
    busy = [0.0] * p
    for _ in range(n_batches):
        for s in range(p):
            busy[s] += stage_costs[s][0]
            t += stage_costs[s][0]
        for s in range(p - 1, -1, -1):
            busy[s] += stage_costs[s][1]
            t += stage_costs[s][1]
    if t == 0.0:
        return 0.0
    return sum(1.0 - b / t for b in busy) / p


def equal_stage_costs(p: int, fwd: float = 1.0, bwd: float = 1.0):
    return [(fwd, bwd)] * p


# ---------------------------------------------------------------------------
# verification suite


@dataclass
class OracleCheck:
    name: str
    max_abs_err: float
    max_rel_err: float
    tolerance: float
    passed: bool
    detail: str = ""


@dataclass
class OracleReport:
    checks: list[OracleCheck] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name, max_abs, max_rel, tol, passed, detail=""):
        self.checks.append(OracleCheck(name, max_abs, max_rel, tol, passed, detail))

    def to_text(self) -> str:
        lines = [f"{'check':<38} {'max_abs':>12} {'max_rel':>12} {'tol':>9} result"]
        for c in self.checks:
            lines.append(
                f"{c.name:<38} {c.max_abs_err:>12.3e} {c.max_rel_err:>12.3e} "
                f"{c.tolerance:>9.0e} {'pass' if c.passed else 'FAIL'}"
            )
        lines.append(f"{sum(c.passed for c in self.checks)}/{len(self.checks)} checks passed")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["# schema: ravnest-oracle-v1", "check,max_abs_err,max_rel_err,tolerance,passed,detail"]
        for c in self.checks:
            rows.append(
                f"{c.name},{c.max_abs_err!r},{c.max_rel_err!r},{c.tolerance!r},"
                f"{int(c.passed)},{c.detail}"
            )
        return "\n".join(rows) + "\n"


def _grad_case(report: OracleReport, name, arch, activation, loss, seed, n_points=20):
    rng = np.random.Generator(np.random.Philox(key=seed))
    model, params = modelcore.build_model(arch, seed, activation, loss)
    worst_abs = worst_rel = 0.0
    done = 0
    while done < n_points:
        vals = rng.normal(0.0, 0.7, size=model.param_count)
        x = rng.normal(0.0, 1.0, size=(3, model.in_dim))
        if loss == "softmax_ce":
            t = np.zeros((3, model.out_dim))
            t[np.arange(3), rng.integers(0, model.out_dim, 3)] = 1.0
        else:
            t = rng.normal(0.0, 1.0, size=(3, model.out_dim))
        if activation == "relu":
            sub = modelcore.full_submodel(model)
            pv = ParameterVector(vals.copy(), modelcore._blocks_of(sub))
            _, ctx = modelcore.forward(sub, pv, x)
            if min(float(np.abs(z).min()) for z in ctx.preacts) < 1e-3:
                continue  # kink guard: FD is undefined arbitrarily close to 0
        _, analytic = modelcore.full_gradient(model, vals, x, t)
        fd = fd_gradient(model, vals, x, t)
        a, r = gradient_errors(analytic, fd)
        worst_abs = max(worst_abs, a)
        worst_rel = max(worst_rel, r)
        done += 1
    report.add(name, worst_abs, worst_rel, 1e-4, worst_rel <= 1e-4, f"{n_points} points")


def run_verification(seed: int = 20240901) -> OracleReport:
    """Run the oracle suite against the production paths it shadows."""
    from . import clusterform, multiring, simnet  # local: avoid cycles

    rng = np.random.Generator(np.random.Philox(key=seed))
    report = OracleReport()

    # gradient soundness, one case per layer/loss family
    _grad_case(report, "grad_fd_linear_mse", [3, 1], "tanh", "mse", seed + 1)
    _grad_case(report, "grad_fd_mlp_tanh_mse", [4, 6, 2], "tanh", "mse", seed + 2)
    _grad_case(report, "grad_fd_mlp_relu_mse", [4, 6, 2], "relu", "mse", seed + 3)
    _grad_case(report, "grad_fd_mlp_tanh_ce", [4, 6, 3], "tanh", "softmax_ce", seed + 4)

    # hand-algebra single step: y = wx + b, mse, one sample
    model, _ = modelcore.build_model([1, 1], 7)
    w0, b0, x0, t0 = 0.6, -0.3, 1.7, 2.0
    vals = np.array([w0, b0])
    _, g = modelcore.full_gradient(model, vals, np.array([[x0]]), np.array([[t0]]))
    closed = 2.0 * (w0 * x0 + b0 - t0) * np.array([x0, 1.0])
    a, r = gradient_errors(closed, g)
    report.add("linear_closed_form_grad", a, r, 1e-12, a <= 1e-12)

    # scalar-loop forward vs vectorized forward
    model, params = modelcore.build_model([3, 5, 2], 11)
    x = rng.normal(size=(4, 3))
    y_fast, _ = modelcore.forward(modelcore.full_submodel(model), params, x)
    y_slow = scalar_forward(model, params.values, x)
    a = float(np.abs(y_fast - y_slow).max())
    report.add("scalar_forward_agreement", a, a, 1e-12, a <= 1e-12)

    # all-reduce exact mean on a handful of random heterogeneous instances
    worst = 0.0
    for k in range(20):
        inst = multiring.random_instance(rng, n_clusters=int(rng.integers(2, 6)))
        result, _ = multiring.run_allreduce(inst.schedule, inst.cluster_values)
        want = mean_reference(list(inst.cluster_values.values()))
        for got in result.values():
            denom = np.maximum(np.abs(want), 1.0)
            worst = max(worst, float((np.abs(got - want) / denom).max()))
    report.add("allreduce_exact_mean", worst, worst, 1e-12, worst <= 1e-12, "20 instances")

    # ring cost formula: bytes per member per cycle = 2(C-1) * S/C
    worst = 0.0
    for _ in range(10):
        c = int(rng.integers(2, 7))
        s_bytes = float(rng.integers(1, 10**6))
        want = 2.0 * (c - 1) * s_bytes / c
        got = multiring.bytes_per_member(c, s_bytes)
        worst = max(worst, abs(got - want))
    report.add("ring_cost_formula", worst, worst, 1e-9, worst <= 1e-9)

    # delivery-time arithmetic
    net = simnet.Network({"a": simnet.NodeSpec("a", 1.0, 1e5), "b": simnet.NodeSpec("b", 1.0, 1e5)},
                         default_latency=0.01)
    got_t = []
    net.register("b", lambda msg, now: got_t.append(now))
    net.send(simnet.Message("control", "a", "b", 0, payload=np.zeros(125)), now=0.0)
    net.run_until()
    a = abs(got_t[0] - (0.01 + 1000.0 / 1e5))
    report.add("send_delivery_arithmetic", a, a, 1e-12, a <= 1e-12)

    # greedy proportional split: caps (3x, x) over four equal layers
    model, _ = modelcore.build_model([4, 4, 4, 4, 4], 3)
    lb = modelcore.layer_cost_bytes(model.layers[0])
    subs = modelcore.partition_model(model, [3 * lb, 1 * lb])
    ok = [s.layer_hi - s.layer_lo for s in subs] == [3, 1]
    report.add("partition_greedy_split", 0.0 if ok else 1.0, 0.0, 0.0, ok)

    # synchronous pipeline closed form
    frac = sync_pipeline_schedule(equal_stage_costs(3))
    a = abs(frac - 2.0 / 3.0)
    report.add("sync_schedule_closed_form", a, a, 1e-12, a <= 1e-12)

    # GA against exhaustive enumeration on one fixed fixture
    pool = clusterform.random_pool(np.random.Generator(np.random.Philox(key=seed + 9)), 8)
    fp = clusterform.ModelFootprint(batch_size=4, fwdbwd_bytes_per_sample=256.0, param_bytes=2048.0)
    _, best_fit, _ = exhaustive_partition(pool, fp, 2)
    res = clusterform.evolve(pool, fp, 2, clusterform.GAParams(seed=seed + 10))
    ratio = res.fitness.total / best_fit[2] if best_fit[2] > 0 else (1.0 if res.fitness.total == 0 else np.inf)
    report.add("ga_vs_exhaustive", ratio - 1.0, ratio - 1.0, 0.05, ratio <= 1.05, f"ratio={ratio:.4f}")

    return report
