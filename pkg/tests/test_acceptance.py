"""Acceptance suite: one test per criterion, every tolerance pinned.

Run with `pytest tests/test_acceptance.py -v -s` to see one pass/fail line
per criterion including its runtime budget.
"""

import time

import numpy as np

from conftest import drive, make_cluster, random_batches, tiny_plan
from ravnest import data, modelcore, multiring, oracle
from ravnest.clusterform import GAParams, ModelFootprint, check_feasibility, evolve, random_pool
from ravnest.modelcore import ParameterVector, build_model, full_submodel
from ravnest.orchestrator import TrainConfig, measure_convergence, train, updates_per_vtime
from ravnest.pipeline import measure_bubble


def report(criterion: str, ok: bool, detail: str, elapsed: float, budget: float | None):
    status = "PASS" if ok else "FAIL"
    limit = f" [{elapsed:.1f}s / budget {budget:.0f}s]" if budget else f" [{elapsed:.1f}s]"
    print(f"[{status}] {criterion}: {detail}{limit}")
    assert ok, f"{criterion}: {detail}"
    if budget is not None:
        assert elapsed <= budget, f"{criterion} exceeded its {budget:.0f}s budget ({elapsed:.1f}s)"


def test_criterion_1_allreduce_exactness():
    t0 = time.time()
    rng = np.random.Generator(np.random.Philox(key=777))
    worst = 0.0
    bad_rounds = 0
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        inst = multiring.random_instance(rng, c, max_peers=4, max_dim=4096)
        out, stats = multiring.run_allreduce(inst.schedule, inst.cluster_values)
        want = oracle.mean_reference(
            [inst.cluster_values[k] for k in sorted(inst.cluster_values)]
        )
        for k in out:
            err = np.abs(out[k] - want) / np.maximum(np.abs(want), 1.0)
            worst = max(worst, float(err.max()))
        bad_rounds += sum(s.rounds != 2 * (c - 1) for s in stats)
    elapsed = time.time() - t0
    report(
        "criterion 1 (all-reduce exactness)",
        worst <= 1e-12 and bad_rounds == 0,
        f"1000 instances, worst rel err {worst:.2e}, {bad_rounds} wrong round counts",
        elapsed,
        60.0,
    )


def test_criterion_2_zero_bubble():
    t0 = time.time()
    sat = make_cluster(n_peers=3, max_inflight=3, cost_coeff=1 / 40)
    drive(sat, random_batches(sat.model, 80))
    bubble_sat = measure_bubble(sat.cluster.trace_info(), warmup=8)

    sync = make_cluster(n_peers=3, max_inflight=1, cost_coeff=1 / 40)
    drive(sync, random_batches(sync.model, 40))
    bubble_sync = measure_bubble(sync.cluster.trace_info(), warmup=5)
    closed_form = oracle.sync_pipeline_schedule(oracle.equal_stage_costs(3))

    ok = bubble_sat <= 0.02 and abs(bubble_sync - closed_form) <= 0.05
    report(
        "criterion 2 (zero bubble)",
        ok,
        f"saturated {bubble_sat:.4f} <= 0.02; sync {bubble_sync:.4f} vs 2/3 closed form",
        time.time() - t0,
        30.0,
    )


def test_criterion_3_staleness_structure():
    t0 = time.time()
    h = make_cluster(n_peers=4, max_inflight=4, enforce_T=True, T_bound=3, cost_coeff=1 / 40)
    drive(h, random_batches(h.model, 2500))  # 10k updates across 4 stages
    per_batch = {}
    for rec in h.cluster.staleness:
        per_batch.setdefault(rec.batch_id, {})[rec.peer_index] = rec.tau
    monotone = all(
        taus[3] == 0 and taus[0] >= taus[1] >= taus[2] >= taus[3]
        for taus in per_batch.values()
    )
    max_tau = max(rec.tau for rec in h.cluster.staleness)
    ok = monotone and max_tau <= 3 and h.cluster.total_updates() == 10_000
    report(
        "criterion 3 (staleness structure)",
        ok,
        f"10k updates, tau nonincreasing per batch, last stage 0, max tau {max_tau} <= 3",
        time.time() - t0,
        None,
    )


def test_criterion_4_degeneration_equivalence():
    t0 = time.time()
    # (C=1, P=1): bitwise-equal trajectory over 1000 steps
    model, params, plan = tiny_plan([1], n_layers=2, seed=19)
    cfg = TrainConfig(eta=0.05, kappa=10**9, k_target=1000, batch_size=4, seed=19,
                      record_trajectory=True)
    ds = data.make_dataset("mlp", model, 128, seed=19)
    result = train(model, params.values, plan, cfg, ds)
    shards = data.shard_dataset(ds[0], ds[1], 1, seed=19)
    batches = [data.make_batch(shards[0], k, 4, 1, 0, 1) for k in range(1000)]
    _, want = oracle.sgd_reference(model, params.values, batches, eta=0.05)
    bitwise = len(result.trajectory) == 1000 and all(
        np.array_equal(a, b) for a, b in zip(result.trajectory, want)
    )

    # (C=2, synchronous, kappa=1): within 1e-10 of the averaged oracle
    model2, params2, plan2 = tiny_plan([1, 1], seed=23)
    n_pairs = 100
    cfg2 = TrainConfig(eta=0.08, kappa=1, k_target=2 * n_pairs, batch_size=4,
                       max_inflight=1, seed=23)
    ds2 = data.make_dataset("mlp", model2, 160, seed=23)
    result2 = train(model2, params2.values, plan2, cfg2, ds2)
    shards2 = data.shard_dataset(ds2[0], ds2[1], 2, seed=23)
    pairs = [
        (data.make_batch(shards2[0], k, 4, 1, 0, 2), data.make_batch(shards2[1], k, 4, 2, 1, 2))
        for k in range(n_pairs)
    ]
    want2, _ = oracle.two_replica_reference(model2, params2.values, pairs, eta=0.08)
    scale = 1.0 + float(np.abs(want2).max())
    dev = max(float(np.abs(result2.cluster_values[c] - want2).max()) for c in (1, 2))
    ok = bitwise and dev <= 1e-10 * scale
    report(
        "criterion 4 (degeneration equivalence)",
        ok,
        f"C1P1 bitwise over 1000 steps: {bitwise}; C2 sync dev {dev:.2e} <= 1e-10 scale",
        time.time() - t0,
        None,
    )


def test_criterion_5_convergence_rate():
    t0 = time.time()
    # convex quadratic (dim 32), C=2, eta from the 1/sqrt(K) preset, K=50k
    model, params, plan = tiny_plan([1, 1], arch=[32, 1], batch_size=8, seed=42)
    ds = data.make_dataset("linear", model, 512, seed=42, noise=0.0)
    cfg = TrainConfig(eta="auto", kappa=500, k_target=50_000, batch_size=8,
                      max_inflight=1, seed=42)
    result = train(model, params.values, plan, cfg, ds)
    rep = measure_convergence(result.checkpoints)

    # single-node oracle reference on the same quadratic establishes the band
    shards = data.shard_dataset(ds[0], ds[1], 1, seed=42)
    batches = [data.make_batch(shards[0], k, 8, 1, 0, 1) for k in range(5000)]
    vals = params.values.copy()
    norms = []
    for chunk in range(100):
        _, traj = oracle.sgd_reference(
            model, vals, batches[chunk * 50 : (chunk + 1) * 50], eta=result.eta_used
        )
        vals = traj[-1]
        _, g = modelcore.full_gradient(model, vals, ds[0], ds[1])
        norms.append(float(g @ g))
    running = np.cumsum(norms) / np.arange(1, 101)
    ts = 50.0 * np.arange(1, 101)
    ref_slope = float(np.polyfit(np.log(ts[50:]), np.log(np.maximum(running[50:], 1e-300)), 1)[0])

    # small MLP classification: held-out loss within 1.1x of single-node SGD
    arch = [8, 16, 16, 3]
    k_updates = 12_000
    eta = 0.08
    model3, params3, plan3 = tiny_plan([2, 2], arch=arch, batch_size=8, seed=31,
                                       loss="softmax_ce")
    x, t = data.make_dataset("classify", model3, 1024, seed=31, noise=0.1)
    train_set, test_set = (x[:512], t[:512]), (x[512:], t[512:])
    cfg3 = TrainConfig(eta=eta, kappa=200, k_target=k_updates, batch_size=8, seed=31)
    result3 = train(model3, params3.values, plan3, cfg3, train_set)
    shards1 = data.shard_dataset(*train_set, 1, seed=31)
    base_batches = [data.make_batch(shards1[0], k, 8, 1, 0, 1) for k in range(k_updates)]
    base_final, _ = oracle.sgd_reference(model3, params3.values, base_batches, eta=eta)
    rav_loss = modelcore.full_loss(model3, result3.mean_values, *test_set)
    base_loss = modelcore.full_loss(model3, base_final, *test_set)
    ratio = rav_loss / base_loss

    ok = rep.rate_slope <= -0.4 and ref_slope <= -0.4 and ratio <= 1.1
    report(
        "criterion 5 (convergence rate)",
        ok,
        f"quadratic slope {rep.rate_slope:.3f} (oracle {ref_slope:.3f}) <= -0.4; "
        f"mlp held-out ratio {ratio:.3f} <= 1.1",
        time.time() - t0,
        300.0,
    )


def test_criterion_6_linear_speedup():
    t0 = time.time()
    rates = {}
    for c, k in ((2, 2400), (4, 4800)):
        model, params, plan = tiny_plan([2] * c, batch_size=4, seed=17)
        ds = data.make_dataset("mlp", model, 128, seed=17)
        cfg = TrainConfig(eta=0.02, kappa=k // 4, k_target=k, batch_size=4, seed=17,
                          fwd_cost_coeff=1e-5, default_latency=1e-5)
        rates[c] = updates_per_vtime(train(model, params.values, plan, cfg, ds))
    ratio = rates[4] / rates[2]
    ok = abs(ratio - 2.0) <= 0.2
    report(
        "criterion 6 (linear speedup)",
        ok,
        f"updates/vtime C=4 vs C=2 ratio {ratio:.3f}, within 10% of 2x",
        time.time() - t0,
        120.0,
    )


def test_criterion_7_ga_quality():
    t0 = time.time()
    rng = np.random.Generator(np.random.Philox(key=20250810))
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(4, 11))
        q = min(int(rng.integers(2, 4)), n)
        pool = random_pool(rng, n)
        total_ram = sum(nd.ram_bytes for nd in pool)
        m = float(rng.uniform(0.5, 1.2)) * total_ram / q
        fp = ModelFootprint(batch_size=1, fwdbwd_bytes_per_sample=0.0, param_bytes=m)
        _, best_fit, _ = oracle.exhaustive_partition(pool, fp, q)
        res = evolve(pool, fp, q, GAParams(seed=1000 + i, pop_size=64, generations=200))
        assert all(a >= b for a, b in zip(res.history, res.history[1:])), "elitism"
        if res.feasible:
            assert check_feasibility(res.best, pool, fp, q), "RAM constraint"
        if best_fit[2] > 0:
            worst = max(worst, res.fitness.total / best_fit[2])
        else:
            assert res.fitness.total == 0.0
    ok = worst <= 1.05
    report(
        "criterion 7 (GA quality)",
        ok,
        f"100 pools, worst GA/exhaustive ratio {worst:.4f} <= 1.05",
        time.time() - t0,
        180.0,
    )


def test_criterion_8_cost_model():
    t0 = time.time()
    rng = np.random.Generator(np.random.Philox(key=99))
    worst = 0.0
    for _ in range(50):
        c = int(rng.integers(2, 8))
        s = float(rng.integers(8, 10**7))
        want = 2.0 * (c - 1) * s / c
        got = multiring.bytes_per_member(c, s)
        worst = max(worst, abs(got - want) / want)
    # equal rings: critical-path ratio is exactly 1/ring_count
    ratio_err = 0.0
    for rings in (2, 3, 5):
        layouts = {
            cid: [multiring.ParamRange(r * 128, 128) for r in range(rings)]
            for cid in range(3)
        }
        sched = multiring.build_ring_schedule(layouts)
        rep = multiring.allreduce_cost(sched, bandwidth=1e7)
        ratio_err = max(ratio_err, abs(rep.critical_ratio - 1.0 / rings))
    ok = worst == 0.0 and ratio_err <= 1e-12
    report(
        "criterion 8 (cost model)",
        ok,
        f"50 byte-formula cases exact; equal-ring ratio err {ratio_err:.1e}",
        time.time() - t0,
        None,
    )


def test_criterion_9_determinism():
    t0 = time.time()
    configs = [
        ([1], dict(eta=0.05, kappa=10, k_target=50, batch_size=4)),
        ([2, 2], dict(eta=0.02, kappa=8, k_target=80, batch_size=2)),
        ([2, 1, 1], dict(eta=0.03, kappa=6, k_target=120, batch_size=2,
                         barrier_mode="snapshot")),
    ]
    all_ok = True
    for peers, kw in configs:
        model, params, plan = tiny_plan(peers, seed=29)
        ds = data.make_dataset("mlp", model, 96, seed=29)
        cfg_a = TrainConfig(seed=29, **kw)
        cfg_b = TrainConfig(seed=29, **kw)
        ha = train(model, params.values, plan, cfg_a, ds).metrics_hash()
        hb = train(model, params.values, plan, cfg_b, ds).metrics_hash()
        all_ok = all_ok and (ha == hb)
    report(
        "criterion 9 (determinism)",
        all_ok,
        "3 distinct configs, identical metrics CSV hashes on repeat runs",
        time.time() - t0,
        None,
    )


def test_criterion_10_gradient_soundness():
    t0 = time.time()
    cases = [
        ([3, 1], "tanh", "mse"),          # plain linear regression
        ([4, 6, 2], "tanh", "mse"),
        ([4, 6, 2], "relu", "mse"),
        ([4, 5, 3], "tanh", "softmax_ce"),
        ([4, 5, 3], "relu", "softmax_ce"),
    ]
    worst = 0.0
    for case_idx, (arch, hidden, loss) in enumerate(cases):
        model, _ = build_model(arch, 5, hidden, loss)
        rng = np.random.Generator(np.random.Philox(key=4200 + case_idx))
        done = 0
        while done < 100:
            vals = rng.normal(0, 0.6, model.param_count)
            x = rng.normal(size=(3, model.in_dim))
            if loss == "softmax_ce":
                t = np.zeros((3, model.out_dim))
                t[np.arange(3), rng.integers(0, model.out_dim, 3)] = 1.0
            else:
                t = rng.normal(size=(3, model.out_dim))
            if hidden == "relu":
                sub = full_submodel(model)
                pv = ParameterVector(vals.copy(), modelcore._blocks_of(sub))
                _, ctx = modelcore.forward(sub, pv, x)
                if min(float(np.abs(z).min()) for z in ctx.preacts) < 1e-3:
                    continue  # FD is ill-defined arbitrarily close to the relu kink
            _, analytic = modelcore.full_gradient(model, vals, x, t)
            fd = oracle.fd_gradient(model, vals, x, t, h=1e-5)
            _, rel = oracle.gradient_errors(analytic, fd)
            worst = max(worst, rel)
            done += 1
    ok = worst <= 1e-4
    report(
        "criterion 10 (gradient soundness)",
        ok,
        f"5 layer/loss families x 100 points, worst rel err {worst:.2e} <= 1e-4",
        time.time() - t0,
        None,
    )
