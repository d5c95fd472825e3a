import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ravnest import oracle
from ravnest.errors import ConfigError, LayoutError, ProtocolError, StallError
from ravnest.multiring import (
    ParamRange,
    allreduce_cost,
    apply_ring_mean,
    build_ring_schedule,
    bytes_per_member,
    chunk_bounds,
    decode_frame,
    encode_frame,
    random_instance,
    run_allreduce,
    validate_schedule,
)


def layouts_from_sizes(sizes_by_cluster: dict[int, list[int]]):
    out = {}
    for cid, sizes in sizes_by_cluster.items():
        start = 0
        ranges = []
        for s in sizes:
            ranges.append(ParamRange(start, s))
            start += s
        out[cid] = ranges
    return out


class TestBuildSchedule:
    def test_identical_two_peer_layouts(self):
        layouts = layouts_from_sizes({0: [10, 6], 1: [10, 6]})
        sched = build_ring_schedule(layouts)
        assert len(sched.rings) == 2
        assert sched.rings[0].members == ((0, 0), (1, 0))
        assert sched.rings[1].members == ((0, 1), (1, 1))
        validate_schedule(sched, layouts)

    def test_one_big_peer_joins_both_rings(self):
        layouts = layouts_from_sizes({0: [8, 8], 1: [16]})
        sched = build_ring_schedule(layouts)
        assert len(sched.rings) == 2
        assert sched.rings[0].members == ((0, 0), (1, 0))
        assert sched.rings[1].members == ((0, 1), (1, 0))  # same peer twice

    def test_three_clusters_nested_three_two_one(self):
        layouts = layouts_from_sizes({0: [4, 4, 4], 1: [8, 4], 2: [12]})
        sched = build_ring_schedule(layouts)
        assert len(sched.rings) == 3
        for ring in sched.rings:
            assert len(ring.members) == 3
        validate_schedule(sched, layouts)

    def test_mismatched_totals_rejected(self):
        layouts = layouts_from_sizes({0: [10], 1: [12]})
        with pytest.raises(LayoutError, match="different totals"):
            build_ring_schedule(layouts)

    def test_non_nested_boundaries_rejected(self):
        layouts = layouts_from_sizes({0: [4, 8], 1: [8, 4]})
        with pytest.raises(LayoutError, match="nest"):
            build_ring_schedule(layouts)

    def test_dump_one_record_per_ring(self):
        layouts = layouts_from_sizes({0: [8, 8], 1: [16]})
        sched = build_ring_schedule(layouts)
        lines = sched.dump().splitlines()
        assert lines[1] == "ring_id=0,start=0,len=8,members=[(0,0),(1,0)]"
        assert lines[2] == "ring_id=1,start=8,len=8,members=[(0,1),(1,0)]"

    @given(st.integers(0, 100_000), st.integers(2, 6))
    @settings(max_examples=60, deadline=None)
    def test_random_instances_tile_and_count(self, seed, n_clusters):
        rng = np.random.Generator(np.random.Philox(key=seed))
        inst = random_instance(rng, n_clusters)
        sched = inst.schedule
        cursor = 0
        for ring in sched.rings:
            assert ring.start == cursor
            cursor += ring.length
        assert cursor == sched.total_params
        assert len(sched.rings) == max(len(l) for l in inst.layouts.values())
        validate_schedule(sched, inst.layouts)


class TestChunks:
    def test_remainder_spread_to_low_indices(self):
        assert chunk_bounds(0, 10, 3) == [(0, 4), (4, 7), (7, 10)]

    def test_zero_length_chunks_allowed(self):
        bounds = chunk_bounds(5, 2, 4)
        assert bounds == [(5, 6), (6, 7), (7, 7), (7, 7)]


class TestRunAllReduce:
    def test_identical_vectors_fixed_point(self):
        layouts = layouts_from_sizes({0: [6], 1: [6]})
        sched = build_ring_schedule(layouts)
        v = np.arange(6.0)
        out, _ = run_allreduce(sched, {0: v.copy(), 1: v.copy()})
        np.testing.assert_array_equal(out[0], v)
        np.testing.assert_array_equal(out[1], v)

    def test_two_cluster_mean(self):
        layouts = layouts_from_sizes({0: [2], 1: [2]})
        sched = build_ring_schedule(layouts)
        out, stats = run_allreduce(sched, {0: np.array([2.0, 4.0]), 1: np.array([4.0, 8.0])})
        np.testing.assert_array_equal(out[0], [3.0, 6.0])
        np.testing.assert_array_equal(out[1], [3.0, 6.0])
        assert stats[0].rounds == 2  # 2(C-1) with C=2

    def test_four_clusters_random_vs_oracle(self):
        rng = np.random.Generator(np.random.Philox(key=5))
        layouts = layouts_from_sizes({c: [32, 16, 16] for c in range(4)})
        sched = build_ring_schedule(layouts)
        vals = {c: rng.normal(0, 5, 64) for c in range(4)}
        out, stats = run_allreduce(sched, vals)
        want = oracle.mean_reference([vals[c] for c in range(4)])
        for c in range(4):
            err = np.abs(out[c] - want) / np.maximum(np.abs(want), 1.0)
            assert err.max() <= 1e-12
        assert all(s.rounds == 2 * (4 - 1) for s in stats)

    def test_round_count_exact(self):
        for c in (2, 3, 5):
            layouts = layouts_from_sizes({cid: [12] for cid in range(c)})
            sched = build_ring_schedule(layouts)
            _, stats = run_allreduce(sched, {cid: np.ones(12) for cid in range(c)})
            assert stats[0].rounds == 2 * (c - 1)

    def test_idempotent_within_tolerance(self):
        rng = np.random.Generator(np.random.Philox(key=9))
        layouts = layouts_from_sizes({c: [20] for c in range(3)})
        sched = build_ring_schedule(layouts)
        vals = {c: rng.normal(size=20) for c in range(3)}
        once, _ = run_allreduce(sched, vals)
        twice, _ = run_allreduce(sched, once)
        for c in range(3):
            err = np.abs(twice[c] - once[c]) / np.maximum(np.abs(once[c]), 1.0)
            assert err.max() <= 1e-12

    def test_single_cluster_rejected(self):
        layouts = layouts_from_sizes({0: [4]})
        sched = build_ring_schedule(layouts)
        with pytest.raises(ConfigError):
            run_allreduce(sched, {0: np.ones(4)})

    def test_length_mismatch_rejected(self):
        layouts = layouts_from_sizes({0: [4], 1: [4]})
        sched = build_ring_schedule(layouts)
        with pytest.raises(LayoutError):
            run_allreduce(sched, {0: np.ones(4), 1: np.ones(5)})

    def test_stall_names_ring_round_member(self):
        layouts = layouts_from_sizes({0: [4], 1: [4]})
        sched = build_ring_schedule(layouts)
        with pytest.raises(StallError, match=r"ring=0, round=\d+, member=\(1, 0\)"):
            run_allreduce(sched, {0: np.ones(4), 1: np.ones(4)}, max_events=1)

    def test_apply_ring_mean_matches_event_version_bitwise(self):
        rng = np.random.Generator(np.random.Philox(key=31))
        inst = random_instance(rng, 4, max_peers=3, max_dim=200)
        evented, _ = run_allreduce(inst.schedule, inst.cluster_values)
        direct = apply_ring_mean(inst.schedule, inst.cluster_values)
        for cid in evented:
            assert np.array_equal(evented[cid], direct[cid])

    def test_exact_mean_over_slow_heterogeneous_network(self):
        # rounds self-clock per ring, so latency and bandwidth contention may
        # reorder traffic between rings but never change the arithmetic
        from ravnest.simnet import Network, NodeSpec

        rng = np.random.Generator(np.random.Philox(key=55))
        inst = random_instance(rng, 4, max_peers=3, max_dim=300)
        nodes = {}
        for ring in inst.schedule.rings:
            for member in ring.members:
                name = f"c{member[0]}.p{member[1]}"
                nodes[name] = NodeSpec(name, 1.0, float(rng.uniform(1e4, 1e6)))
        net = Network(nodes, default_latency=0.003)
        ideal, _ = run_allreduce(inst.schedule, inst.cluster_values)

        ctl_holder = {}

        def handler(msg, now):
            ctl_holder["ctl"].handle(msg, now)

        for name in nodes:
            net.register(name, handler)
        from ravnest.multiring import AllReduceController, default_node_name

        working = {c: v.copy() for c, v in inst.cluster_values.items()}
        ctl = AllReduceController(inst.schedule, working, net, default_node_name)
        ctl_holder["ctl"] = ctl
        ctl.kickoff(0.0)
        net.run_until(max_events=100_000)
        assert ctl.done()
        assert net.now > 0.003  # latency actually shaped the schedule
        for c in working:
            assert np.array_equal(working[c], ideal[c])

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_exact_mean_property(self, seed):
        rng = np.random.Generator(np.random.Philox(key=seed))
        n_clusters = int(rng.integers(2, 7))
        inst = random_instance(rng, n_clusters, max_dim=512)
        out, stats = run_allreduce(inst.schedule, inst.cluster_values)
        want = np.mean([inst.cluster_values[c] for c in sorted(inst.cluster_values)], axis=0)
        for c in out:
            err = np.abs(out[c] - want) / np.maximum(np.abs(want), 1.0)
            assert err.max() <= 1e-12
        assert all(s.rounds == 2 * (n_clusters - 1) for s in stats)


class TestCost:
    def test_three_clusters_four_rounds(self):
        layouts = layouts_from_sizes({c: [30] for c in range(3)})
        sched = build_ring_schedule(layouts)
        report = allreduce_cost(sched, bandwidth=1e6)
        assert report.rings[0].rounds == 4

    def test_bytes_per_member_formula(self):
        rng = np.random.Generator(np.random.Philox(key=2))
        for _ in range(20):
            c = int(rng.integers(2, 8))
            s = float(rng.integers(1, 10**7))
            assert bytes_per_member(c, s) == pytest.approx(2 * (c - 1) * s / c, rel=1e-15)

    def test_two_equal_rings_halve_critical_path(self):
        layouts = layouts_from_sizes({c: [512, 512] for c in range(3)})
        sched = build_ring_schedule(layouts)
        report = allreduce_cost(sched, bandwidth=1e6, latency=0.0)
        assert report.critical_ratio == pytest.approx(0.5, rel=1e-12)

    def test_ring_seconds_scale_with_bytes(self):
        layouts = layouts_from_sizes({c: [100, 300] for c in range(2)})
        sched = build_ring_schedule(layouts)
        report = allreduce_cost(sched, bandwidth=1e6)
        assert report.rings[1].seconds == pytest.approx(3 * report.rings[0].seconds, rel=1e-12)


class TestWireFraming:
    def test_round_trip_bit_exact(self):
        payload = np.array([1.5, -2.25, 3.875])
        buf = encode_frame("ring_chunk", 7, 3, 160, payload)
        kind, ring_id, rnd, off, got, consumed = decode_frame(buf)
        assert (kind, ring_id, rnd, off) == ("ring_chunk", 7, 3, 160)
        assert consumed == len(buf)
        assert got.tobytes() == payload.astype("<f8").tobytes()

    def test_golden_header_bytes(self):
        buf = encode_frame("ring_chunk", 1, 2, 3, np.array([1.0]))
        # length = 1 + 4 + 4 + 8 + 8 = 25, little-endian
        assert buf[:4] == (25).to_bytes(4, "little")
        assert buf[4] == 3  # ring_chunk kind code
        assert buf[5:9] == (1).to_bytes(4, "little")
        assert buf[9:13] == (2).to_bytes(4, "little")
        assert buf[13:21] == (3).to_bytes(8, "little")
        assert buf[21:] == np.array([1.0]).astype("<f8").tobytes()

    def test_truncated_frame_rejected(self):
        buf = encode_frame("control", 0, 0, 0, np.zeros(2))
        with pytest.raises(ProtocolError, match="truncated"):
            decode_frame(buf[:10])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ProtocolError):
            encode_frame("nonsense", 0, 0, 0, np.zeros(1))
