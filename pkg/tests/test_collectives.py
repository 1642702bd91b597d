from fractions import Fraction

import numpy as np
import pytest

from shardsim.collectives import (
    CollectiveError,
    CollectiveFabric,
    DeadlockError,
    RankTask,
    build_plan,
    hybrid_reduce_task,
    predicted_cross_host_traffic,
    run_round_robin,
    run_symmetric,
    run_threaded,
    traffic_report,
)


def fabric_for(w, f, host_size=None, deterministic=True):
    return CollectiveFabric(build_plan(w, f, host_size=host_size),
                            deterministic=deterministic)


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def test_plan_groups_consecutive_and_strided():
    plan = build_plan(8, 4)
    assert plan.sharded_groups == [(0, 1, 2, 3), (4, 5, 6, 7)]
    assert plan.replicated_groups == [(0, 4), (1, 5), (2, 6), (3, 7)]
    assert plan.strategy == "hybrid"
    assert build_plan(8, 8).strategy == "full"
    assert build_plan(8, 1).strategy == "replicate"


def test_plan_group_membership_is_a_partition():
    for w in (1, 2, 4, 6, 8, 12):
        for f in range(1, w + 1):
            if w % f:
                continue
            plan = build_plan(w, f)
            seen_s = [r for g in plan.sharded_groups for r in g]
            seen_r = [r for g in plan.replicated_groups for r in g]
            assert sorted(seen_s) == list(range(w))
            assert sorted(seen_r) == list(range(w))
            for r in range(w):
                assert r in plan.sharded_group_of(r)
                assert r in plan.replicated_group_of(r)
                assert plan.sharded_group_of(r) == plan.sharded_groups[r // f]
                assert plan.replicated_group_of(r) == \
                    plan.replicated_groups[r % f]


def test_plan_rejects_non_divisors():
    with pytest.raises(Exception):
        build_plan(4, 3)
    with pytest.raises(Exception):
        build_plan(4, 2, host_size=3)


# ---------------------------------------------------------------------------
# collective values
# ---------------------------------------------------------------------------

def test_all_gather_concatenates_in_rank_order():
    fab = fabric_for(4, 4)

    def worker(rank):
        out = yield fab.all_gather_begin(rank, range(4),
                                         np.full(3, float(rank)))
        return out

    results = run_symmetric(fab, worker)
    expect = np.concatenate([np.full(3, float(r)) for r in range(4)])
    for r in range(4):
        assert np.array_equal(results[r], expect)


def test_reduce_scatter_sums_then_splits():
    fab = fabric_for(4, 4)
    rng = np.random.default_rng(0)
    inputs = {r: rng.integers(-5, 6, size=8).astype(float) for r in range(4)}

    def worker(rank):
        out = yield fab.reduce_scatter_begin(rank, range(4), inputs[rank])
        return out

    results = run_symmetric(fab, worker)
    total = sum(inputs[r] for r in range(4))
    for r in range(4):
        assert np.array_equal(results[r], total[r * 2:(r + 1) * 2])


def test_all_reduce_sums_everywhere():
    fab = fabric_for(3, 1, host_size=1)

    def worker(rank):
        out = yield fab.all_reduce_begin(rank, range(3),
                                         np.arange(4.0) * (rank + 1))
        return out

    results = run_symmetric(fab, worker)
    expect = np.arange(4.0) * 6
    for r in range(3):
        assert np.array_equal(results[r], expect)


def test_deterministic_reduction_is_ascending_rank_order():
    # With floats, ((a0+a1)+a2) differs from other orders; pin the exact one.
    vals = {0: np.array([1e16]), 1: np.array([1.0]), 2: np.array([-1e16])}
    fab = fabric_for(3, 1, host_size=1)

    def worker(rank):
        out = yield fab.all_reduce_begin(rank, range(3), vals[rank])
        return out

    results = run_symmetric(fab, worker)
    expect = ((np.zeros(1) + vals[0]) + vals[1]) + vals[2]
    assert np.array_equal(results[0], expect)   # == [0.0], not [1.0]


def test_kth_call_pairs_with_kth_call():
    fab = fabric_for(2, 2)

    def worker(rank):
        first = yield fab.all_gather_begin(rank, (0, 1),
                                           np.array([float(rank)]))
        second = yield fab.all_gather_begin(rank, (0, 1),
                                           np.array([10.0 + rank]))
        return first, second

    results = run_symmetric(fab, worker)
    for r in range(2):
        assert np.array_equal(results[r][0], [0.0, 1.0])
        assert np.array_equal(results[r][1], [10.0, 11.0])


def test_entry_validation():
    fab = fabric_for(2, 2)
    with pytest.raises(CollectiveError):
        fab.all_gather_begin(3, (0, 1), np.zeros(2))      # not a member
    with pytest.raises(CollectiveError):
        fab.all_gather_begin(0, (0, 1), np.zeros((2, 2)))  # not flat
    with pytest.raises(CollectiveError):
        fab.reduce_scatter_begin(0, (0, 1), np.zeros(3))   # 3 % 2 != 0


def test_mismatched_kind_and_uneven_lengths_rejected():
    fab = fabric_for(2, 2)
    fab.all_gather_begin(0, (0, 1), np.zeros(2))
    with pytest.raises(CollectiveError):
        fab.reduce_scatter_begin(1, (0, 1), np.zeros(2))

    fab2 = fabric_for(2, 2)
    fab2.all_gather_begin(0, (0, 1), np.zeros(2))
    with pytest.raises(CollectiveError):
        fab2.all_gather_begin(1, (0, 1), np.zeros(3))


def test_deadlock_detection():
    fab = fabric_for(2, 2)

    def worker(rank):
        if rank == 0:
            out = yield fab.all_gather_begin(rank, (0,), np.zeros(1))
        else:
            out = yield fab.all_gather_begin(rank, (0, 1), np.zeros(1))
        return out

    # rank 0's singleton resolves immediately; rank 1 waits forever on rank 0
    with pytest.raises(DeadlockError):
        run_round_robin([RankTask(r, worker(r)) for r in range(2)])


def test_misorder_fault_rotates_reduce_scatter_chunks():
    fab = fabric_for(2, 2)
    fab.misorder_reduce_scatter = True

    def worker(rank):
        out = yield fab.reduce_scatter_begin(rank, (0, 1),
                                             np.array([1.0, 2.0]))
        return out

    results = run_symmetric(fab, worker)
    # totals are [2, 4]; rank 0 should get [2] but the fault hands it [4]
    assert np.array_equal(results[0], [4.0])
    assert np.array_equal(results[1], [2.0])


def test_threaded_driver_matches_round_robin():
    def run(threaded):
        fab = fabric_for(4, 4)

        def worker(rank):
            g = yield fab.all_gather_begin(rank, range(4),
                                           np.array([float(rank)] * 2))
            s = yield fab.reduce_scatter_begin(rank, range(4), g * 2.0)
            return s

        return run_symmetric(fab, worker, threaded=threaded)

    a, b = run(False), run(True)
    for r in range(4):
        assert np.array_equal(a[r], b[r])


# ---------------------------------------------------------------------------
# traffic accounting
# ---------------------------------------------------------------------------

def test_ring_volume_accounting_exact():
    fab = fabric_for(4, 4)   # one host: everything intra

    def worker(rank):
        yield fab.all_gather_begin(rank, range(4), np.zeros(3))
        yield fab.all_reduce_begin(rank, range(4), np.zeros(12))
        return None

    run_symmetric(fab, worker)
    for r in range(4):
        ag = fab.traffic[r].counts[("AG", "intra")]
        ar = fab.traffic[r].counts[("AR", "intra")]
        assert ag == Fraction(12 * 3, 4)       # content 12, (n-1)/n = 3/4
        assert ar == Fraction(2 * 12 * 3, 4)   # all-reduce moves twice


def test_singleton_group_moves_nothing():
    fab = fabric_for(2, 1, host_size=1)
    fab.all_gather_begin(0, (0,), np.zeros(5))
    assert fab.traffic[0].total() == 0


def test_spanning_group_counts_as_cross_host():
    fab = fabric_for(4, 4, host_size=2)

    def worker(rank):
        yield fab.all_gather_begin(rank, range(4), np.zeros(3))
        return None

    run_symmetric(fab, worker)
    for r in range(4):
        assert fab.traffic[r].total("cross") == Fraction(9)
        assert fab.traffic[r].total("intra") == 0


def test_subset_all_reduce_uses_hybrid_cross_formula():
    # replicated-group AR in a hybrid plan: pre-reduced within hosts
    plan = build_plan(4, 2, host_size=2)
    fab = CollectiveFabric(plan)

    def worker(rank):
        yield fab.all_reduce_begin(rank, plan.replicated_group_of(rank),
                                   np.zeros(6))
        return None

    run_symmetric(fab, worker)
    expect = Fraction(2 * 6 * 2 * 3, 2 * 4)  # 2*B*F*(W-1)/(G*W)
    for r in range(4):
        assert fab.traffic[r].total("cross") == expect


def test_traffic_report_requires_an_iteration():
    fab = fabric_for(2, 2)
    with pytest.raises(RuntimeError):
        traffic_report(fab, fab.plan, model_elements=10)


def test_predicted_cross_host_traffic_closed_forms():
    m = 96
    assert predicted_cross_host_traffic(
        build_plan(16, 1, host_size=2), m) == Fraction(2 * m * 15, 16)
    assert predicted_cross_host_traffic(
        build_plan(16, 16, host_size=2), m) == Fraction(3 * m * 15, 16)
    hybrid = build_plan(16, 2, host_size=2)    # F = W/G with G=8 hosts
    assert predicted_cross_host_traffic(hybrid, m) == Fraction(2 * m * 15,
                                                               8 * 16)
    assert predicted_cross_host_traffic(build_plan(1, 1), m) == 0


# ---------------------------------------------------------------------------
# hybrid reduction decomposition
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("w,f", [(w, f) for w in (1, 2, 3, 4, 5, 6, 7, 8)
                                 for f in range(1, w + 1) if w % f == 0])
def test_hybrid_reduce_equals_global_sum_shard(w, f):
    """RS within the sharded group then AR across the replicated group must
    hand every rank exactly its shard of the sum over all W gradients."""
    plan = build_plan(w, f)
    fab = CollectiveFabric(plan)
    psi = 4 * f  # divisible by any subgroup size
    rng = np.random.default_rng(w * 100 + f)
    grads = {r: rng.integers(-4, 5, size=psi).astype(float)
             for r in range(w)}

    results = run_symmetric(
        fab, lambda rank: hybrid_reduce_task(fab, rank, grads[rank]))

    total = sum(grads[r] for r in range(w))
    block = psi // f
    for r in range(w):
        idx = r % f
        assert np.array_equal(results[r],
                              total[idx * block:(idx + 1) * block]), (w, f, r)


def test_run_threaded_surfaces_worker_errors():
    fab = fabric_for(2, 2)

    def worker(rank):
        if rank == 1:
            raise ValueError("boom")
        out = yield fab.all_gather_begin(rank, (0,), np.zeros(1))
        return out

    with pytest.raises(ValueError):
        run_threaded([RankTask(r, worker(r)) for r in range(2)], fab)
