import numpy as np
import pytest

from saps.coordinator.cost import Algorithm, CostModelInput, comm_cost, cost_table
from saps.coordinator.state import (
    CoordinatorState,
    apply_bandwidth_report,
    collect_final_model,
    default_b_thres,
    get_new_connected_graph,
    run_round,
)
from saps.core import symmetrize_bandwidth
from saps.errors import (
    DuplicateAcknowledgment,
    InvalidInput,
    ProtocolError,
    RoundMismatch,
    TransportError,
    UnexpectedMessage,
)
from saps.objectives import make_quadratic
from saps.transport.messages import RoundEnd
from saps.transport.sim import SimFleet, SimNetwork
from saps.worker.node import WorkerState


def _fleet(bandwidth, n_dims=8, c=1, gamma=0.1, seed=0):
    problem = make_quadratic(bandwidth.n, n_dims, np.random.default_rng(seed))
    workers = [
        WorkerState(rank, np.zeros(n_dims), gamma, c, problem.objectives[rank], np.random.default_rng(rank))
        for rank in range(bandwidth.n)
    ]
    return SimFleet(workers, SimNetwork(bandwidth))


def _state(bandwidth, n_dims=8, c=1, seed=0, **kw):
    return CoordinatorState(bandwidth, n_dims=n_dims, c=c, master_seed=seed, t_thres=10, **kw)


def _ack_all(state, plan):
    for rank in range(state.n):
        state.acknowledge(RoundEnd(plan.round, rank, 1.0))


# ---- B* ----
def test_b_star_threshold_zero_keeps_positive_links():
    b = symmetrize_bandwidth([[0, 2, 0], [2, 0, 1], [0, 1, 0]])
    assert get_new_connected_graph(b, 0).edge_list() == [(0, 1), (1, 2)]


def test_b_star_threshold_above_max_is_empty():
    b = symmetrize_bandwidth([[0, 2], [2, 0]])
    assert get_new_connected_graph(b, 3).edge_count() == 0


def test_b_star_single_edge():
    b = symmetrize_bandwidth([[0, 2], [2, 0]])
    assert get_new_connected_graph(b, 1).edge_list() == [(0, 1)]


def test_default_threshold_is_median():
    b = symmetrize_bandwidth([[0, 1, 3], [1, 0, 5], [3, 5, 0]])
    assert default_b_thres(b) == 3.0


# ---- Round lifecycle ----
def test_one_round_advances(complete_bandwidth):
    b = complete_bandwidth(2)
    state = _state(b)
    record = run_round(state, _fleet(b))
    assert state.t == 1
    assert record.round == 0
    assert record.pairs == 1


def test_ten_rounds_all_paired(complete_bandwidth):
    b = complete_bandwidth(4)
    state, fleet = _state(b), _fleet(b)
    records = [run_round(state, fleet) for _ in range(10)]
    assert [r.pairs for r in records] == [2] * 10
    # c = 1, N = 8: 2 pairs x 2 directions x 8 values x 8 bytes, over 4 workers x 2 (sent and received)
    assert all(r.bytes_per_worker == 128 for r in records)
    # 94-byte frames over 100 B/s links
    assert records[-1].cum_time == pytest.approx(10 * 0.94)
    assert state.timestamps.last_round.max() == 9


def test_final_model_bytes(complete_bandwidth):
    b = complete_bandwidth(4)
    state, fleet = _state(b, n_dims=8), _fleet(b, n_dims=8)
    model = collect_final_model(state, fleet)
    assert model.tolist() == [0.0] * 8
    assert state.model_bytes_received == 8 * 8 + 18


def test_duplicate_acknowledgment(complete_bandwidth):
    state = _state(complete_bandwidth(2))
    plan = state.begin_round()
    state.acknowledge(RoundEnd(plan.round, 0, 1.0))
    with pytest.raises(DuplicateAcknowledgment) as info:
        state.acknowledge(RoundEnd(plan.round, 0, 1.0))
    assert info.value.worker == 0


def test_wrong_round_names_worker(complete_bandwidth):
    state = _state(complete_bandwidth(2))
    state.begin_round()
    with pytest.raises(RoundMismatch) as info:
        state.acknowledge(RoundEnd(5, 1, 1.0))
    assert info.value.worker == 1


def test_acknowledgment_outside_round(complete_bandwidth):
    state = _state(complete_bandwidth(2))
    with pytest.raises(UnexpectedMessage):
        state.acknowledge(RoundEnd(0, 0, 1.0))


def test_barrier_needs_every_worker(complete_bandwidth):
    state = _state(complete_bandwidth(3))
    plan = state.begin_round()
    state.acknowledge(RoundEnd(plan.round, 0, 1.0))
    with pytest.raises(ProtocolError):
        state.complete_round()
    assert state.t == 0


def test_begin_twice(complete_bandwidth):
    state = _state(complete_bandwidth(2))
    state.begin_round()
    with pytest.raises(ProtocolError):
        state.begin_round()


def test_abort_leaves_round_and_timestamps(complete_bandwidth):
    state = _state(complete_bandwidth(4))
    before = state.timestamps.last_round.copy()
    state.begin_round()
    state.abort_round("peer lost")
    assert state.t == 0
    assert not state.in_round
    assert np.array_equal(state.timestamps.last_round, before)
    assert state.records == []


class _BrokenFleet:
    def execute_round(self, starts):
        raise TransportError("connection reset")

    def fetch_model(self, rank):
        raise TransportError("connection reset")

    def consensus_error(self):
        return None


def test_transport_failure_aborts(complete_bandwidth):
    state = _state(complete_bandwidth(4))
    with pytest.raises(TransportError):
        run_round(state, _BrokenFleet())
    assert state.t == 0
    assert not state.in_round


def test_seeds_follow_master_stream(complete_bandwidth):
    b = complete_bandwidth(2)
    a, c = _state(b, seed=42), _state(b, seed=42)
    for _ in range(3):
        plan_a, plan_c = a.begin_round(), c.begin_round()
        assert plan_a.seed == plan_c.seed
        assert all(s.seed == plan_a.seed for s in plan_a.starts.values())
        _ack_all(a, plan_a)
        _ack_all(c, plan_c)
        a.complete_round()
        c.complete_round()


# ---- Bandwidth reports ----
def test_report_resymmetrizes_by_min():
    raw = np.full((3, 3), 10.0)
    raw, b = apply_bandwidth_report(raw, 0, [(1, 4.0)])
    assert raw[0, 1] == 4.0 and raw[1, 0] == 10.0
    assert b[0, 1] == b[1, 0] == 4.0


@pytest.mark.parametrize("entries", [[(0, 1.0)], [(5, 1.0)], [(1, -2.0)], [(1, float("nan"))]])
def test_report_rejects(entries):
    with pytest.raises(InvalidInput):
        apply_bandwidth_report(np.full((3, 3), 1.0), 0, entries)


def test_report_during_round_is_deferred(complete_bandwidth):
    state = _state(complete_bandwidth(4))
    b_star = state.b_star.edges.copy()
    plan = state.begin_round()
    state.apply_bandwidth_report(0, [(1, 1.0)])
    assert state.bandwidth[0, 1] == 100.0
    _ack_all(state, plan)
    state.complete_round()
    assert state.bandwidth[0, 1] == 1.0
    assert state.generator.bandwidth[0, 1] == 1.0
    assert np.array_equal(state.b_star.edges, b_star)


def test_bad_deferred_report_is_dropped(complete_bandwidth):
    state = _state(complete_bandwidth(4))
    plan = state.begin_round()
    state.apply_bandwidth_report(0, [(9, 1.0)])
    _ack_all(state, plan)
    state.complete_round()
    assert state.t == 1


def test_needs_two_workers():
    with pytest.raises(InvalidInput):
        _state(symmetrize_bandwidth([[0.0]]))


# ---- Cost model ----
@pytest.mark.parametrize(
    "algo, kw, expected",
    [
        (Algorithm.SAPS_PSGD, {"c": 10}, (100, 200)),
        (Algorithm.PS_PSGD, {}, (16000, 2000)),
        (Algorithm.D_PSGD, {"n_p": 2}, (100, 8000)),
        (Algorithm.ALLREDUCE_PSGD, {}, (0, 2000)),
        (Algorithm.FEDAVG, {}, (16000, 2000)),
    ],
)
def test_cost_spot_values(algo, kw, expected):
    assert comm_cost(CostModelInput(algorithm=algo, N=100, n=8, T=10, **kw)) == pytest.approx(expected)


@pytest.mark.parametrize("algo", [Algorithm.D_PSGD, Algorithm.DCD_PSGD])
def test_neighbor_count_required(algo):
    with pytest.raises(InvalidInput):
        comm_cost(CostModelInput(algorithm=algo, N=100, n=8, T=10))


def test_cost_input_validation():
    with pytest.raises(ValueError):
        CostModelInput(algorithm=Algorithm.SAPS_PSGD, N=0, n=8, T=10)
    with pytest.raises(ValueError):
        CostModelInput(algorithm=Algorithm.SAPS_PSGD, N=10, n=8, T=10, c=0.5)


def test_cost_table_covers_every_algorithm():
    table = cost_table(100, 8, 10, 10)
    assert set(table) == {a.value for a in Algorithm}
    assert table["saps-psgd"]["robust"] is True
    assert table["ps-psgd"]["sparsification"] is False
