import numpy as np
import pytest

from saps.errors import NumericalError, ProtocolError, RoundMismatch, UnexpectedMessage
from saps.objectives import QuadraticObjective
from saps.sparsify import SparsePayload, extract_payload, generate_mask
from saps.transport.messages import RoundStart
from saps.worker.node import (
    WorkerState,
    begin_worker_round,
    finish_worker_round,
    local_sgd_step,
    run_worker_round,
)


def _worker(rank=0, x=(1.0,), target=(0.0,), gamma=0.5, c=1):
    return WorkerState(
        rank=rank,
        x=np.asarray(x, dtype=float),
        gamma=gamma,
        c=c,
        objective=QuadraticObjective(np.asarray(target, dtype=float)),
        rng=np.random.default_rng(rank),
    )


def test_single_sgd_step():
    x, loss = local_sgd_step(_worker())
    assert x.tolist() == [0.5]
    assert loss == pytest.approx(0.5)


def test_self_loop_round_only_trains():
    w = _worker()
    end = run_worker_round(w, RoundStart(round=0, seed=1, peer_id=None), exchange=None)
    assert w.x.tolist() == [0.5]
    assert w.round == 1
    assert end.round == 0 and end.worker_id == 0
    assert end.local_loss == pytest.approx(0.5)


def test_paired_round_averages_after_sgd():
    a = _worker(rank=0, x=(2.0, 4.0), target=(0.0, 0.0))
    b = _worker(rank=1, x=(0.0, 0.0), target=(0.0, 0.0))
    start_a = RoundStart(round=0, seed=3, peer_id=1)
    start_b = RoundStart(round=0, seed=3, peer_id=0)
    pa, pb = begin_worker_round(a, start_a), begin_worker_round(b, start_b)
    finish_worker_round(a, pa, pb.outgoing)
    finish_worker_round(b, pb, pa.outgoing)
    # after SGD a = (1, 2), b = (0, 0); c = 1 averages every coordinate
    assert a.x.tolist() == [0.5, 1.0]
    assert b.x.tolist() == [0.5, 1.0]
    assert a.values_sent == a.values_received == 2


def test_sparse_round_touches_only_masked_coordinates():
    n_dims, c, seed = 40, 4, 77
    a = _worker(rank=0, x=np.ones(n_dims), target=np.ones(n_dims), c=c)
    b = _worker(rank=1, x=-np.ones(n_dims), target=-np.ones(n_dims), c=c)
    pa = begin_worker_round(a, RoundStart(0, seed, 1))
    pb = begin_worker_round(b, RoundStart(0, seed, 0))
    finish_worker_round(a, pa, pb.outgoing)
    mask = generate_mask(seed, c, n_dims).bits
    assert np.all(a.x[mask] == 0.0)
    assert np.all(a.x[~mask] == 1.0)


def test_round_mismatch():
    with pytest.raises(RoundMismatch):
        begin_worker_round(_worker(), RoundStart(round=3, seed=0, peer_id=None))


def test_payload_from_wrong_peer():
    w = _worker(rank=0)
    pending = begin_worker_round(w, RoundStart(0, 5, 1))
    stray = extract_payload(np.zeros(1), pending.mask, 0, 2)
    with pytest.raises(UnexpectedMessage):
        finish_worker_round(w, pending, stray)


def test_missing_peer_payload():
    w = _worker(rank=0)
    pending = begin_worker_round(w, RoundStart(0, 5, 1))
    with pytest.raises(ProtocolError):
        finish_worker_round(w, pending, None)


def test_payload_in_self_loop_round():
    w = _worker(rank=0)
    pending = begin_worker_round(w, RoundStart(0, 5, None))
    with pytest.raises(UnexpectedMessage):
        finish_worker_round(w, pending, SparsePayload(0, 1, np.zeros(1)))


def test_divergence_is_reported():
    w = _worker(x=(1e308,), target=(-1e308,), gamma=1e10)
    with pytest.raises(NumericalError) as info:
        local_sgd_step(w)
    assert info.value.rank == 0
