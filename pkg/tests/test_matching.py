import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saps.coordinator.state import default_b_thres, get_new_connected_graph
from saps.core import AdjacencyMatrix, Matching, TimestampMatrix, symmetrize_bandwidth
from saps.errors import InvalidInput
from saps.experiment import exhaustive_matching_size
from saps.matching import (
    GossipGenerator,
    PeerSelection,
    find_connected_subgraphs,
    generate_gossip_matrix,
    get_over_time_matrix,
    get_unmatch,
    if_connected,
    max_matching,
    randomly_max_match,
    ring_matching,
)


def _cycle(n):
    return AdjacencyMatrix.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def _is_matching(g, m):
    used = [v for p in m.pairs for v in p]
    return len(used) == len(set(used)) and all(g.has_edge(i, j) for i, j in m.pairs)


# ---- Maximum matching ----
def test_complete_four_is_perfect():
    m = max_matching(AdjacencyMatrix.complete(4))
    assert len(m) == 2
    assert not m.unmatched


def test_path_of_three():
    m = max_matching(AdjacencyMatrix.from_edges(3, [(0, 1), (1, 2)]))
    assert len(m) == 1
    assert len(m.unmatched) == 1


def test_five_cycle():
    assert len(max_matching(_cycle(5))) == 2


def test_blossom_needs_contraction():
    # triangle with a pendant on each corner: greedy can stall at 2
    g = AdjacencyMatrix.from_edges(6, [(0, 1), (1, 2), (2, 0), (0, 3), (1, 4), (2, 5)])
    for order in itertools.permutations(range(6)):
        assert len(max_matching(g, order=order)) == 3


def test_order_must_be_permutation():
    with pytest.raises(InvalidInput):
        max_matching(AdjacencyMatrix.complete(3), order=[0, 0, 1])


@given(st.integers(min_value=2, max_value=9), st.floats(min_value=0.1, max_value=0.9), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=60, deadline=None)
def test_matches_exhaustive_search(n, density, seed):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < density, k=1)
    g = AdjacencyMatrix(upper | upper.T)
    m = randomly_max_match(g, rng)
    assert _is_matching(g, m)
    assert len(m) == exhaustive_matching_size(g)


def test_random_matching_on_four_cycle_is_unbiased():
    rng = np.random.default_rng(0)
    g = _cycle(4)
    seen = Counter(tuple(randomly_max_match(g, rng).sorted_pairs()) for _ in range(10_000))
    assert set(seen) == {((0, 1), (2, 3)), ((0, 3), (1, 2))}
    for count in seen.values():
        assert 0.4 <= count / 10_000 <= 0.6


def test_single_edge_always_chosen():
    rng = np.random.default_rng(1)
    g = AdjacencyMatrix.from_edges(3, [(0, 2)])
    assert all(randomly_max_match(g, rng).sorted_pairs() == [(0, 2)] for _ in range(20))


def test_empty_graph_leaves_everyone_unmatched():
    m = randomly_max_match(AdjacencyMatrix.empty(4), np.random.default_rng(0))
    assert len(m) == 0
    assert m.unmatched == {0, 1, 2, 3}


# ---- Connectivity ----
def test_components():
    g = AdjacencyMatrix.from_edges(5, [(0, 3), (1, 4)])
    assert find_connected_subgraphs(g) == [[0, 3], [1, 4], [2]]


def test_if_connected_all_fresh():
    n = 4
    r = TimestampMatrix(np.full((n, n), 7, dtype=np.int64))
    assert if_connected(r, 10, 7)


def test_if_connected_initial():
    assert not if_connected(TimestampMatrix.initial(4, 10), 10, 0)


def test_if_connected_two_fresh_components():
    r = TimestampMatrix.initial(4, 10).with_matched(Matching.from_pairs(4, [(0, 1), (2, 3)]), 5)
    assert not if_connected(r, 10, 6)


def test_over_time_matrix_cross_edges_only():
    r = TimestampMatrix.initial(4, 10).with_matched(Matching.from_pairs(4, [(0, 1), (2, 3)]), 5)
    e = get_over_time_matrix(r, AdjacencyMatrix.complete(4), 10, 6)
    assert e.edge_list() == [(0, 2), (0, 3), (1, 2), (1, 3)]


def test_over_time_matrix_singletons():
    available = AdjacencyMatrix.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    e = get_over_time_matrix(TimestampMatrix.initial(4, 10), available, 10, 0)
    assert e.edge_list() == available.edge_list()


def test_get_unmatch():
    b = symmetrize_bandwidth(np.full((4, 4), 5.0))
    assert get_unmatch(b, Matching.from_pairs(4, [(0, 1), (2, 3)])).edge_count() == 0
    assert get_unmatch(b, Matching.from_pairs(4, [(0, 1)])).edge_list() == [(2, 3)]


def test_get_unmatch_single_free_worker():
    b = symmetrize_bandwidth(np.full((3, 3), 5.0))
    assert get_unmatch(b, Matching.from_pairs(3, [(0, 1)])).edge_count() == 0


# ---- Gossip generation ----
def test_two_workers_forced_match():
    b = symmetrize_bandwidth([[0, 1], [1, 0]])
    w, m = generate_gossip_matrix(b, AdjacencyMatrix.complete(2), TimestampMatrix.initial(2, 10), 10, 2, 0,
                                  np.random.default_rng(0))
    assert m.sorted_pairs() == [(0, 1)]
    assert w.weights.tolist() == [[0.5, 0.5], [0.5, 0.5]]


def test_even_complete_all_matched(complete_bandwidth):
    b = complete_bandwidth(4)
    gen = GossipGenerator(b, AdjacencyMatrix.complete(4), 10, np.random.default_rng(3))
    for t in range(10):
        out = gen.next_round(t)
        assert len(out.matching) == 2
        assert not out.matching.unmatched


def test_odd_complete_one_self_loop(complete_bandwidth):
    b = complete_bandwidth(3)
    w, m = generate_gossip_matrix(b, AdjacencyMatrix.complete(3), TimestampMatrix.initial(3, 10), 10, 3, 0,
                                  np.random.default_rng(0))
    assert len(m) == 1 and len(m.unmatched) == 1
    (loner,) = m.unmatched
    assert w.weights[loner, loner] == 1.0
    assert w.check() == []


def test_generate_rejects_single_worker():
    b = symmetrize_bandwidth([[0.0]])
    with pytest.raises(InvalidInput):
        generate_gossip_matrix(b, AdjacencyMatrix.empty(1), TimestampMatrix.initial(1, 10), 10, 1, 0,
                               np.random.default_rng(0))


def test_fallback_matches_leftover_workers():
    # B* is a star, so only one pair comes from B*; the rest come from B
    n = 6
    b = symmetrize_bandwidth(np.full((n, n), 1.0))
    b_star = AdjacencyMatrix.from_edges(n, [(0, k) for k in range(1, n)])
    r = TimestampMatrix(np.full((n, n), 100, dtype=np.int64))
    gen = GossipGenerator(b, b_star, 10, np.random.default_rng(0))
    gen.timestamps = r
    out = gen.propose(100)
    assert not out.bridged
    assert out.fallback_pairs == 2
    assert len(out.matching) == 3


def test_disconnected_rc_graph_bridges():
    n = 4
    b = symmetrize_bandwidth(np.full((n, n), 1.0))
    gen = GossipGenerator(b, AdjacencyMatrix.complete(n), 10, np.random.default_rng(0))
    out = gen.propose(0)
    assert out.bridged


def test_propose_does_not_touch_timestamps(complete_bandwidth):
    gen = GossipGenerator(complete_bandwidth(4), AdjacencyMatrix.complete(4), 10, np.random.default_rng(0))
    before = gen.timestamps.last_round.copy()
    out = gen.propose(0)
    assert np.array_equal(gen.timestamps.last_round, before)
    gen.commit(out)
    for i, j in out.matching.pairs:
        assert gen.timestamps.last_round[i, j] == 0


def test_disconnected_b_star_still_bridged():
    n = 8
    rng = np.random.default_rng(5)
    raw = np.triu(rng.uniform(1.0, 10.0, size=(n, n)), k=1)
    b = symmetrize_bandwidth(raw + raw.T)
    b_star = AdjacencyMatrix.from_edges(n, [(0, 1), (2, 3), (4, 5), (6, 7)])
    gen = GossipGenerator(b, b_star, 5, rng)
    rounds = [gen.next_round(t) for t in range(200)]
    assert sum(r.bridged for r in rounds) > 1
    off_b_star = {p for r in rounds for p in r.matching.pairs if not b_star.has_edge(*p)}
    assert off_b_star


def test_ring_matching():
    assert ring_matching(4, 0).sorted_pairs() == [(0, 1), (2, 3)]
    assert ring_matching(4, 1).sorted_pairs() == [(0, 3), (1, 2)]
    m = ring_matching(5, 2)
    assert len(m) == 2 and len(m.unmatched) == 1


def test_ring_mode_skips_dead_links(rng):
    raw = np.ones((4, 4))
    raw[0, 1] = raw[1, 0] = 0.0
    b = symmetrize_bandwidth(raw)
    assert ring_matching(4, 0, b).sorted_pairs() == [(2, 3)]
    gen = GossipGenerator(b, b.positive_graph(), 10, rng, PeerSelection.RING)
    first = gen.next_round(0)
    assert first.matching.sorted_pairs() == [(2, 3)]
    assert {0, 1} <= first.matching.unmatched
    assert first.matrix.check() == []
    assert gen.next_round(1).matching.sorted_pairs() == [(0, 3), (1, 2)]


@pytest.mark.parametrize("n, seed", [(8, 0), (13, 1), (16, 2)])
def test_matching_window_connects_possible_edges(n, seed):
    rng = np.random.default_rng(seed)
    raw = np.triu(rng.uniform(1.0, 5.0, size=(n, n)) * (rng.random((n, n)) < 0.4), k=1)
    for i in range(n):
        j = (i + 1) % n
        raw[min(i, j), max(i, j)] = rng.uniform(1.0, 5.0)
    b = symmetrize_bandwidth(raw + raw.T)
    gen = GossipGenerator(b, get_new_connected_graph(b, default_b_thres(b)), 10, rng)
    window = 50 * math.ceil(math.log2(n))
    seen = TimestampMatrix.initial(n, window)
    for t in range(2 * window):
        match = gen.next_round(t).matching
        assert all(b[i, j] > 0 for i, j in match.pairs)
        seen = seen.with_matched(match, t)
        if t >= window - 1:
            # union of the last `window` matchings
            assert if_connected(seen, window, t), f"window ending at t={t} leaves workers apart"


@pytest.mark.parametrize("mode", list(PeerSelection))
def test_every_mode_yields_valid_matrices(mode):
    rng = np.random.default_rng(9)
    raw = np.triu(rng.uniform(0.5, 5.0, size=(7, 7)), k=1)
    b = symmetrize_bandwidth(raw + raw.T)
    gen = GossipGenerator(b, b.positive_graph(), 10, rng, mode)
    for t in range(30):
        assert gen.next_round(t).matrix.check() == []


def test_generator_rejects_bad_threshold(complete_bandwidth):
    with pytest.raises(InvalidInput):
        GossipGenerator(complete_bandwidth(4), AdjacencyMatrix.complete(4), 0, np.random.default_rng(0))
