"""Peer selection: blossom matching, RC-edge bridging and gossip matrices.

``generate_gossip_matrix`` follows the coordinator's per-round procedure:
match on the bandwidth-filtered graph B* while the recently-connected (RC)
edges keep every worker reachable, otherwise match on edges bridging the RC
components; workers left over get a second, bandwidth-agnostic match, and
anyone still alone keeps its own model for the round (W_ii = 1).
"""
import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import AdjacencyMatrix, BandwidthMatrix, GossipMatrix, Matching, TimestampMatrix
from .errors import InvalidInput

logger = logging.getLogger(__name__)

Graph = AdjacencyMatrix


class PeerSelection(str, Enum):
    ADAPTIVE = "adaptive"
    RANDOM = "random"
    RING = "ring"


# ---- Maximum matching (Edmonds) ----
def _find_augmenting_path(adj: List[List[int]], match: List[int], root: int) -> Tuple[int, List[int]]:
    """BFS over alternating trees from ``root`` contracting odd cycles.

    Returns the free endpoint of an augmenting path (or -1) and the parent
    links needed to flip it.
    """
    n = len(adj)
    used = [False] * n
    parent = [-1] * n
    base = list(range(n))

    def lca(a: int, b: int) -> int:
        seen = [False] * n
        while True:
            a = base[a]
            seen[a] = True
            if match[a] == -1:
                break
            a = parent[match[a]]
        while True:
            b = base[b]
            if seen[b]:
                return b
            b = parent[match[b]]

    def mark_path(v: int, b: int, child: int, in_blossom: List[bool]) -> None:
        while base[v] != b:
            in_blossom[base[v]] = in_blossom[base[match[v]]] = True
            parent[v] = child
            child = match[v]
            v = parent[match[v]]

    used[root] = True
    queue = deque([root])
    while queue:
        v = queue.popleft()
        for to in adj[v]:
            if base[v] == base[to] or match[v] == to:
                continue
            if to == root or (match[to] != -1 and parent[match[to]] != -1):
                cur = lca(v, to)
                in_blossom = [False] * n
                mark_path(v, cur, to, in_blossom)
                mark_path(to, cur, v, in_blossom)
                for i in range(n):
                    if in_blossom[base[i]]:
                        base[i] = cur
                        if not used[i]:
                            used[i] = True
                            queue.append(i)
            elif parent[to] == -1:
                parent[to] = v
                if match[to] == -1:
                    return to, parent
                used[match[to]] = True
                queue.append(match[to])
    return -1, parent


def _blossom(adj: List[List[int]], order: Sequence[int]) -> List[int]:
    n = len(adj)
    match = [-1] * n

    # greedy start in processing order; augmenting paths finish the job
    for v in order:
        if match[v] == -1:
            for u in adj[v]:
                if match[u] == -1:
                    match[v], match[u] = u, v
                    break

    for root in order:
        if match[root] != -1:
            continue
        v, parent = _find_augmenting_path(adj, match, root)
        while v != -1:
            pv = parent[v]
            ppv = match[pv]
            match[v], match[pv] = pv, v
            v = ppv
    return match


def _matching_from_mates(n: int, mates: List[int]) -> Matching:
    return Matching.from_pairs(n, [(v, u) for v, u in enumerate(mates) if u > v])


def max_matching(g: Graph, order: Optional[Sequence[int]] = None) -> Matching:
    """Maximum-cardinality matching; ``order`` fixes the vertex processing order."""
    n = g.n
    order = list(range(n)) if order is None else [int(v) for v in order]
    if sorted(order) != list(range(n)):
        raise InvalidInput("processing order must be a permutation of the vertices")
    rank = {v: k for k, v in enumerate(order)}
    adj = [sorted(g.neighbors(v), key=rank.__getitem__) for v in range(n)]
    return _matching_from_mates(n, _blossom(adj, order))


def randomly_max_match(g: Graph, rng: np.random.Generator) -> Matching:
    """Maximum matching under a uniformly random vertex processing order."""
    return max_matching(g, order=rng.permutation(g.n).tolist())


# ---- Connectivity ----
def find_connected_subgraphs(g: Graph) -> List[List[int]]:
    """Components of ``g`` by union-find, each sorted, ordered by smallest member."""
    parent = list(range(g.n))

    def find(v: int) -> int:
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for i, j in g.edge_list():
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    groups = {}
    for v in range(g.n):
        groups.setdefault(find(v), []).append(v)
    return sorted(groups.values(), key=lambda c: c[0])


def is_connected(g: Graph) -> bool:
    return len(find_connected_subgraphs(g)) <= 1


def if_connected(r: TimestampMatrix, t_thres: int, t: int) -> bool:
    """Whether the recently-connected edges (R_ij > t - T_thres) span all workers."""
    return is_connected(r.recently_connected(t_thres, t))


def get_over_time_matrix(r: TimestampMatrix, available: AdjacencyMatrix, t_thres: int, t: int) -> AdjacencyMatrix:
    """Edges of ``available`` joining two different RC components."""
    components = find_connected_subgraphs(r.recently_connected(t_thres, t))
    label = np.empty(r.n, dtype=np.int64)
    for k, comp in enumerate(components):
        label[comp] = k
    crossing = label[:, None] != label[None, :]
    return AdjacencyMatrix(crossing & available.edges)


def get_unmatch(b: BandwidthMatrix, m: Matching) -> AdjacencyMatrix:
    """Positive-bandwidth edges among the workers ``m`` left unmatched."""
    free = np.zeros(b.n, dtype=bool)
    free[list(m.unmatched)] = True
    return AdjacencyMatrix((b.speeds > 0) & free[:, None] & free[None, :])


# ---- Gossip matrix generation ----
@dataclass(frozen=True)
class GossipRound:
    t: int
    matrix: GossipMatrix
    matching: Matching
    bridged: bool = False
    fallback_pairs: int = 0


def _generate(
    b: BandwidthMatrix,
    b_star: AdjacencyMatrix,
    r: TimestampMatrix,
    t_thres: int,
    n: int,
    t: int,
    rng: np.random.Generator,
) -> GossipRound:
    if n < 2:
        raise InvalidInput(f"need at least 2 workers, got {n}")
    if b.n != n or b_star.n != n or r.n != n:
        raise InvalidInput("bandwidth, B* and timestamp matrices must all be n x n")

    bridged = not if_connected(r, t_thres, t)
    candidates = get_over_time_matrix(r, b.positive_graph(), t_thres, t) if bridged else b_star
    match = randomly_max_match(candidates, rng)

    fallback = 0
    if len(match) < n // 2:
        second = randomly_max_match(get_unmatch(b, match), rng)
        fallback = len(second)
        match = match.union(second)

    return GossipRound(
        t=t,
        matrix=GossipMatrix.from_matching(match),
        matching=match,
        bridged=bridged,
        fallback_pairs=fallback,
    )


def generate_gossip_matrix(
    b: BandwidthMatrix,
    b_star: AdjacencyMatrix,
    r: TimestampMatrix,
    t_thres: int,
    n: int,
    t: int,
    rng: np.random.Generator,
) -> Tuple[GossipMatrix, Matching]:
    """One round of peer selection. The caller records the result in R."""
    out = _generate(b, b_star, r, t_thres, n, t, rng)
    return out.matrix, out.matching


def ring_matching(n: int, t: int, bandwidth: Optional[BandwidthMatrix] = None) -> Matching:
    """Single-peer rendition of the ring 0→1→…→n−1→0.

    Even n alternates the two perfect matchings of the cycle; odd n rotates
    the starting vertex so every ring edge recurs. With ``bandwidth`` given,
    ring edges on a dead link are dropped and both ends sit the round out.
    """
    offset = t % (2 if n % 2 == 0 else n)
    pairs = [((offset + 2 * k) % n, (offset + 2 * k + 1) % n) for k in range(n // 2)]
    if bandwidth is not None:
        pairs = [(i, j) for i, j in pairs if bandwidth[i, j] > 0]
    return Matching.from_pairs(n, pairs)


class GossipGenerator:
    """Stateful peer selector: owns the timestamp matrix R and the RNG."""

    def __init__(
        self,
        bandwidth: BandwidthMatrix,
        b_star: AdjacencyMatrix,
        t_thres: int,
        rng: np.random.Generator,
        mode: PeerSelection = PeerSelection.ADAPTIVE,
    ):
        if t_thres < 1:
            raise InvalidInput(f"T_thres must be >= 1, got {t_thres}")
        self.bandwidth = bandwidth
        self.b_star = b_star
        self.t_thres = t_thres
        self.rng = rng
        self.mode = PeerSelection(mode)
        self.timestamps = TimestampMatrix.initial(bandwidth.n, t_thres)

    @property
    def n(self) -> int:
        return self.bandwidth.n

    def update_bandwidth(self, bandwidth: BandwidthMatrix) -> None:
        if bandwidth.n != self.n:
            raise InvalidInput("bandwidth update changes the worker count")
        self.bandwidth = bandwidth

    def next_round(self, t: int) -> GossipRound:
        out = self.propose(t)
        self.commit(out)
        return out

    def commit(self, out: GossipRound) -> None:
        """Record the round's pairs in R once the round actually completed."""
        self.timestamps = self.timestamps.with_matched(out.matching, out.t)

    def propose(self, t: int) -> GossipRound:
        """Select this round's pairs without touching R."""
        if self.mode is PeerSelection.ADAPTIVE:
            out = _generate(self.bandwidth, self.b_star, self.timestamps, self.t_thres, self.n, t, self.rng)
        else:
            if self.mode is PeerSelection.RANDOM:
                match = randomly_max_match(self.bandwidth.positive_graph(), self.rng)
            else:
                match = ring_matching(self.n, t, self.bandwidth)
            out = GossipRound(t=t, matrix=GossipMatrix.from_matching(match), matching=match)
        if out.bridged or out.fallback_pairs:
            logger.debug(
                "round %d: bridged=%s fallback_pairs=%d pairs=%d",
                t, out.bridged, out.fallback_pairs, len(out.matching),
            )
        return out
