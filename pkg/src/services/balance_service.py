"""
Balance Service - Predictive dynamic load balancing

Workload model (a networkx dual graph of the mesh):
    node i   w_cells = n³,  w_particles = γ · (particles in cube i)
    edge     halo cells across the face: n²·h (same level), n²·h / 4 (coarse-fine)
    total    w_i = w_cells + w_particles + Σ incident edge weights
    W(q)     Σ w_i over the cubes of rank q
The check fires when W_max / W_avg > κ, with W_avg counting empty ranks. A new partition is
computed on rank 0 (Z-order prefix bisection plus border refinement), relabeled to ranks by
a greedy maximum-weight matching on the data already resident, broadcast, and applied by
point-to-point moves of cube arrays and particle sets.
"""
from __future__ import annotations
import pickle
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from loguru import logger

from ..errors import PartitionError
from ..infra.workers import RankContext
from ..models.balance import BalanceReport
from ..models.case import BalanceConfig
from ..models.decomp import Distribution
from ..models.field import CubeField
from ..models.mesh import BcmMesh
from ..models.particle_set import ParticleSet
from .decomp_service import explicit_distribution

_REDISTRIBUTE_TAG = 1
_EDGE_CUT_SLACK = 1.1


def build_graph(mesh: BcmMesh, particle_counts: Mapping[int, int], gamma: float, halo_width: int = 2) -> nx.Graph:
    """
    Weighted dual graph: one node per cube, one edge per face-adjacent pair.

    Node attributes: w_cells, w_particles, weight (total incl. incident edges).
    Edge attribute: weight (halo cells exchanged across the face).
    """
    n = mesh.n_cells_per_edge
    G = nx.Graph()
    for c in mesh.cubes:
        count = int(particle_counts.get(c.global_id, 0))
        G.add_node(c.global_id, w_cells=float(n ** 3), w_particles=float(gamma) * count)
    for c in mesh.cubes:
        for nbrs in c.neighbors:
            for g in nbrs:
                if g == c.global_id or G.has_edge(c.global_id, g):
                    continue
                same = mesh.cubes[g].level == c.level
                w = n * n * halo_width if same else (n * n * halo_width) // 4
                G.add_edge(c.global_id, g, weight=float(w))
    for i in G.nodes:
        d = G.nodes[i]
        d["weight"] = d["w_cells"] + d["w_particles"] + sum(G.edges[i, j]["weight"] for j in sorted(G.adj[i]))
    return G


def workloads(graph: nx.Graph, assignment: Sequence[int], n_parts: int) -> List[float]:
    W = [0.0] * n_parts
    for i in sorted(graph.nodes):
        W[assignment[i]] += graph.nodes[i]["weight"]
    return W


def estimate_imbalance(graph: nx.Graph, assignment: Sequence[int], n_parts: int) -> Tuple[List[float], float]:
    """
    Per-rank workloads and W_max / W_avg (empty ranks count toward the average).

    Example:
        Two ranks holding weights 10 and 30 give a ratio of 1.5.
    """
    W = workloads(graph, assignment, n_parts)
    total = sum(W)
    if total == 0:
        return W, 1.0
    return W, max(W) * n_parts / total


def needs_rebalance(W: Sequence[float], kappa: float) -> bool:
    """Exact test of W_max · P > κ · ΣW"""
    total = sum((Fraction(w) for w in W), Fraction(0))
    return Fraction(max(W)) * len(W) > Fraction(str(kappa)) * total


def edge_cut(graph: nx.Graph, assignment: Sequence[int]) -> float:
    return float(sum(d["weight"] for i, j, d in graph.edges(data=True) if assignment[i] != assignment[j]))


def _bisect(order: List[int], weights: Dict[int, float], k: int, first: int, out: Dict[int, int]) -> None:
    if k == 1:
        for i in order:
            out[i] = first
        return
    k1 = k // 2
    k2 = k - k1
    prefix = np.cumsum([weights[i] for i in order])
    total = prefix[-1]
    target = total * k1 / k
    best, best_err = k1, None
    for s in range(k1, len(order) - k2 + 1):
        err = abs(prefix[s - 1] - target)
        if best_err is None or err < best_err:
            best, best_err = s, err
    _bisect(order[:best], weights, k1, first, out)
    _bisect(order[best:], weights, k2, first + k1, out)


def _objective(W: Sequence[float]) -> Tuple[float, float]:
    return max(W), sum(w * w for w in W)


def partition_graph(graph: nx.Graph, k: int) -> List[int]:
    """
    k-way partition of the dual graph.

    Nodes are split along their Z-order (node id order) into weight-balanced prefixes by
    recursive bisection. Refinement then moves single cubes while (max W, ΣW²) strictly
    improves lexicographically: border cubes to an adjacent part as long as the edge cut stays
    within 10% of the initial cut, then any cube to the lightest part. No part is emptied.

    Raises:
        PartitionError: k < 1 or k exceeds the node count
    """
    nodes = sorted(graph.nodes)
    if k < 1 or k > len(nodes):
        raise PartitionError(f"Cannot split {len(nodes)} cubes into {k} parts")
    weights = {i: graph.nodes[i]["weight"] for i in nodes}
    part: Dict[int, int] = {}
    _bisect(nodes, weights, k, 0, part)
    if k == 1:
        return [part[i] for i in nodes]

    W = [0.0] * k
    size = [0] * k
    for i in nodes:
        W[part[i]] += weights[i]
        size[part[i]] += 1
    cut = edge_cut(graph, part)
    cut_cap = cut * _EDGE_CUT_SLACK
    budget = 4 * len(nodes)

    def try_move(i: int, q: int) -> bool:
        nonlocal cut
        p = part[i]
        if p == q or size[p] == 1:
            return False
        Wn = list(W)
        Wn[p] -= weights[i]
        Wn[q] += weights[i]
        if _objective(Wn) >= _objective(W):
            return False
        delta_cut = 0.0
        for j in graph.adj[i]:
            w = graph.edges[i, j]["weight"]
            if part[j] == p:
                delta_cut += w
            elif part[j] == q:
                delta_cut -= w
        if cut + delta_cut > cut_cap:
            return False
        W[:] = Wn
        size[p] -= 1
        size[q] += 1
        part[i] = q
        cut += delta_cut
        return True

    moved = True
    while moved and budget > 0:
        moved = False
        for i in nodes:
            if budget <= 0:
                break
            for q in sorted({part[j] for j in graph.adj[i]} - {part[i]}):
                if try_move(i, q):
                    budget -= 1
                    moved = True
                    break

    moved = True
    while moved and budget > 0:
        moved = False
        heavy = max(range(k), key=lambda q: (W[q], -q))
        light = min(range(k), key=lambda q: (W[q], q))
        for i in nodes:
            if part[i] == heavy and try_move(i, light):
                budget -= 1
                moved = True
                break
    return [part[i] for i in nodes]


def construct_similarity(graph: nx.Graph, old: Sequence[int], new: Sequence[int], n_parts: int) -> np.ndarray:
    """S[r][q] = Σ w_cells of cubes owned by rank r that land in new part q"""
    S = np.zeros((n_parts, n_parts), dtype=np.float64)
    for i in sorted(graph.nodes):
        S[old[i], new[i]] += graph.nodes[i]["w_cells"]
    return S


def remap_mwbg(S: np.ndarray) -> List[int]:
    """
    Greedy maximum-weight bipartite matching of new parts to ranks.

    Entries are taken in descending weight (ties by rank, then part) and accepted when both
    the rank and the part are still free.

    Returns:
        rank_of[q] for every new part q

    Example:
        >>> remap_mwbg(np.array([[10.0, 0.0], [9.0, 8.0]]))
        [0, 1]
    """
    S = np.asarray(S, dtype=np.float64)
    P = S.shape[0]
    if S.shape != (P, P):
        raise ValueError(f"similarity matrix must be square, got {S.shape}")
    entries = sorted(((-S[r, q], r, q) for r in range(P) for q in range(P)))
    rank_of = [-1] * P
    taken = [False] * P
    for _, r, q in entries:
        if not taken[r] and rank_of[q] < 0:
            taken[r] = True
            rank_of[q] = r
    return rank_of


def matching_weight(S: np.ndarray, rank_of: Sequence[int]) -> float:
    return float(sum(S[r, q] for q, r in enumerate(rank_of)))


def particle_counts(ctx: RankContext, sets: Mapping[int, ParticleSet]) -> Dict[int, int]:
    """Global cube id -> particle count (collective)"""
    out: Dict[int, int] = {}
    for part in ctx.comm.allgather({g: len(s) for g, s in sets.items()}):
        out.update(part)
    return out


def redistribute(
    ctx: RankContext,
    fields: Sequence[CubeField],
    sets: Dict[int, ParticleSet],
    old: Distribution,
    new: Distribution,
) -> Tuple[int, int]:
    """
    Move cube arrays and particle sets to their new owners (collective).

    Only rank pairs with at least one moving cube exchange a message. Fields are re-laid
    out in place; ``sets`` is updated in place.

    Returns:
        (cubes moved, payload bytes sent) summed over all ranks
    """
    rank = ctx.rank
    outgoing: Dict[int, List[int]] = {}
    incoming: Dict[int, List[int]] = {}
    for g in range(old.n_cubes):
        a, b = old.owner(g), new.owner(g)
        if a == b:
            continue
        if a == rank:
            outgoing.setdefault(b, []).append(g)
        elif b == rank:
            incoming.setdefault(a, []).append(g)

    comm = ctx.comm
    handles = {q: comm.post_recv(q, _REDISTRIBUTE_TAG) for q in sorted(incoming)}
    sent_bytes = 0
    for q in sorted(outgoing):
        payload = {
            g: ([f.cube(g).copy() for f in fields], sets[g].to_arrays() if g in sets else None)
            for g in outgoing[q]
        }
        data = pickle.dumps(payload, protocol=pickle.HIGHEST_PROTOCOL)
        sent_bytes += len(data)
        comm.post_send(q, _REDISTRIBUTE_TAG, data)
    comm.wait_all(list(handles.values()))

    arrays: List[Dict[int, np.ndarray]] = [{} for _ in fields]
    keep = new.local_gids(rank)
    for g in keep:
        if old.owner(g) == rank:
            for k, f in enumerate(fields):
                arrays[k][g] = f.cube(g)
    for q in sorted(handles):
        payload = pickle.loads(handles[q].payload)
        for g in sorted(payload):
            blocks, parts = payload[g]
            for k, block in enumerate(blocks):
                arrays[k][g] = block
            sets[g] = ParticleSet.from_arrays(g, parts) if parts is not None else ParticleSet(g)
    for k, f in enumerate(fields):
        f.replace_cubes(keep, arrays[k])
    for q in outgoing:
        for g in outgoing[q]:
            sets.pop(g, None)

    moved = sum(len(v) for v in outgoing.values())
    totals = comm.allgather((moved, sent_bytes))
    return sum(t[0] for t in totals), sum(t[1] for t in totals)


class LoadBalancer:
    """
    Collective imbalance check and repartitioning.

    Key features:
    - Dual-graph workload model with particle cost γ
    - Exact κ trigger
    - Rank 0 partitions and remaps; the new owner list is broadcast
    - Redistribution of every given field and the particle sets

    Args:
        ctx: Rank context
        mesh: Shared mesh
        config: κ, γ, cadence
        halo_width: Ghost layers used for edge weights
    """

    def __init__(self, ctx: RankContext, mesh: BcmMesh, config: BalanceConfig, halo_width: int = 2):
        self.ctx = ctx
        self.mesh = mesh
        self.config = config
        self.halo_width = halo_width

    def graph(self, sets: Mapping[int, ParticleSet]) -> nx.Graph:
        return build_graph(self.mesh, particle_counts(self.ctx, sets), self.config.gamma, self.halo_width)

    def check(self, dist: Distribution, sets: Mapping[int, ParticleSet]) -> Tuple[nx.Graph, List[float], float]:
        G = self.graph(sets)
        W, ratio = estimate_imbalance(G, dist.owner_list(), dist.n_ranks)
        return G, W, ratio

    def rebalance(
        self,
        dist: Distribution,
        fields: Sequence[CubeField],
        sets: Dict[int, ParticleSet],
        step: int = 0,
    ) -> Tuple[BalanceReport, Distribution]:
        """
        Repartition when W_max / W_avg > κ (collective).

        Returns:
            (report, distribution in force afterwards; ``dist`` itself when nothing moved)
        """
        G, W, ratio = self.check(dist, sets)
        report = BalanceReport(step=step, workloads=W, ratio_pre=ratio, ratio_post=ratio,
                               edge_cut=edge_cut(G, dist.owner_list()))
        if not needs_rebalance(W, self.config.kappa) or dist.n_ranks == 1:
            return report, dist

        plan: Optional[Tuple[List[int], float]] = None
        if self.ctx.rank == 0:
            parts = partition_graph(G, dist.n_ranks)
            S = construct_similarity(G, dist.owner_list(), parts, dist.n_ranks)
            rank_of = remap_mwbg(S)
            owners = [rank_of[q] for q in parts]
            plan = (owners, edge_cut(G, owners))
        owners, cut = self.ctx.comm.bcast(plan, root=0)
        new = explicit_distribution(owners, dist.n_ranks)
        W_post, ratio_post = estimate_imbalance(G, owners, dist.n_ranks)
        moved, nbytes = redistribute(self.ctx, fields, sets, dist, new)

        report.rebalanced = True
        report.workloads = W_post
        report.ratio_post = ratio_post
        report.cubes_moved = moved
        report.bytes_moved = nbytes
        report.edge_cut = cut
        if self.ctx.rank == 0:
            logger.info(
                "balance step={} ratio_pre={:.4f} ratio_post={:.4f} moved={} bytes={} cut={:.0f}",
                step, ratio, ratio_post, moved, nbytes, cut,
            )
        return report, new
