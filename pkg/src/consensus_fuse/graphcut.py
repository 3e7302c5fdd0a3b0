"""Exact s-t min-cut and binary MRF minimisation.

Max-flow uses Dinic's blocking-flow algorithm on a residual graph stored as
paired arcs. Before the search, every node pushes min(to-source, to-sink)
straight through its two terminal arcs, which removes most of the work on
image graphs where unaries dominate.

Label convention: source side -> 0, sink side -> 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ConsensusError


@dataclass
class FlowGraph:
    """Nodes 0..n-1 plus implicit source and sink.

    ``source_cap[v]`` is the capacity of source->v (paid when v ends on the sink
    side), ``sink_cap[v]`` that of v->sink (paid when v stays on the source side).
    """

    n_nodes: int
    source_cap: np.ndarray = None
    sink_cap: np.ndarray = None
    _edges: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.source_cap is None:
            self.source_cap = np.zeros(self.n_nodes)
        if self.sink_cap is None:
            self.sink_cap = np.zeros(self.n_nodes)
        self.source_cap = np.asarray(self.source_cap, dtype=np.float64).copy()
        self.sink_cap = np.asarray(self.sink_cap, dtype=np.float64).copy()

    def add_tedge(self, v: int, to_source: float, to_sink: float) -> None:
        self.source_cap[v] += to_source
        self.sink_cap[v] += to_sink

    def add_edge(self, u: int, v: int, cap: float, rev_cap: float = 0.0) -> None:
        self._edges.append((u, v, cap, rev_cap))

    def add_edges(self, uv: np.ndarray, cap: np.ndarray, rev_cap: np.ndarray | None = None) -> None:
        uv = np.asarray(uv, dtype=np.int64).reshape(-1, 2)
        cap = np.broadcast_to(np.asarray(cap, dtype=np.float64), (len(uv),))
        rev = cap if rev_cap is None else np.broadcast_to(np.asarray(rev_cap, dtype=np.float64), (len(uv),))
        self._edges.append((uv, cap.copy(), rev.copy()))

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        uv, cap, rev = [np.zeros((0, 2), np.int64)], [np.zeros(0)], [np.zeros(0)]
        singles = []
        for e in self._edges:
            if len(e) == 3:
                uv.append(e[0])
                cap.append(e[1])
                rev.append(e[2])
            else:
                singles.append(e)
        if singles:
            s = np.array(singles, dtype=np.float64)
            uv.append(s[:, :2].astype(np.int64))
            cap.append(s[:, 2])
            rev.append(s[:, 3])
        return np.concatenate(uv), np.concatenate(cap), np.concatenate(rev)

    def validate(self) -> None:
        uv, cap, rev = self.edge_arrays()
        for name, a in (("terminal", self.source_cap), ("terminal", self.sink_cap),
                        ("edge", cap), ("edge", rev)):
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise ConsensusError(f"{name} capacities must be finite and >= 0", "invalid-graph")
        if len(uv):
            if np.any(uv[:, 0] == uv[:, 1]):
                raise ConsensusError("self edge", "invalid-graph")
            if uv.min() < 0 or uv.max() >= self.n_nodes:
                raise ConsensusError("edge endpoint out of range", "invalid-graph")

    def write_dimacs(self, path) -> None:
        """DIMACS max-flow problem; source is node n+1, sink n+2 (1-based)."""
        uv, cap, rev = self.edge_arrays()
        n = self.n_nodes
        s, t = n + 1, n + 2
        lines = []
        for v in range(n):
            if self.source_cap[v] > 0:
                lines.append(f"a {s} {v + 1} {self.source_cap[v]:.17g}")
            if self.sink_cap[v] > 0:
                lines.append(f"a {v + 1} {t} {self.sink_cap[v]:.17g}")
        for (u, v), c, r in zip(uv, cap, rev):
            if c > 0:
                lines.append(f"a {u + 1} {v + 1} {c:.17g}")
            if r > 0:
                lines.append(f"a {v + 1} {u + 1} {r:.17g}")
        head = [f"p max {n + 2} {len(lines)}", f"n {s} s", f"n {t} t"]
        with open(path, "w") as fh:
            fh.write("\n".join(head + lines) + "\n")


@dataclass
class CutResult:
    labels: np.ndarray      # uint8, 0 = source side
    flow: float


@njit(cache=True, nogil=True)
def _csr(n, uv, cap, rev):
    # arc 2e: u->v, arc 2e+1: v->u
    m = uv.shape[0]
    deg = np.zeros(n + 1, np.int64)
    for e in range(m):
        deg[uv[e, 0] + 1] += 1
        deg[uv[e, 1] + 1] += 1
    start = np.cumsum(deg)
    fill = start[:-1].copy()
    adj = np.empty(2 * m, np.int64)      # arc ids sorted by tail
    head = np.empty(2 * m, np.int64)
    res = np.empty(2 * m)
    for e in range(m):
        u = uv[e, 0]
        v = uv[e, 1]
        head[2 * e] = v
        res[2 * e] = cap[e]
        head[2 * e + 1] = u
        res[2 * e + 1] = rev[e]
        adj[fill[u]] = 2 * e
        fill[u] += 1
        adj[fill[v]] = 2 * e + 1
        fill[v] += 1
    return start, adj, head, res


@njit(cache=True, nogil=True)
def _dinic(n, src, snk, start, adj, head, res):
    """Max flow with terminals held as per-node residuals src[v], snk[v]."""
    flow = 0.0
    # direct s->v->t paths
    for v in range(n):
        f = min(src[v], snk[v])
        flow += f
        src[v] -= f
        snk[v] -= f

    level = np.empty(n, np.int64)
    queue = np.empty(n, np.int64)
    it = np.empty(n, np.int64)
    path = np.empty(n + 1, np.int64)     # arc ids along the current path; -1 marks the source arc
    nodes = np.empty(n + 1, np.int64)
    while True:
        # BFS from the source over residual arcs
        level[:] = -1
        qh = 0
        qt = 0
        for v in range(n):
            if src[v] > 0:
                level[v] = 0
                queue[qt] = v
                qt += 1
        reach_sink = False
        while qh < qt:
            u = queue[qh]
            qh += 1
            if snk[u] > 0:
                reach_sink = True
            for k in range(start[u], start[u + 1]):
                a = adj[k]
                if res[a] > 0:
                    w = head[a]
                    if level[w] < 0:
                        level[w] = level[u] + 1
                        queue[qt] = w
                        qt += 1
        if not reach_sink:
            break

        for v in range(n):
            it[v] = start[v]
        # blocking flow: DFS from each source-adjacent node along level-increasing arcs
        for s0 in range(n):
            while src[s0] > 0 and level[s0] == 0:
                depth = 0
                nodes[0] = s0
                found = False
                while True:
                    u = nodes[depth]
                    if snk[u] > 0:
                        found = True
                        break
                    advanced = False
                    while it[u] < start[u + 1]:
                        a = adj[it[u]]
                        w = head[a]
                        if res[a] > 0 and level[w] == level[u] + 1:
                            path[depth] = a
                            depth += 1
                            nodes[depth] = w
                            advanced = True
                            break
                        it[u] += 1
                    if not advanced:
                        level[u] = -1       # dead end
                        if depth == 0:
                            break
                        depth -= 1
                        it[nodes[depth]] += 1
                if not found:
                    break
                f = src[s0]
                for d in range(depth):
                    if res[path[d]] < f:
                        f = res[path[d]]
                t = nodes[depth]
                if snk[t] < f:
                    f = snk[t]
                src[s0] -= f
                snk[t] -= f
                for d in range(depth):
                    a = path[d]
                    res[a] -= f
                    res[a ^ 1] += f
                flow += f
    return flow


@njit(cache=True, nogil=True)
def _source_side(n, src, start, adj, head, res):
    """Nodes reachable from the source in the residual graph."""
    seen = np.zeros(n, np.bool_)
    stack = np.empty(n, np.int64)
    sp = 0
    for v in range(n):
        if src[v] > 0:
            seen[v] = True
            stack[sp] = v
            sp += 1
    while sp > 0:
        sp -= 1
        u = stack[sp]
        for k in range(start[u], start[u + 1]):
            a = adj[k]
            w = head[a]
            if res[a] > 0 and not seen[w]:
                seen[w] = True
                stack[sp] = w
                sp += 1
    return seen


@njit(cache=True, nogil=True)
def _sink_side(n, snk, start, adj, head, res):
    """Nodes that can still reach the sink in the residual graph."""
    seen = np.zeros(n, np.bool_)
    stack = np.empty(n, np.int64)
    sp = 0
    for v in range(n):
        if snk[v] > 0:
            seen[v] = True
            stack[sp] = v
            sp += 1
    while sp > 0:
        sp -= 1
        u = stack[sp]
        # w -> u has residual capacity iff the arc stored at w is positive;
        # the reverse of arc a (leaving u) is a ^ 1, leaving w
        for k in range(start[u], start[u + 1]):
            a = adj[k]
            w = head[a]
            if res[a ^ 1] > 0 and not seen[w]:
                seen[w] = True
                stack[sp] = w
                sp += 1
    return seen


def max_flow(graph: FlowGraph, tie_label: int = 1) -> CutResult:
    """Exact minimum s-t cut.

    Among minimum cuts, ``tie_label=1`` returns the smallest source set (nodes
    not reachable from the source in the residual graph get 1); ``tie_label=0``
    returns the smallest sink set (only nodes that can still reach the sink get 1).
    """
    graph.validate()
    n = graph.n_nodes
    uv, cap, rev = graph.edge_arrays()
    start, adj, head, res = _csr(n, uv, cap, rev)
    src = graph.source_cap.copy()
    snk = graph.sink_cap.copy()
    flow = _dinic(n, src, snk, start, adj, head, res)
    if tie_label == 1:
        labels = ~_source_side(n, src, start, adj, head, res)
    else:
        labels = _sink_side(n, snk, start, adj, head, res)
    return CutResult(labels.astype(np.uint8), float(flow))


# --------------------------------------------------------------------------
# Binary MRF
# --------------------------------------------------------------------------

NEIGHBOURS_8 = ((0, 1, 1.0), (1, -1, np.sqrt(2.0)), (1, 0, 1.0), (1, 1, np.sqrt(2.0)))
NEIGHBOURS_4 = ((0, 1, 1.0), (1, 0, 1.0))


def grid_edges(shape: tuple[int, int], connectivity: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Each unordered neighbour pair once, as flat (u, v) indices plus its Euclidean length."""
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    offs = NEIGHBOURS_8 if connectivity == 8 else NEIGHBOURS_4
    uv, dist = [], []
    for dy, dx, d in offs:
        r0, r1 = 0, h - dy
        c0, c1 = max(0, -dx), w - max(0, dx)
        a = idx[r0:r1, c0:c1]
        b = idx[r0 + dy:r1 + dy, c0 + dx:c1 + dx]
        uv.append(np.column_stack([a.ravel(), b.ravel()]))
        dist.append(np.full(a.size, d))
    return np.concatenate(uv), np.concatenate(dist)


def mrf_energy(labels, unary, edges, weights) -> float:
    """sum_s D_s(L_s) + sum_(s,t) w_st [L_s != L_t]."""
    L = np.asarray(labels).ravel().astype(np.int64)
    D = np.asarray(unary, dtype=np.float64).reshape(-1, 2)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    w = np.asarray(weights, dtype=np.float64).ravel()
    data = D[np.arange(len(L)), L].sum()
    pair = w[L[e[:, 0]] != L[e[:, 1]]].sum() if len(e) else 0.0
    return float(data + pair)


def minimize_binary_mrf(unary, edges, weights) -> tuple[np.ndarray, float]:
    """Global minimiser of a Potts-form binary energy.

    ``unary`` is (..., 2) holding (D0, D1); the returned labels take its leading
    shape. ``edges`` index the flattened nodes. Among optimal labelings the one
    with the fewest 1s reachable by a canonical cut is returned, so pixels with
    no preference take 0.
    """
    D = np.asarray(unary, dtype=np.float64)
    shape = D.shape[:-1]
    D = D.reshape(-1, 2)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if np.any(w < 0):
        raise ConsensusError("negative pairwise weight", "non-submodular")
    if not np.all(np.isfinite(D)):
        raise ConsensusError("unary costs must be finite", "invalid-graph")
    # shifting both costs of a node by the same amount leaves the minimiser unchanged
    base = D.min(axis=1)
    g = FlowGraph(len(D), source_cap=D[:, 1] - base, sink_cap=D[:, 0] - base)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    keep = w > 0
    if keep.any():
        g.add_edges(e[keep], w[keep], w[keep])
    cut = max_flow(g, tie_label=0)
    labels = cut.labels.reshape(shape)
    return labels, mrf_energy(labels, D, e, w)
