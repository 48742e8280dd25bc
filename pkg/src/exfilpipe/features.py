"""Fixed 76-slot per-binary feature vector over the function call graph.

Layout (versioned "v1-17-27-32"):
  slots  1-17  graph topology descriptors,
  slots 18-44  aggregated per-function attributes (9 fields x mean/std/max),
  slots 45-76  32-dim random-walk co-occurrence embedding (PPMI + truncated
               symmetric factorization by seeded subspace iteration).
All slots are finite for every input, including empty graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix

from .graphs import CallGraph, _UnionFind

LAYOUT_VERSION = "v1-17-27-32"
DIM = 76

TOPO_NAMES = (
    "n_nodes", "n_edges", "density", "out_degree_mean", "out_degree_std",
    "out_degree_max", "in_degree_std", "in_degree_max", "n_wcc",
    "largest_wcc_frac", "isolated_frac", "entry_frac", "exit_frac",
    "scc_frac", "cycle_frac", "self_loops", "reciprocity",
)

AGG_FIELDS = ("n_blocks", "total_bytes", "instr_count_est", "avg_block_entropy",
              "std_block_entropy", "bl_count", "bl_indirect_count", "svc_count",
              "avg_bytes_per_block")

AGG_NAMES = tuple(f"{f}_{stat}" for f in AGG_FIELDS for stat in ("mean", "std", "max"))

EMB_NAMES = tuple(f"emb_{i:02d}" for i in range(32))

FEATURE_NAMES = TOPO_NAMES + AGG_NAMES + EMB_NAMES
assert len(FEATURE_NAMES) == DIM


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 32
    walks_per_node: int = 10
    walk_length: int = 40
    window: int = 5
    seed: int = 0
    power_iterations: int = 50

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.walk_length < self.window:
            raise ValueError("walk_length must be >= window")


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    layout_version: str = LAYOUT_VERSION

    def __post_init__(self):
        if len(self.values) != DIM:
            raise ValueError(f"feature vector must have {DIM} slots")


def _mean(values) -> float:
    return sum(values) / len(values) if values else 0.0


def _pstd(values) -> float:
    if not values:
        return 0.0
    m = _mean(values)
    return math.sqrt(sum((v - m) ** 2 for v in values) / len(values))


def _scc_components(nodes: list[int], adj: dict[int, list[int]]) -> list[list[int]]:
    """Iterative Tarjan; returns strongly connected components."""
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    comps: list[list[int]] = []
    counter = 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(adj[root]))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(adj[w])))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                comps.append(comp)
    return comps


def topo_descriptors(cg: CallGraph) -> list[float]:
    """17 topology slots in fixed order; zeros for the empty graph."""
    nodes = sorted(cg.nodes)
    edges = cg.edges
    n = len(nodes)
    m = len(edges)
    if n == 0:
        return [0.0] * 17

    out_deg = dict.fromkeys(nodes, 0)
    in_deg = dict.fromkeys(nodes, 0)
    adj: dict[int, list[int]] = {v: [] for v in nodes}
    self_loops = 0
    uf = _UnionFind(nodes)
    for u, v in sorted(edges):
        out_deg[u] += 1
        in_deg[v] += 1
        adj[u].append(v)
        uf.union(u, v)
        if u == v:
            self_loops += 1

    outs = [out_deg[v] for v in nodes]
    ins = [in_deg[v] for v in nodes]
    density = m / (n * (n - 1)) if n > 1 else 0.0

    comp_sizes: dict[int, int] = {}
    for v in nodes:
        r = uf.find(v)
        comp_sizes[r] = comp_sizes.get(r, 0) + 1
    n_wcc = len(comp_sizes)
    largest = max(comp_sizes.values())

    isolated = sum(1 for v in nodes if in_deg[v] == 0 and out_deg[v] == 0)
    entry = sum(1 for v in nodes if in_deg[v] == 0 and out_deg[v] > 0)
    exit_ = sum(1 for v in nodes if out_deg[v] == 0 and in_deg[v] > 0)

    comps = _scc_components(nodes, adj)
    loop_nodes = {u for u, v in edges if u == v}
    in_cycle: set[int] = set(loop_nodes)
    for comp in comps:
        if len(comp) > 1:
            in_cycle.update(comp)

    reciprocity = (sum(1 for u, v in edges if (v, u) in edges) / m) if m else 0.0

    return [
        float(n),
        float(m),
        density,
        m / n,
        _pstd(outs),
        float(max(outs)),
        _pstd(ins),
        float(max(ins)),
        float(n_wcc),
        largest / n,
        isolated / n,
        entry / n,
        exit_ / n,
        len(comps) / n,
        len(in_cycle) / n,
        float(self_loops),
        reciprocity,
    ]


def attr_aggregates(cg: CallGraph) -> list[float]:
    """27 slots: mean, population std, max of each per-function field."""
    if not cg.nodes:
        return [0.0] * 27
    recs = [cg.nodes[a] for a in sorted(cg.nodes)]
    out: list[float] = []
    for fname in AGG_FIELDS:
        values = [float(getattr(r, fname)) for r in recs]
        out.extend((_mean(values), _pstd(values), float(max(values))))
    return out


def embed_graph(cg: CallGraph, cfg: EmbeddingConfig) -> list[float]:
    """Deterministic graph embedding: seeded undirected random walks,
    windowed co-occurrence, PPMI, then rank-limited symmetric factorization
    via subspace iteration. Pooled by arithmetic mean over all node rows."""
    nodes = sorted(cg.nodes)
    n = len(nodes)
    if n == 0 or not cg.edges:
        return [0.0] * cfg.dim

    idx = {a: i for i, a in enumerate(nodes)}
    und: set[tuple[int, int]] = set()
    for u, v in cg.edges:
        und.add((idx[u], idx[v]))
        und.add((idx[v], idx[u]))
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in sorted(und):
        nbrs[i].append(j)

    rng = np.random.default_rng(cfg.seed)
    co: dict[tuple[int, int], int] = {}
    for start in range(n):
        if not nbrs[start]:
            continue
        for _ in range(cfg.walks_per_node):
            walk = [start]
            cur = start
            for _ in range(cfg.walk_length):
                cur = nbrs[cur][rng.integers(len(nbrs[cur]))]
                walk.append(cur)
            for i in range(len(walk)):
                hi = min(i + cfg.window, len(walk) - 1)
                for j in range(i + 1, hi + 1):
                    a, b = walk[i], walk[j]
                    co[(a, b)] = co.get((a, b), 0) + 1
                    co[(b, a)] = co.get((b, a), 0) + 1

    total = sum(co.values())
    row_sum: dict[int, int] = {}
    for (i, _j), c in co.items():
        row_sum[i] = row_sum.get(i, 0) + c
    rows, cols, vals = [], [], []
    for (i, j), c in sorted(co.items()):
        pmi = math.log(c * total / (row_sum[i] * row_sum[j]))
        if pmi > 0:
            rows.append(i)
            cols.append(j)
            vals.append(pmi)
    if not vals:
        return [0.0] * cfg.dim

    ppmi = csr_matrix((vals, (rows, cols)), shape=(n, n))
    diff = ppmi - ppmi.T
    assert diff.nnz == 0 or float(np.abs(diff.data).max()) <= 1e-9, "PPMI not symmetric"
    assert min(vals) >= 0.0, "PPMI has negative entries"

    k = min(cfg.dim, n)
    basis = rng.standard_normal((n, k))
    for _ in range(cfg.power_iterations):
        basis = ppmi @ basis
        basis, _ = np.linalg.qr(basis)
    small = basis.T @ (ppmi @ basis)
    small = (small + small.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(small)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    node_vecs = (basis @ eigvecs) * np.sqrt(np.clip(eigvals, 0.0, None))

    for i in range(n):
        if not nbrs[i]:
            node_vecs[i, :] = 0.0
    pooled = node_vecs.mean(axis=0)
    out = [float(x) for x in pooled]
    out.extend(0.0 for _ in range(cfg.dim - len(out)))
    return out


def featurize(cg: CallGraph, cfg: EmbeddingConfig | None = None) -> FeatureVector:
    """Concatenate [topology | aggregates | embedding] into the 76-slot vector."""
    cfg = cfg or EmbeddingConfig()
    values = topo_descriptors(cg) + attr_aggregates(cg) + embed_graph(cg, cfg)
    return FeatureVector(values=tuple(values))


def export_features(rows: list[tuple[str, str, FeatureVector]], sink) -> None:
    """CSV export: layout comment, header with slot names, one row per sample."""
    sink.write(f"# layout_version={LAYOUT_VERSION}\n")
    sink.write("id,label," + ",".join(FEATURE_NAMES) + "\n")
    for sample_id, label, vec in rows:
        sink.write(f"{sample_id},{label}," + ",".join(repr(v) for v in vec.values) + "\n")
