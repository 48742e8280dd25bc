"""Static graph artifacts: import graph, function call graph, ICFG.

Builds the three per-binary graphs, computes per-function feature records and
per-block entropy, and serializes everything as GraphML (full graph) or JSON
(node summaries with the exact field names downstream consumers expect).
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import networkx as nx

from .binfmt import BinaryImage
from .disasm import (BasicBlock, FunctionSeed, InstrKind,
                     build_blocks, discover_functions)
from .errors import PipelineError, SinkFailure


def byte_entropy(data: bytes) -> float:
    """Shannon entropy in bits over the 256-bin byte histogram; empty -> 0."""
    if not data:
        return 0.0
    n = len(data)
    h = 0.0
    for count in Counter(data).values():
        p = count / n
        h -= p * math.log2(p)
    return h


@dataclass(frozen=True)
class FunctionFeatures:
    addr: int
    name: str
    n_blocks: int
    total_bytes: int
    avg_block_entropy: float
    std_block_entropy: float
    bl_count: int
    bl_indirect_count: int
    svc_count: int
    avg_bytes_per_block: float
    instr_count_est: float


# serialization order for FCG node records
FCG_NODE_FIELDS = ("addr", "name", "n_blocks", "total_bytes", "avg_block_entropy",
                   "std_block_entropy", "bl_count", "bl_indirect_count", "svc_count",
                   "avg_bytes_per_block", "instr_count_est")

ICFG_NODE_FIELDS = ("addr", "size", "entropy")


@dataclass
class CallGraph:
    binary_id: str
    nodes: dict[int, FunctionFeatures]
    edges: set[tuple[int, int]]
    dropped_call_targets: int = 0


@dataclass(frozen=True)
class IcfgNodeRec:
    addr: int
    size: int
    entropy: float


@dataclass
class Icfg:
    binary_id: str
    nodes: dict[int, IcfgNodeRec]
    edges: set[tuple[int, int]]


@dataclass
class ImportGraph:
    binary_id: str
    libraries: list[str]
    symbol_edges: list[tuple[str, str]]  # (library, symbol)
    unattributed: list[str]


@dataclass(frozen=True)
class GraphStats:
    n_nodes: int
    n_edges: int
    avg_out_degree: float
    max_in_degree: int
    max_out_degree: int
    n_wcc: int
    largest_wcc_size: int
    component_size_histogram: dict[int, int]
    n_isolated: int
    n_entry: int
    n_exit: int


def _pstd(values: list[float], mean: float) -> float:
    if not values:
        return 0.0
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def _function_features(seed: FunctionSeed, blocks: list[BasicBlock]) -> FunctionFeatures:
    n = len(blocks)
    total = sum(b.size for b in blocks)
    entropies = [byte_entropy(b.data) for b in blocks]
    avg_e = sum(entropies) / n if n else 0.0
    bl = blind = svc = 0
    for b in blocks:
        for ins in b.instrs:
            if ins.kind is InstrKind.DIRECT_CALL:
                bl += 1
            elif ins.kind is InstrKind.INDIRECT_CALL:
                blind += 1
            elif ins.kind is InstrKind.SUPERVISOR:
                svc += 1
    return FunctionFeatures(
        addr=seed.addr, name=seed.name, n_blocks=n, total_bytes=total,
        avg_block_entropy=avg_e, std_block_entropy=_pstd(entropies, avg_e),
        bl_count=bl, bl_indirect_count=blind, svc_count=svc,
        avg_bytes_per_block=total / n if n else 0.0,
        instr_count_est=total / 4,
    )


def _recover(image: BinaryImage) -> tuple[list[FunctionSeed], dict[int, list[BasicBlock]]]:
    seeds = discover_functions(image)
    known = [s.addr for s in seeds]
    return seeds, {s.addr: build_blocks(image, s, known) for s in seeds}


def _resolve_call_target(target: int, entries: list[int],
                         ranges: dict[int, int]) -> int | None:
    """Map a call target to a function entry: exact match, else containment."""
    if target in ranges:
        return target
    i = bisect_right(entries, target) - 1
    if i >= 0:
        entry = entries[i]
        if entry <= target < ranges[entry]:
            return entry
    return None


def _function_ranges(image: BinaryImage, entries: list[int]) -> dict[int, int]:
    """End address of each function: next entry or its section's end."""
    out: dict[int, int] = {}
    for i, entry in enumerate(entries):
        sec = image.section_containing(entry)
        end = sec.vaddr + sec.size if sec else entry
        if i + 1 < len(entries) and entries[i + 1] < end:
            end = entries[i + 1]
        out[entry] = end
    return out


def build_fcg(image: BinaryImage) -> CallGraph:
    """Function call graph with the per-function feature records."""
    seeds, blocks_by_addr = _recover(image)
    nodes = {s.addr: _function_features(s, blocks_by_addr[s.addr]) for s in seeds}
    entries = sorted(nodes)
    ranges = _function_ranges(image, entries)
    edges: set[tuple[int, int]] = set()
    dropped = 0
    for s in seeds:
        for b in blocks_by_addr[s.addr]:
            for ins in b.instrs:
                if ins.kind is not InstrKind.DIRECT_CALL or ins.target is None:
                    continue
                callee = _resolve_call_target(ins.target, entries, ranges)
                if callee is None:
                    dropped += 1
                else:
                    edges.add((s.addr, callee))
    return CallGraph(binary_id=image.path, nodes=nodes, edges=edges,
                     dropped_call_targets=dropped)


def build_icfg(image: BinaryImage) -> Icfg:
    """Basic-block graph with entropy annotations and every successor kind
    (fallthrough, taken, call, call_return); call edges land on callee entry
    blocks. Successor targets without a recovered block are dropped."""
    _seeds, blocks_by_addr = _recover(image)
    nodes: dict[int, IcfgNodeRec] = {}
    all_blocks: list[BasicBlock] = []
    for blocks in blocks_by_addr.values():
        for b in blocks:
            nodes[b.addr] = IcfgNodeRec(addr=b.addr, size=b.size,
                                        entropy=byte_entropy(b.data))
            all_blocks.append(b)
    edges: set[tuple[int, int]] = set()
    for b in all_blocks:
        for dst, _kind in b.successors:
            if dst in nodes:
                edges.add((b.addr, dst))
    return Icfg(binary_id=image.path, nodes=nodes, edges=edges)


def build_import_graph(image: BinaryImage) -> ImportGraph:
    """Needed libraries plus imported symbols. Symbols attach to the single
    needed library when there is exactly one; with several, ELF carries no
    per-symbol binding (absent version info), so symbols stay unattributed."""
    libs = list(image.dynamic.needed_libs)
    imports = list(image.dynamic.imported_symbols)
    if len(libs) == 1:
        return ImportGraph(binary_id=image.path, libraries=libs,
                           symbol_edges=[(libs[0], s) for s in imports],
                           unattributed=[])
    return ImportGraph(binary_id=image.path, libraries=libs,
                       symbol_edges=[], unattributed=imports)


class _UnionFind:
    def __init__(self, items):
        self.parent = {v: v for v in items}
        self.size = {v: 1 for v in items}

    def find(self, v):
        root = v
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[v] != root:
            self.parent[v], v = root, self.parent[v]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def graph_stats(nodes, edges) -> GraphStats:
    """Degree and weak-component statistics over (nodes, edges)."""
    node_list = list(nodes)
    edge_list = list(edges)
    n = len(node_list)
    m = len(edge_list)
    if n == 0:
        return GraphStats(0, 0, 0.0, 0, 0, 0, 0, {}, 0, 0, 0)
    uf = _UnionFind(node_list)
    in_deg = dict.fromkeys(node_list, 0)
    out_deg = dict.fromkeys(node_list, 0)
    for u, v in edge_list:
        out_deg[u] += 1
        in_deg[v] += 1
        uf.union(u, v)
    comp_sizes = Counter(uf.find(v) for v in node_list)
    histogram: dict[int, int] = {}
    for size in comp_sizes.values():
        histogram[size] = histogram.get(size, 0) + 1
    isolated = entry = exit_ = 0
    for v in node_list:
        i, o = in_deg[v], out_deg[v]
        if i == 0 and o == 0:
            isolated += 1
        elif i == 0:
            entry += 1
        elif o == 0:
            exit_ += 1
    return GraphStats(
        n_nodes=n, n_edges=m, avg_out_degree=m / n,
        max_in_degree=max(in_deg.values()), max_out_degree=max(out_deg.values()),
        n_wcc=len(comp_sizes), largest_wcc_size=max(comp_sizes.values()),
        component_size_histogram=dict(sorted(histogram.items())),
        n_isolated=isolated, n_entry=entry, n_exit=exit_,
    )


def format_stats_summary(stats: GraphStats) -> str:
    return (f"{stats.n_nodes} nodes, {stats.n_edges} edges, "
            f"avg out-degree {stats.avg_out_degree:.2f}; "
            f"{stats.n_wcc} weakly connected components "
            f"(largest {stats.largest_wcc_size}), {stats.n_isolated} isolated")


def _fcg_node_json(f: FunctionFeatures) -> dict:
    return {
        "addr": float(f.addr),
        "name": f.name,
        "n_blocks": float(f.n_blocks),
        "total_bytes": float(f.total_bytes),
        "avg_block_entropy": f.avg_block_entropy,
        "std_block_entropy": f.std_block_entropy,
        "bl_count": float(f.bl_count),
        "bl_indirect_count": float(f.bl_indirect_count),
        "svc_count": float(f.svc_count),
        "avg_bytes_per_block": f.avg_bytes_per_block,
        "instr_count_est": f.instr_count_est,
    }


def _graph_to_json_obj(graph: CallGraph | Icfg) -> dict:
    if isinstance(graph, CallGraph):
        return {
            "binary": graph.binary_id,
            "n_nodes": len(graph.nodes),
            "n_edges": len(graph.edges),
            "nodes": {str(a): _fcg_node_json(graph.nodes[a]) for a in sorted(graph.nodes)},
        }
    return {
        "binary": graph.binary_id,
        "n_nodes": len(graph.nodes),
        "nodes": {str(a): {"addr": r.addr, "size": r.size, "entropy": r.entropy}
                  for a, r in sorted(graph.nodes.items())},
    }


def _graph_to_graphml(graph: CallGraph | Icfg) -> str:
    if isinstance(graph, CallGraph):
        g = nx.DiGraph(binary=graph.binary_id, kind="fcg")
        for a in sorted(graph.nodes):
            f = graph.nodes[a]
            g.add_node(str(a), addr=f.addr, name=f.name, n_blocks=f.n_blocks,
                       total_bytes=f.total_bytes, avg_block_entropy=f.avg_block_entropy,
                       std_block_entropy=f.std_block_entropy, bl_count=f.bl_count,
                       bl_indirect_count=f.bl_indirect_count, svc_count=f.svc_count,
                       avg_bytes_per_block=f.avg_bytes_per_block,
                       instr_count_est=f.instr_count_est)
    else:
        g = nx.DiGraph(binary=graph.binary_id, kind="icfg")
        for a in sorted(graph.nodes):
            r = graph.nodes[a]
            g.add_node(str(a), addr=r.addr, size=r.size, entropy=r.entropy)
    for u, v in sorted(graph.edges):
        g.add_edge(str(u), str(v))
    return "\n".join(nx.generate_graphml(g)) + "\n"


def export_graph(graph: CallGraph | Icfg, format: str, sink) -> None:
    """Serialize a graph to a text sink as "graphml" or "json"."""
    if format == "json":
        payload = json.dumps(_graph_to_json_obj(graph), indent=2) + "\n"
    elif format == "graphml":
        payload = _graph_to_graphml(graph)
    else:
        raise ValueError(f"unknown export format {format!r}")
    try:
        sink.write(payload)
    except (OSError, ValueError) as exc:
        raise SinkFailure(str(exc)) from exc


def export_import_graph(graph: ImportGraph, format: str, sink) -> None:
    """Serialize the import graph; node identity is library/symbol name."""
    if format == "json":
        obj = {
            "binary": graph.binary_id,
            "libraries": list(graph.libraries),
            "edges": [{"library": lib, "symbol": sym} for lib, sym in graph.symbol_edges],
            "unattributed_symbols": list(graph.unattributed),
        }
        payload = json.dumps(obj, indent=2) + "\n"
    elif format == "graphml":
        g = nx.MultiDiGraph(binary=graph.binary_id, kind="imports")
        g.add_node("binary", kind="binary", label=graph.binary_id)
        for lib in graph.libraries:
            g.add_node(f"lib:{lib}", kind="library", label=lib)
        for lib, sym in graph.symbol_edges:
            g.add_edge("binary", f"lib:{lib}", symbol=sym)
        for sym in graph.unattributed:
            g.add_node(f"sym:{sym}", kind="symbol", label=sym)
            g.add_edge("binary", f"sym:{sym}", symbol=sym)
        payload = "\n".join(nx.generate_graphml(g)) + "\n"
    else:
        raise ValueError(f"unknown export format {format!r}")
    try:
        sink.write(payload)
    except (OSError, ValueError) as exc:
        raise SinkFailure(str(exc)) from exc


class FcgJsonDoc(NamedTuple):
    binary: str
    n_nodes: int
    n_edges: int
    nodes: dict[int, FunctionFeatures]


class IcfgJsonDoc(NamedTuple):
    binary: str
    n_nodes: int
    nodes: dict[int, IcfgNodeRec]


def parse_fcg_json(text: str) -> FcgJsonDoc:
    obj = json.loads(text)
    nodes = {}
    for key, rec in obj["nodes"].items():
        nodes[int(key)] = FunctionFeatures(
            addr=int(rec["addr"]), name=rec["name"], n_blocks=int(rec["n_blocks"]),
            total_bytes=int(rec["total_bytes"]),
            avg_block_entropy=float(rec["avg_block_entropy"]),
            std_block_entropy=float(rec["std_block_entropy"]),
            bl_count=int(rec["bl_count"]), bl_indirect_count=int(rec["bl_indirect_count"]),
            svc_count=int(rec["svc_count"]),
            avg_bytes_per_block=float(rec["avg_bytes_per_block"]),
            instr_count_est=float(rec["instr_count_est"]))
    return FcgJsonDoc(binary=obj["binary"], n_nodes=int(obj["n_nodes"]),
                      n_edges=int(obj["n_edges"]), nodes=nodes)


def parse_icfg_json(text: str) -> IcfgJsonDoc:
    obj = json.loads(text)
    nodes = {int(k): IcfgNodeRec(addr=int(r["addr"]), size=int(r["size"]),
                                 entropy=float(r["entropy"]))
             for k, r in obj["nodes"].items()}
    return IcfgJsonDoc(binary=obj["binary"], n_nodes=int(obj["n_nodes"]), nodes=nodes)


def parse_graphml(text: str) -> CallGraph | Icfg:
    """Rebuild a CallGraph or Icfg from its GraphML serialization."""
    g = nx.parse_graphml(text)
    kind = g.graph.get("kind")
    binary = g.graph.get("binary", "")
    edges = {(int(u), int(v)) for u, v in g.edges()}
    if kind == "fcg":
        nodes: dict[int, FunctionFeatures] = {}
        for node_id, d in g.nodes(data=True):
            nodes[int(node_id)] = FunctionFeatures(
                addr=int(d["addr"]), name=d["name"], n_blocks=int(d["n_blocks"]),
                total_bytes=int(d["total_bytes"]),
                avg_block_entropy=float(d["avg_block_entropy"]),
                std_block_entropy=float(d["std_block_entropy"]),
                bl_count=int(d["bl_count"]), bl_indirect_count=int(d["bl_indirect_count"]),
                svc_count=int(d["svc_count"]),
                avg_bytes_per_block=float(d["avg_bytes_per_block"]),
                instr_count_est=float(d["instr_count_est"]))
        return CallGraph(binary_id=binary, nodes=nodes, edges=edges)
    if kind == "icfg":
        recs = {int(node_id): IcfgNodeRec(addr=int(d["addr"]), size=int(d["size"]),
                                          entropy=float(d["entropy"]))
                for node_id, d in g.nodes(data=True)}
        return Icfg(binary_id=binary, nodes=recs, edges=edges)
    raise PipelineError(f"graphml document has unknown graph kind {kind!r}")
