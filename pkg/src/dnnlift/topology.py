"""Computation-graph recovery from callsite pointer logs.

Two operators are connected when a later callsite receives as input the
pointer an earlier callsite received as output.  Buffers can be reused by
allocators, so each input binds to its *most recent* writer.  Only pointer
equality matters; input values never do, which is why one format-valid
trivial input gives full coverage.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import signatures
from .bundle import TraceBundle
from .errors import CycleDetected, MissingSignature
from .opid import OperatorLabelVec


@dataclass
class GraphNode:
    call_index: int
    func_id: int
    labels: OperatorLabelVec


@dataclass
class CompGraph:
    nodes: list[GraphNode]
    edges: list[tuple[int, int, int]]  # (producer call_index, consumer call_index, via addr)
    warnings: list[dict] = field(default_factory=list)
    node_index: dict[int, GraphNode] = field(default_factory=dict)

    def __post_init__(self):
        self.node_index = {n.call_index: n for n in self.nodes}

    def producers_of(self, call_index: int) -> list[tuple[int, int]]:
        return [(p, via) for p, c, via in self.edges if c == call_index]

    def consumers_of(self, call_index: int) -> list[int]:
        return [c for p, c, _ in self.edges if p == call_index]


def _resolve_arity(style: str, lv: OperatorLabelVec,
                   n_args: int) -> tuple[OperatorLabelVec, bool]:
    """Find a signature-consistent label set for this callsite's arity.

    Classifier errors can predict label sets whose signature disagrees with
    the observed argument count; prefer dropping fused modifiers before
    giving up, so the pipeline degrades to a reviewable partial result.
    """
    def fits(labs) -> bool:
        try:
            return len(signatures.lookup(style, labs).roles) == n_args
        except MissingSignature:
            return False

    if fits(lv.labels):
        return lv, False
    for drop in ({"ReLU"}, {"BiasAdd"}, {"ReLU", "BiasAdd"}):
        cand = lv.labels - drop
        if cand and fits(cand):
            bits = [b and n not in drop for n, b in zip(lv.label_names, lv.bits)]
            return OperatorLabelVec(bits=bits, confidences=lv.confidences,
                                    label_names=lv.label_names), True
    for name in lv.label_names:
        if name in lv.labels and fits({name}):
            bits = [n == name for n in lv.label_names]
            return OperatorLabelVec(bits=bits, confidences=lv.confidences,
                                    label_names=lv.label_names), True
    raise MissingSignature(
        f"{n_args} args match no signature for labels {sorted(lv.labels)}")


def recover_topology(bundle: TraceBundle, labels: dict[int, OperatorLabelVec],
                     style: str) -> CompGraph:
    nodes: list[GraphNode] = []
    edges: list[tuple[int, int, int]] = []
    warnings: list[dict] = []
    writer_of: dict[int, int] = {}  # address -> most recent producing call_index
    for cs in bundle.callsites:
        if cs.func_id not in labels:
            raise MissingSignature(f"no label vector for func {cs.func_id}")
        lv = labels[cs.func_id]
        if not lv.labels:
            continue  # compiler-inserted utility function
        before = sorted(lv.labels)
        try:
            lv, adjusted = _resolve_arity(style, lv, len(cs.args))
        except MissingSignature as e:
            warnings.append({"stage": "topology", "func_id": cs.func_id,
                             "call_index": cs.call_index,
                             "error": "MissingSignature", "detail": str(e)})
            continue
        if adjusted:
            warnings.append({"stage": "topology", "func_id": cs.func_id,
                             "call_index": cs.call_index,
                             "error": "SignatureArityMismatch",
                             "detail": f"labels {before} reduced to "
                                       f"{sorted(lv.labels)} to match "
                                       f"{len(cs.args)} args"})
        sig = signatures.lookup(style, lv.labels)
        nodes.append(GraphNode(cs.call_index, cs.func_id, lv))
        out_idx = sig.out_index()
        for pos in sig.in_roles():
            addr = cs.args[pos]
            if pos == sig.inplace_out and addr not in writer_of:
                continue
            if addr in writer_of:
                edges.append((writer_of[addr], cs.call_index, addr))
        writer_of[cs.args[out_idx]] = cs.call_index

    for p, c, _ in edges:
        if p >= c:
            raise CycleDetected(f"edge {p}->{c} violates temporal order")
    return CompGraph(nodes=nodes, edges=edges, warnings=warnings)
