"""Trace-based symbolic execution and constraint role tagging.

Runs the modeled instruction subset over a symbolic machine whose values
are expression trees; loads of never-written cells introduce MemCell
leaves, and CPU flags do not exist.  The resulting per-output constraint
is the operator's invariant semantics: tag_roles then classifies each leaf
cell as input / weights / biases by the argument-region it falls in, and
scope_regions measures those regions from the full-execution access log.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import exprs, isa, signatures
from .bundle import CallsiteRecord, MemAccessLog, MemorySnapshot, TraceEntry
from .errors import FragmentedRegion, UnresolvedCell
from .taint import TaintedSubtrace

VECTOR_WIDTH_BYTES = 32
REGION_GAP_LIMIT = 4096


@dataclass(frozen=True)
class MemRegion:
    base: int
    size: int

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.base + self.size

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass
class RoleTaggedConstraint:
    expr: object
    input_cells: list[exprs.Cell]
    weight_cells: list[exprs.Cell]
    bias_cells: list[exprs.Cell]
    output_cell: tuple[int, int]
    regions: dict[str, MemRegion] = field(default_factory=dict)

    def weight_offsets(self) -> list[int]:
        """First-use byte offsets of weight cells, relative to the smallest."""
        if not self.weight_cells:
            return []
        lo = min(c.addr for c in self.weight_cells)
        return [c.addr - lo for c in self.weight_cells]

    def input_offsets(self) -> list[int]:
        if not self.input_cells:
            return []
        lo = min(c.addr for c in self.input_cells)
        return sorted(c.addr - lo for c in self.input_cells)


def sym_execute(subtrace: TaintedSubtrace | list[TraceEntry],
                sink: tuple[int, int]):
    """Symbolic expression held by the sink cell after the (sub)trace."""
    entries = subtrace.entries if isinstance(subtrace, TaintedSubtrace) else subtrace
    machine = isa.Machine(isa.SymbolicALU())
    for entry in entries:
        machine.step(entry)
    addr, width = sink
    if addr not in machine.mem:
        warnings.warn(f"sink 0x{addr:x} never written; returning free cell")
        return exprs.Cell(addr, width)
    return machine.mem[addr]


def replay_concrete(entries: list[TraceEntry], snapshot_read) -> dict[int, float]:
    """Concrete twin of sym_execute: final memory cells written by the trace."""
    machine = isa.Machine(isa.ConcreteALU(snapshot_read))
    for entry in entries:
        machine.step(entry)
    return machine.mem


def simplify(expr):
    return exprs.simplify(expr)


def _runs(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Merge sorted (addr, width) accesses into maximal contiguous [start, end) runs."""
    runs = []
    for addr, width in intervals:
        if runs and addr <= runs[-1][1]:
            runs[-1] = (runs[-1][0], max(runs[-1][1], addr + width))
        else:
            runs.append((addr, addr + width))
    return runs


def scope_regions(access: MemAccessLog, callsite: CallsiteRecord,
                  sig: signatures.SigEntry) -> dict[str, MemRegion]:
    """Per-role memory regions, scoped by clustering accessed addresses.

    A role's region is the chain of contiguous runs containing its argument
    pointer, following gaps up to REGION_GAP_LIMIT bytes.  Gaps wider than
    one vector register trigger a FragmentedRegion warning but the full
    extent is still used (partially-touched tensors, e.g. embedding rows).
    """
    accesses = sorted(set(access.reads) | set(access.writes))
    runs = _runs(accesses)
    regions: dict[str, MemRegion] = {}
    for pos, role in enumerate(sig.roles):
        if role in signatures.ROLE_SCALAR:
            continue
        ptr = callsite.args[pos]
        idx = next((i for i, (s, e) in enumerate(runs) if s <= ptr < e), None)
        if idx is None:
            continue
        lo = idx
        while lo > 0 and runs[lo][0] - runs[lo - 1][1] <= REGION_GAP_LIMIT:
            lo -= 1
        hi = idx
        while hi + 1 < len(runs) and runs[hi + 1][0] - runs[hi][1] <= REGION_GAP_LIMIT:
            hi += 1
        widest = max((runs[i + 1][0] - runs[i][1] for i in range(lo, hi)), default=0)
        if widest > VECTOR_WIDTH_BYTES:
            warnings.warn(
                f"role {role}: cluster gaps up to {widest} bytes; using max extent",
                FragmentedRegion)
        key = role if role not in regions else f"{role}@{pos}"
        regions[key] = MemRegion(runs[lo][0], runs[hi][1] - runs[lo][0])
    # the in-place output aliases the in-role region
    if sig.inplace_out is not None and "out" not in regions:
        alias = sig.roles[sig.inplace_out]
        if alias in regions:
            regions["out"] = regions[alias]
    return regions


def tag_roles(expr, callsite: CallsiteRecord, sig: signatures.SigEntry,
              access: MemAccessLog, snapshot: MemorySnapshot,
              sink: tuple[int, int]) -> RoleTaggedConstraint:
    """Assign each leaf cell to the argument region containing it.

    Cells outside every region but present in the snapshot are compiler
    constant-pool loads and fold to Const leaves; anything else is an
    UnresolvedCell error.
    """
    regions = scope_regions(access, callsite, sig)
    in_regions = {k: r for k, r in regions.items()
                  if k.split("@")[0] in ("in", "in1", "in2")}
    w_region = regions.get("weights")
    b_region = regions.get("biases")
    input_cells, weight_cells, bias_cells = [], [], []
    folds = {}
    for cell in exprs.cells_in_order(expr):
        if any(r.contains(cell.addr) for r in in_regions.values()):
            input_cells.append(cell)
        elif w_region and w_region.contains(cell.addr):
            weight_cells.append(cell)
        elif b_region and b_region.contains(cell.addr):
            bias_cells.append(cell)
        elif snapshot.covers(cell.addr, cell.width):
            raw = snapshot.read(cell.addr, 4)
            folds[cell.addr] = exprs.Const(float(np.frombuffer(raw, dtype="<f4")[0]))
        else:
            raise UnresolvedCell(cell.addr)
    if folds:
        expr = exprs.substitute(expr, folds)
    return RoleTaggedConstraint(expr=expr, input_cells=input_cells,
                                weight_cells=weight_cells, bias_cells=bias_cells,
                                output_cell=sink, regions=regions)


def render_constraint(rtc: RoleTaggedConstraint) -> str:
    """Human-readable constraint with role-relative cell names."""
    by_addr = {}
    for name, cells in (("in", rtc.input_cells), ("w", rtc.weight_cells),
                        ("b", rtc.bias_cells)):
        if not cells:
            continue
        lo = min(c.addr for c in cells)
        for c in cells:
            by_addr[c.addr] = f"{name}[{(c.addr - lo) // 4}]"

    def name_cell(c):
        return by_addr.get(c.addr, f"(0x{c.addr:x}, {c.width})")

    out_addr, _ = rtc.output_cell
    return f"out[0x{out_addr:x}] = " + exprs.render(rtc.expr, name_cell)


def find_sinks(trace: list[TraceEntry], out_region: MemRegion,
               count: int = 1) -> list[tuple[int, int]]:
    """First `count` distinct output cells written by the trace, in order."""
    sinks: list[tuple[int, int]] = []
    seen = set()
    for entry in trace:
        for addr, width in entry.writes:
            for off in range(0, width, 4):
                cell = addr + off
                if out_region.contains(cell) and cell not in seen:
                    seen.add(cell)
                    sinks.append((cell, 4))
                    if len(sinks) >= count:
                        return sinks
    return sinks
