"""Trace-bundle data model and on-disk format.

A bundle packages everything the pipeline needs about one executable run:
static function listings, per-function dynamic traces (one outermost-loop
iteration each), callsite pointer logs, full-execution memory access sets,
and a raw memory snapshot.  The same format is produced by the synthetic
codegen harness and consumed by the decompilation pipeline.

Layout of a bundle directory::

    manifest.json     format version, optional provenance_truth
    functions.json    static listings
    callsites.json    temporal callsite log
    trace_<id>.jsonl  one TraceEntry per line (streams without whole-file parse)
    access_<id>.json  full-execution read/write sets
    snapshot.bin      raw little-endian bytes
    snapshot.idx      region index into snapshot.bin
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import DanglingFuncId, MissingFile, SchemaViolation

FORMAT_VERSION = "1"
PROVENANCE_NAMES = ("tvm-o0", "tvm-o3", "glow")
_WIDTHS = (4, 8, 16, 32)


@dataclass(frozen=True)
class Operand:
    kind: str  # "reg" | "imm" | "mem"
    reg: str | None = None
    value: int | None = None
    base: str | None = None
    index: str | None = None
    scale: int = 1
    disp: int = 0
    addr: int | None = None
    width: int | None = None

    @staticmethod
    def r(name: str) -> "Operand":
        return Operand(kind="reg", reg=name)

    @staticmethod
    def i(value: int) -> "Operand":
        return Operand(kind="imm", value=value)

    @staticmethod
    def m(addr: int, width: int, base: str = "rax", disp: int = 0) -> "Operand":
        return Operand(kind="mem", base=base, disp=disp, addr=addr, width=width)


@dataclass
class TraceEntry:
    seq_no: int
    opcode: str
    operands: list[Operand]
    reads: list[tuple[int, int]] = field(default_factory=list)
    writes: list[tuple[int, int]] = field(default_factory=list)
    reg_values: dict[str, int] = field(default_factory=dict)


@dataclass
class AssemblyFunction:
    func_id: int
    name: str
    opcode_sequence: list[str]
    entry_address: int


@dataclass
class CallsiteRecord:
    call_index: int
    func_id: int
    args: list[int]


@dataclass
class MemorySnapshot:
    regions: list[tuple[int, bytes]] = field(default_factory=list)

    def read(self, addr: int, size: int) -> bytes:
        for base, blob in self.regions:
            if base <= addr and addr + size <= base + len(blob):
                off = addr - base
                return blob[off:off + size]
        raise KeyError(f"0x{addr:x}+{size} not in snapshot")

    def covers(self, addr: int, size: int = 4) -> bool:
        return any(base <= addr and addr + size <= base + len(blob)
                   for base, blob in self.regions)


@dataclass
class MemAccessLog:
    func_id: int
    reads: set[tuple[int, int]] = field(default_factory=set)
    writes: set[tuple[int, int]] = field(default_factory=set)


@dataclass
class TraceBundle:
    functions: list[AssemblyFunction]
    traces: dict[int, list[TraceEntry]]
    callsites: list[CallsiteRecord]
    access_logs: dict[int, MemAccessLog]
    snapshot: MemorySnapshot
    provenance_truth: str | None = None

    def function(self, func_id: int) -> AssemblyFunction:
        for f in self.functions:
            if f.func_id == func_id:
                return f
        raise DanglingFuncId(f"func_id {func_id} not in functions")


def validate_bundle(bundle: TraceBundle) -> None:
    ids = {f.func_id for f in bundle.functions}
    if len(ids) != len(bundle.functions):
        raise SchemaViolation("duplicate func_id in functions")
    for f in bundle.functions:
        if not f.opcode_sequence:
            raise SchemaViolation(f"function {f.func_id} has empty opcode_sequence")
    for fid in sorted(set(bundle.traces) | set(bundle.access_logs)):
        if fid not in ids:
            raise DanglingFuncId(f"func_id {fid} referenced but not defined")
    prev = -1
    for cs in bundle.callsites:
        if cs.func_id not in ids:
            raise DanglingFuncId(f"callsite func_id {cs.func_id} not defined")
        if not cs.args:
            raise SchemaViolation(f"callsite {cs.call_index} has no args")
        if cs.call_index <= prev:
            raise SchemaViolation("call_index not strictly increasing")
        prev = cs.call_index
    for fid, entries in bundle.traces.items():
        prev = -1
        for e in entries:
            if e.seq_no <= prev:
                raise SchemaViolation(f"trace {fid}: seq_no not strictly increasing")
            prev = e.seq_no
            for a, w in list(e.reads) + list(e.writes):
                if w not in _WIDTHS:
                    raise SchemaViolation(f"trace {fid} seq {e.seq_no}: width {w}")
            touched = {a for a, _ in e.reads} | {a for a, _ in e.writes}
            for op in e.operands:
                if op.kind == "mem":
                    if op.addr is None:
                        raise SchemaViolation(
                            f"trace {fid} seq {e.seq_no}: memory operand lacks address")
                    if op.addr not in touched:
                        raise SchemaViolation(
                            f"trace {fid} seq {e.seq_no}: operand address "
                            f"0x{op.addr:x} not in reads/writes")
    regions = sorted(bundle.snapshot.regions, key=lambda r: r[0])
    for (b0, blob0), (b1, _) in zip(regions, regions[1:]):
        if b0 + len(blob0) > b1:
            raise SchemaViolation("snapshot regions overlap")
    if bundle.provenance_truth is not None and \
            bundle.provenance_truth not in PROVENANCE_NAMES:
        raise SchemaViolation(f"bad provenance_truth {bundle.provenance_truth!r}")


# ---- JSON encoding ----

def _operand_to_json(op: Operand) -> dict:
    if op.kind == "reg":
        return {"k": "reg", "r": op.reg}
    if op.kind == "imm":
        return {"k": "imm", "v": op.value}
    return {"k": "mem", "base": op.base, "index": op.index, "scale": op.scale,
            "disp": op.disp, "addr": op.addr, "w": op.width}


def _operand_from_json(d: dict, where: str) -> Operand:
    try:
        k = d["k"]
        if k == "reg":
            return Operand(kind="reg", reg=d["r"])
        if k == "imm":
            return Operand(kind="imm", value=int(d["v"]))
        if k == "mem":
            return Operand(kind="mem", base=d.get("base"), index=d.get("index"),
                           scale=int(d.get("scale", 1)), disp=int(d.get("disp", 0)),
                           addr=int(d["addr"]), width=int(d["w"]))
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaViolation(f"bad operand: {e}", where) from e
    raise SchemaViolation(f"bad operand kind {k!r}", where)


def _entry_to_json(e: TraceEntry) -> dict:
    return {"seq": e.seq_no, "op": e.opcode,
            "operands": [_operand_to_json(o) for o in e.operands],
            "reads": [list(t) for t in e.reads],
            "writes": [list(t) for t in e.writes],
            "regs": e.reg_values}


def _entry_from_json(d: dict, path: str, line: int) -> TraceEntry:
    try:
        return TraceEntry(
            seq_no=int(d["seq"]), opcode=str(d["op"]),
            operands=[_operand_from_json(o, path) for o in d["operands"]],
            reads=[(int(a), int(w)) for a, w in d["reads"]],
            writes=[(int(a), int(w)) for a, w in d["writes"]],
            reg_values={str(k): int(v) for k, v in d.get("regs", {}).items()})
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaViolation(f"bad trace entry: {e}", path, line) from e


def _dump_json(obj, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_json(path: str):
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaViolation(f"invalid JSON: {e}", path) from e


def write_bundle(bundle: TraceBundle, path: str) -> None:
    validate_bundle(bundle)
    os.makedirs(path, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION}
    if bundle.provenance_truth is not None:
        manifest["provenance_truth"] = bundle.provenance_truth
    _dump_json(manifest, os.path.join(path, "manifest.json"))
    _dump_json([{"func_id": f.func_id, "name": f.name,
                 "entry_address": f.entry_address,
                 "opcode_sequence": f.opcode_sequence}
                for f in bundle.functions], os.path.join(path, "functions.json"))
    _dump_json([{"call_index": c.call_index, "func_id": c.func_id, "args": c.args}
                for c in bundle.callsites], os.path.join(path, "callsites.json"))
    for fid in sorted(bundle.traces):
        with open(os.path.join(path, f"trace_{fid}.jsonl"), "w") as fh:
            for e in bundle.traces[fid]:
                fh.write(json.dumps(_entry_to_json(e), sort_keys=True) + "\n")
    for fid in sorted(bundle.access_logs):
        log = bundle.access_logs[fid]
        _dump_json({"func_id": log.func_id,
                    "reads": [list(t) for t in sorted(log.reads)],
                    "writes": [list(t) for t in sorted(log.writes)]},
                   os.path.join(path, f"access_{fid}.json"))
    blob = bytearray()
    index = []
    for base, data in sorted(bundle.snapshot.regions, key=lambda r: r[0]):
        index.append({"base": base, "offset": len(blob), "size": len(data)})
        blob.extend(data)
    with open(os.path.join(path, "snapshot.bin"), "wb") as fh:
        fh.write(bytes(blob))
    _dump_json(index, os.path.join(path, "snapshot.idx"))


def read_bundle(path: str) -> TraceBundle:
    manifest = _load_json(os.path.join(path, "manifest.json"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SchemaViolation(
            f"unsupported format_version {manifest.get('format_version')!r}",
            os.path.join(path, "manifest.json"))
    functions = []
    for d in _load_json(os.path.join(path, "functions.json")):
        try:
            functions.append(AssemblyFunction(
                func_id=int(d["func_id"]), name=str(d["name"]),
                opcode_sequence=[str(m) for m in d["opcode_sequence"]],
                entry_address=int(d["entry_address"])))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaViolation(f"bad function record: {e}",
                                  os.path.join(path, "functions.json")) from e
    callsites = []
    for d in _load_json(os.path.join(path, "callsites.json")):
        try:
            callsites.append(CallsiteRecord(
                call_index=int(d["call_index"]), func_id=int(d["func_id"]),
                args=[int(a) for a in d["args"]]))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaViolation(f"bad callsite record: {e}",
                                  os.path.join(path, "callsites.json")) from e
    traces: dict[int, list[TraceEntry]] = {}
    access: dict[int, MemAccessLog] = {}
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if name.startswith("trace_") and name.endswith(".jsonl"):
            fid = int(name[len("trace_"):-len(".jsonl")])
            entries = []
            with open(full) as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        d = json.loads(line)
                    except json.JSONDecodeError as e:
                        raise SchemaViolation(f"invalid JSON: {e}", full, lineno) from e
                    entries.append(_entry_from_json(d, full, lineno))
            traces[fid] = entries
        elif name.startswith("access_") and name.endswith(".json"):
            fid = int(name[len("access_"):-len(".json")])
            d = _load_json(full)
            try:
                access[fid] = MemAccessLog(
                    func_id=int(d["func_id"]),
                    reads={(int(a), int(w)) for a, w in d["reads"]},
                    writes={(int(a), int(w)) for a, w in d["writes"]})
            except (KeyError, TypeError, ValueError) as e:
                raise SchemaViolation(f"bad access log: {e}", full) from e
    idx_path = os.path.join(path, "snapshot.idx")
    bin_path = os.path.join(path, "snapshot.bin")
    if not os.path.exists(bin_path):
        raise MissingFile(bin_path)
    with open(bin_path, "rb") as fh:
        blob = fh.read()
    regions = []
    for d in _load_json(idx_path):
        try:
            base, off, size = int(d["base"]), int(d["offset"]), int(d["size"])
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaViolation(f"bad snapshot index: {e}", idx_path) from e
        if off + size > len(blob):
            raise SchemaViolation("snapshot index exceeds snapshot.bin", idx_path)
        regions.append((base, blob[off:off + size]))
    bundle = TraceBundle(functions=functions, traces=traces, callsites=callsites,
                         access_logs=access, snapshot=MemorySnapshot(regions),
                         provenance_truth=manifest.get("provenance_truth"))
    validate_bundle(bundle)
    return bundle
