"""Modeled x86 SSE/AVX floating-point instruction subset.

One semantics table drives four consumers: the synthetic codegen harness
(emission + concrete value tracking), backward taint (byte-lane
decomposition), the symbolic engine, and concrete trace replay.  Anything
outside this table is a hard ``UnmodeledOpcode`` -- silent gaps would corrupt
constraints invisibly.

Conventions: FP memory cells are 4-byte f32 granules; vector registers are
modeled as 8 independent 4-byte lanes (xmm = lanes 0-3, ymm = lanes 0-7).
Loads of never-written addresses introduce fresh leaves via the value domain.
CPU flags are not modeled.  ``expss``/``vexpps`` stand in for the vectorized
exp() runtime call real compilers emit for Softmax-style operators.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import UnmodeledOpcode

REG_LANES = 8
REG_BYTES = REG_LANES * 4

# taint key space: memory bytes keep their address; register bytes live high
REG_KEY_BASE = 1 << 60

_ARITH2 = {"addss": "add", "subss": "sub", "mulss": "mul", "divss": "div",
           "maxss": "max", "minss": "min"}
_UNARY2 = {"sqrtss": "sqrt", "expss": "exp"}
_ARITH3 = {"vaddps": "add", "vsubps": "sub", "vmulps": "mul", "vdivps": "div",
           "vmaxps": "max", "vminps": "min"}
_UNARY3 = {"vsqrtps": "sqrt", "vexpps": "exp"}
_MOVS = {"movss", "movups", "movaps", "vmovups", "vmovaps"}
_ZEROS = {"xorps", "vxorps"}

MODELED_OPCODES = (set(_ARITH2) | set(_UNARY2) | set(_ARITH3) | set(_UNARY3)
                   | _MOVS | _ZEROS | {"vbroadcastss", "vextractps", "vfmadd231ps"})


def nlanes(reg: str) -> int:
    return 8 if reg.startswith("ymm") else 4


def reg_slot(reg: str) -> str:
    """Canonical register-file key; xmmN and ymmN alias the same slot."""
    if reg.startswith(("xmm", "ymm")):
        return "v" + reg[3:]
    return reg


class ConcreteALU:
    """float64 arithmetic over f32 memory; rounds to f32 at stores."""

    def __init__(self, read_mem):
        self._read_mem = read_mem  # addr -> float (f32 value of a 4-byte cell)

    def const(self, x):
        return float(x)

    def load(self, addr):
        return float(self._read_mem(addr))

    def store_cast(self, v):
        return float(np.float32(v))

    def apply(self, op, *args):
        if op == "add":
            return args[0] + args[1]
        if op == "sub":
            return args[0] - args[1]
        if op == "mul":
            return args[0] * args[1]
        if op == "div":
            return args[0] / args[1]
        if op == "max":
            return max(args)
        if op == "min":
            return min(args)
        if op == "sqrt":
            return math.sqrt(args[0])
        if op == "exp":
            return math.exp(args[0])
        raise AssertionError(op)


class SymbolicALU:
    """Expression-tree domain; loads of unknown cells become Cell leaves."""

    def __init__(self):
        from . import exprs
        self._x = exprs

    def const(self, x):
        return self._x.Const(float(x))

    def load(self, addr):
        return self._x.Cell(addr, 4)

    def store_cast(self, v):
        return v

    def apply(self, op, *args):
        return self._x.App(op, tuple(args))


class Machine:
    """Register-file + memory interpreter over a pluggable value domain."""

    def __init__(self, alu):
        self.alu = alu
        self.regs: dict[str, list] = {}
        self.mem: dict[int, object] = {}

    def _reg(self, name):
        slot = reg_slot(name)
        if slot not in self.regs:
            self.regs[slot] = [self.alu.const(0.0)] * REG_LANES
        return self.regs[slot]

    def read_cell(self, addr):
        if addr in self.mem:
            return self.mem[addr]
        return self.alu.load(addr)

    def _write_cell(self, addr, v):
        self.mem[addr] = self.alu.store_cast(v)

    def _src_lane(self, operand, lane):
        if operand.kind == "reg":
            return self._reg(operand.reg)[lane]
        return self.read_cell(operand.addr + 4 * lane)

    def step(self, entry):
        op = entry.opcode
        ops = entry.operands
        if op in _MOVS:
            scalar = op == "movss"
            dst, src = ops
            if dst.kind == "mem":
                lanes = 1 if scalar else dst.width // 4
                reg = self._reg(src.reg)
                for i in range(lanes):
                    self._write_cell(dst.addr + 4 * i, reg[i])
            else:
                reg = self._reg(dst.reg)
                if src.kind == "mem":
                    lanes = 1 if scalar else src.width // 4
                    for i in range(lanes):
                        reg[i] = self.read_cell(src.addr + 4 * i)
                    for i in range(lanes, REG_LANES):
                        reg[i] = self.alu.const(0.0)
                else:
                    if scalar:
                        reg[0] = self._reg(src.reg)[0]  # upper lanes preserved
                    else:
                        sreg = self._reg(src.reg)
                        lanes = nlanes(dst.reg)
                        for i in range(lanes):
                            reg[i] = sreg[i]
                        for i in range(lanes, REG_LANES):
                            reg[i] = self.alu.const(0.0)
        elif op == "vbroadcastss":
            dst, src = ops
            v = self.read_cell(src.addr) if src.kind == "mem" else self._reg(src.reg)[0]
            reg = self._reg(dst.reg)
            for i in range(nlanes(dst.reg)):
                reg[i] = v
            for i in range(nlanes(dst.reg), REG_LANES):
                reg[i] = self.alu.const(0.0)
        elif op == "vextractps":
            dst, src, imm = ops
            self._write_cell(dst.addr, self._reg(src.reg)[imm.value])
        elif op in _ARITH2:
            dst, src = ops
            reg = self._reg(dst.reg)
            reg[0] = self.alu.apply(_ARITH2[op], reg[0], self._src_lane(src, 0))
        elif op in _UNARY2:
            dst, src = ops
            self._reg(dst.reg)[0] = self.alu.apply(_UNARY2[op], self._src_lane(src, 0))
        elif op in _ZEROS:
            names = {o.reg for o in ops if o.kind == "reg"}
            if len(names) != 1 or any(o.kind != "reg" for o in ops):
                raise UnmodeledOpcode(f"{op} (non-zeroing form)", entry.seq_no)
            reg = self._reg(ops[0].reg)
            for i in range(REG_LANES):
                reg[i] = self.alu.const(0.0)
        elif op in _ARITH3:
            dst, a, b = ops
            areg = self._reg(a.reg)
            out = self._reg(dst.reg)
            n = nlanes(dst.reg)
            vals = [self.alu.apply(_ARITH3[op], areg[i], self._src_lane(b, i))
                    for i in range(n)]
            for i in range(n):
                out[i] = vals[i]
            for i in range(n, REG_LANES):
                out[i] = self.alu.const(0.0)
        elif op in _UNARY3:
            dst, a = ops
            out = self._reg(dst.reg)
            n = nlanes(dst.reg)
            vals = [self.alu.apply(_UNARY3[op], self._src_lane(a, i)) for i in range(n)]
            for i in range(n):
                out[i] = vals[i]
            for i in range(n, REG_LANES):
                out[i] = self.alu.const(0.0)
        elif op == "vfmadd231ps":
            dst, a, b = ops
            out = self._reg(dst.reg)
            areg = self._reg(a.reg)
            n = nlanes(dst.reg)
            vals = [self.alu.apply("add", out[i],
                                   self.alu.apply("mul", areg[i], self._src_lane(b, i)))
                    for i in range(n)]
            for i in range(n):
                out[i] = vals[i]
        else:
            raise UnmodeledOpcode(op, entry.seq_no)


def _reg_atom(intern, reg, byte, size):
    key = REG_KEY_BASE + intern.setdefault(reg_slot(reg), len(intern)) * REG_BYTES
    return (key + byte, size)


def taint_lanes(entry, intern):
    """Byte-granular dataflow lanes: list of (write_atoms, read_atoms).

    A lane whose written bytes are tainted untaints them and taints its read
    bytes; lanes with empty reads kill taint (constant writes).  Atoms are
    (start_key, n_bytes) in the shared taint key space.
    """
    op = entry.opcode
    ops = entry.operands
    lanes = []
    if op in _MOVS:
        scalar = op == "movss"
        dst, src = ops
        if dst.kind == "mem":
            n = 1 if scalar else dst.width // 4
            for i in range(n):
                lanes.append(([(dst.addr + 4 * i, 4)], [_reg_atom(intern, src.reg, 4 * i, 4)]))
        elif src.kind == "mem":
            n = 1 if scalar else src.width // 4
            for i in range(n):
                lanes.append(([_reg_atom(intern, dst.reg, 4 * i, 4)], [(src.addr + 4 * i, 4)]))
            lanes.append(([_reg_atom(intern, dst.reg, 4 * n, REG_BYTES - 4 * n)], []))
        else:
            if scalar:
                lanes.append(([_reg_atom(intern, dst.reg, 0, 4)],
                              [_reg_atom(intern, src.reg, 0, 4)]))
            else:
                n = nlanes(dst.reg)
                for i in range(n):
                    lanes.append(([_reg_atom(intern, dst.reg, 4 * i, 4)],
                                  [_reg_atom(intern, src.reg, 4 * i, 4)]))
                lanes.append(([_reg_atom(intern, dst.reg, 4 * n, REG_BYTES - 4 * n)], []))
    elif op == "vbroadcastss":
        dst, src = ops
        rd = [(src.addr, 4)] if src.kind == "mem" else [_reg_atom(intern, src.reg, 0, 4)]
        for i in range(nlanes(dst.reg)):
            lanes.append(([_reg_atom(intern, dst.reg, 4 * i, 4)], rd))
        n = nlanes(dst.reg)
        lanes.append(([_reg_atom(intern, dst.reg, 4 * n, REG_BYTES - 4 * n)], []))
    elif op == "vextractps":
        dst, src, imm = ops
        lanes.append(([(dst.addr, 4)], [_reg_atom(intern, src.reg, 4 * imm.value, 4)]))
    elif op in _ARITH2:
        dst, src = ops
        rd = [_reg_atom(intern, dst.reg, 0, 4)]
        rd.append((src.addr, 4) if src.kind == "mem" else _reg_atom(intern, src.reg, 0, 4))
        lanes.append(([_reg_atom(intern, dst.reg, 0, 4)], rd))
    elif op in _UNARY2:
        dst, src = ops
        rd = [(src.addr, 4)] if src.kind == "mem" else [_reg_atom(intern, src.reg, 0, 4)]
        lanes.append(([_reg_atom(intern, dst.reg, 0, 4)], rd))
    elif op in _ZEROS:
        lanes.append(([_reg_atom(intern, ops[0].reg, 0, REG_BYTES)], []))
    elif op in _ARITH3 or op == "vfmadd231ps":
        dst, a, b = ops
        fma = op == "vfmadd231ps"
        n = nlanes(dst.reg)
        for i in range(n):
            rd = [_reg_atom(intern, a.reg, 4 * i, 4)]
            rd.append((b.addr + 4 * i, 4) if b.kind == "mem"
                      else _reg_atom(intern, b.reg, 4 * i, 4))
            if fma:
                rd.append(_reg_atom(intern, dst.reg, 4 * i, 4))
            lanes.append(([_reg_atom(intern, dst.reg, 4 * i, 4)], rd))
        if not fma:
            lanes.append(([_reg_atom(intern, dst.reg, 4 * n, REG_BYTES - 4 * n)], []))
    elif op in _UNARY3:
        dst, a = ops
        n = nlanes(dst.reg)
        for i in range(n):
            rd = [(a.addr + 4 * i, 4) if a.kind == "mem"
                  else _reg_atom(intern, a.reg, 4 * i, 4)]
            lanes.append(([_reg_atom(intern, dst.reg, 4 * i, 4)], rd))
        lanes.append(([_reg_atom(intern, dst.reg, 4 * n, REG_BYTES - 4 * n)], []))
    else:
        raise UnmodeledOpcode(op, entry.seq_no)
    return lanes
