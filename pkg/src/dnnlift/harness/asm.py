"""Trace writer: builds TraceEntry sequences while executing them.

Every emitted instruction is immediately stepped through the concrete
machine so register state stays consistent and stores can be checked
against the reference buffer values.  Loads of addresses outside the
written set come from the bundle-wide memory image.
"""
from __future__ import annotations

import numpy as np

from .. import isa
from ..bundle import Operand, TraceEntry

_BASE_REGS = ("rdi", "rsi", "rdx", "rcx", "r8", "r9")


class TraceWriter:
    def __init__(self, image: dict[int, float]):
        self.image = image
        self.entries: list[TraceEntry] = []
        self.machine = isa.Machine(isa.ConcreteALU(self._read_image))
        self._seq = 0

    def _read_image(self, addr: int) -> float:
        try:
            return self.image[addr]
        except KeyError:
            raise KeyError(f"emitter read of unmapped address 0x{addr:x}") from None

    def emit(self, opcode: str, operands: list[Operand]) -> TraceEntry:
        reads, writes, regs = [], [], {}
        for pos, op in enumerate(operands):
            if op.kind != "mem":
                continue
            (writes if pos == 0 else reads).append((op.addr, op.width))
            regs[op.base or _BASE_REGS[pos]] = op.addr - op.disp
        entry = TraceEntry(seq_no=self._seq, opcode=opcode, operands=operands,
                           reads=reads, writes=writes, reg_values=regs)
        self._seq += 1
        self.machine.step(entry)
        self.entries.append(entry)
        return entry

    # -- convenience forms; `base` picks the synthetic pointer register --

    def load(self, opcode: str, reg: str, addr: int, width: int = 4, base: str = "rsi"):
        self.emit(opcode, [Operand.r(reg), Operand.m(addr, width, base=base)])

    def store(self, opcode: str, addr: int, reg: str, width: int = 4,
              base: str = "rdi", expect=None):
        self.emit(opcode, [Operand.m(addr, width, base=base), Operand.r(reg)])
        if expect is not None:
            for lane, ref in enumerate(np.atleast_1d(np.asarray(expect, dtype=np.float32))):
                self._check(addr + 4 * lane, float(ref))

    def _check(self, addr: int, ref: float):
        got = self.machine.mem[addr]
        if not (got == ref or abs(got - ref) <= 1e-5 * max(1.0, abs(ref))):
            raise AssertionError(
                f"store mismatch at 0x{addr:x}: emitted {got!r}, expected {ref!r}")

    def rr(self, opcode: str, dst: str, src: str):
        self.emit(opcode, [Operand.r(dst), Operand.r(src)])

    def rm(self, opcode: str, dst: str, addr: int, width: int = 4, base: str = "rdx"):
        self.emit(opcode, [Operand.r(dst), Operand.m(addr, width, base=base)])

    def rrr(self, opcode: str, dst: str, a: str, b: str):
        self.emit(opcode, [Operand.r(dst), Operand.r(a), Operand.r(b)])

    def rrm(self, opcode: str, dst: str, a: str, addr: int, width: int, base: str = "rdx"):
        self.emit(opcode, [Operand.r(dst), Operand.r(a), Operand.m(addr, width, base=base)])

    def zero(self, reg: str, avx: bool = False):
        if avx:
            self.emit("vxorps", [Operand.r(reg), Operand.r(reg), Operand.r(reg)])
        else:
            self.emit("xorps", [Operand.r(reg), Operand.r(reg)])

    def extract(self, addr: int, reg: str, lane: int, base: str = "rdi",
                expect: float | None = None):
        self.emit("vextractps", [Operand.m(addr, 4, base=base), Operand.r(reg),
                                 Operand.i(lane)])
        if expect is not None:
            self._check(addr, float(np.float32(expect)))
