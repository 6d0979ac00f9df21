"""Exception hierarchy shared across the pipeline stages."""


class DnnliftError(Exception):
    """Base class for all errors raised by this package."""


# ---- bundle I/O ----

class MissingFile(DnnliftError):
    pass


class SchemaViolation(DnnliftError):
    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class DanglingFuncId(DnnliftError):
    pass


class IoError(DnnliftError):
    pass


# ---- harness ----

class UnsupportedOperator(DnnliftError):
    def __init__(self, style, kind):
        super().__init__(f"operator {kind!r} not supported by codegen style {style!r}")
        self.style = style
        self.kind = kind


# ---- classifier ----

class InsufficientLabels(DnnliftError):
    pass


# ---- topology ----

class MissingSignature(DnnliftError):
    pass


class CycleDetected(DnnliftError):
    pass


# ---- taint / symbolic execution ----

class EmptyTrace(DnnliftError):
    pass


class UnmodeledOpcode(DnnliftError):
    def __init__(self, mnemonic, seq_no=None):
        at = f" at seq {seq_no}" if seq_no is not None else ""
        super().__init__(f"unmodeled opcode {mnemonic!r}{at}")
        self.mnemonic = mnemonic
        self.seq_no = seq_no


class UnresolvedCell(DnnliftError):
    def __init__(self, address):
        super().__init__(f"memory cell 0x{address:x} lies in no argument region")
        self.address = address


class FragmentedRegion(Warning):
    """Access cluster has internal gaps wider than one vector register."""


# ---- dimension / parameter recovery ----

class NonIntegerDim(DnnliftError):
    pass


class DegenerateOutput(DnnliftError):
    pass


class ZeroMuls(DnnliftError):
    pass


class IdenticalConstraints(DnnliftError):
    pass


class NoContiguousRun(DnnliftError):
    pass


class MissingRole(DnnliftError):
    pass


class LayoutUnrecognized(DnnliftError):
    pass


class RegionOutOfSnapshot(DnnliftError):
    pass


class SizeMismatch(DnnliftError):
    pass


# ---- model core ----

class ShapeMismatch(DnnliftError):
    def __init__(self, op_id, message):
        super().__init__(f"{op_id}: {message}")
        self.op_id = op_id


class TensorSizeMismatch(DnnliftError):
    pass
