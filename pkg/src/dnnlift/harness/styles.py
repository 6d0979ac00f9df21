"""Codegen style descriptors for the synthetic harness."""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import SchemaViolation

STYLE_NAMES = ("tvm-o0", "tvm-o3", "glow")


@dataclass(frozen=True)
class CodegenStyle:
    name: str
    fusion_enabled: bool
    layout_opt: str      # "none" | "glow5d" | "tvm6d"
    vector_width: int    # lanes: 1 scalar, 4 xmm, 8 ymm
    glow_a: int = 8      # the fixed lane count of the 5-d blocking

    def __post_init__(self):
        if self.name not in STYLE_NAMES:
            raise SchemaViolation(f"unknown style {self.name!r}")
        if self.name == "tvm-o0" and (self.fusion_enabled or self.layout_opt != "none"):
            raise SchemaViolation("tvm-o0 implies no fusion and no layout opt")
        if self.name == "glow" and self.layout_opt not in ("none", "glow5d"):
            raise SchemaViolation("glow supports only the 5-d blocking")
        if self.name == "tvm-o3" and self.layout_opt not in ("none", "tvm6d"):
            raise SchemaViolation("tvm-o3 supports only the 6-d blocking")
        if self.vector_width not in (1, 4, 8):
            raise SchemaViolation(f"bad vector_width {self.vector_width}")

    @property
    def is_tvm(self) -> bool:
        return self.name.startswith("tvm")


def style_named(name: str) -> CodegenStyle:
    if name == "tvm-o0":
        return CodegenStyle("tvm-o0", fusion_enabled=False, layout_opt="none", vector_width=1)
    if name == "tvm-o3":
        return CodegenStyle("tvm-o3", fusion_enabled=True, layout_opt="tvm6d", vector_width=8)
    if name == "glow":
        return CodegenStyle("glow", fusion_enabled=True, layout_opt="glow5d", vector_width=8)
    raise SchemaViolation(f"unknown style {name!r}; have {STYLE_NAMES}")
