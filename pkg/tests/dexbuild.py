"""Hand-assembled DEX fixtures and faithful smali dumps.

The template table below is written out from the published Dalvik opcode
list, independently of the production table, so fixture expectations never
depend on the code under test. Each fixture carries its instruction
listing; expected histograms are derived from the listing alone.
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

# mnemonic -> (opcode, width in 16-bit units, smali operand text)
TEMPLATES = {
    "nop": (0x00, 1, ""),
    "move": (0x01, 1, "v0, v1"),
    "move-wide/from16": (0x05, 2, "v0, v18"),
    "move-object": (0x07, 1, "v1, v2"),
    "move-result": (0x0A, 1, "v0"),
    "move-exception": (0x0D, 1, "v0"),
    "return-void": (0x0E, 1, ""),
    "return": (0x0F, 1, "v0"),
    "return-object": (0x11, 1, "v0"),
    "const/4": (0x12, 1, "v0, 0x1"),
    "const/16": (0x13, 2, "v0, 0x10"),
    "const": (0x14, 3, "v0, 0x10000"),
    "const-wide": (0x18, 5, "v0, 0x100000000L"),
    "const-string": (0x1A, 2, 'v0, "fixture"'),
    "const-class": (0x1C, 2, "v0, Ljava/lang/Object;"),
    "check-cast": (0x1F, 2, "v0, Ljava/lang/String;"),
    "new-instance": (0x22, 2, "v0, Ljava/lang/Object;"),
    "fill-array-data": (0x26, 3, "v0, :array_0"),
    "goto": (0x28, 1, ":goto_0"),
    "packed-switch": (0x2B, 3, "v0, :pswitch_data_0"),
    "sparse-switch": (0x2C, 3, "v0, :sswitch_data_0"),
    "cmp-long": (0x31, 2, "v0, v2, v4"),
    "if-eq": (0x32, 2, "v0, v1, :cond_0"),
    "if-eqz": (0x38, 2, "v0, :cond_0"),
    "aget": (0x44, 2, "v0, v1, v2"),
    "aput-object": (0x4D, 2, "v0, v1, v2"),
    "iget": (0x52, 2, "v0, v1, Lcom/fixture/C0;->f:I"),
    "iput-object": (0x5B, 2, "v0, v1, Lcom/fixture/C0;->o:Ljava/lang/Object;"),
    "sget-object": (0x62, 2, "v0, Lcom/fixture/C0;->s:Ljava/lang/String;"),
    "sput": (0x67, 2, "v0, Lcom/fixture/C0;->n:I"),
    "invoke-virtual": (0x6E, 3, "{v0, v1}, Lcom/fixture/C0;->m(I)V"),
    "invoke-static": (0x71, 3, "{v0}, Lcom/fixture/C0;->s(I)V"),
    "invoke-virtual/range": (0x74, 3, "{v0 .. v5}, Lcom/fixture/C0;->r(IIIII)V"),
    "neg-int": (0x7B, 1, "v0, v1"),
    "int-to-long": (0x81, 1, "v0, v2"),
    "add-int": (0x90, 2, "v0, v1, v2"),
    "mul-int": (0x92, 2, "v0, v1, v2"),
    "div-float": (0xA9, 2, "v0, v1, v2"),
    "add-int/2addr": (0xB0, 1, "v0, v1"),
    "add-int/lit16": (0xD0, 2, "v0, v1, 0x10"),
    "mul-int/lit8": (0xDA, 2, "v0, v1, 0x2"),
    "ushr-int/lit8": (0xE2, 2, "v0, v1, 0x3"),
}

# Opcodes safe to draw at random (no branch payloads to fix up).
RANDOM_POOL = [name for name in TEMPLATES
               if name not in ("packed-switch", "sparse-switch", "fill-array-data", "goto")]


@dataclass
class MethodRecipe:
    """One method's instruction stream plus its smali rendering and the
    opcode counts implied by the listing."""

    units: list[int] = field(default_factory=list)
    smali_lines: list[str] = field(default_factory=list)
    counts: Counter = field(default_factory=Counter)


def _emit(recipe: MethodRecipe, mnemonic: str, rng=None, extra_units=None) -> None:
    opcode, width, operands = TEMPLATES[mnemonic]
    high = int(rng.integers(0, 256)) if rng is not None and mnemonic != "nop" else 0
    units = [opcode | (high << 8)]
    if extra_units is not None:
        units.extend(extra_units)
    else:
        for _ in range(width - 1):
            units.append(int(rng.integers(0, 0x10000)) if rng is not None else 0)
    assert len(units) == width, mnemonic
    recipe.units.extend(units)
    recipe.smali_lines.append(f"{mnemonic} {operands}".rstrip())
    recipe.counts[opcode] += 1


def simple_method(rng, n_instructions: int) -> MethodRecipe:
    recipe = MethodRecipe()
    names = list(RANDOM_POOL)
    for _ in range(n_instructions):
        _emit(recipe, names[int(rng.integers(0, len(names)))], rng=rng)
    _emit(recipe, "return-void")
    return recipe


def switch_method(rng) -> MethodRecipe:
    """packed-switch, sparse-switch and fill-array-data with their payload
    tables; payloads are 4-byte aligned and contribute no opcode counts."""
    recipe = MethodRecipe()
    _emit(recipe, "const/4", rng=rng)
    packed_pos = len(recipe.units)
    _emit(recipe, "packed-switch", extra_units=[0, 0])
    sparse_pos = len(recipe.units)
    _emit(recipe, "sparse-switch", extra_units=[0, 0])
    array_pos = len(recipe.units)
    _emit(recipe, "fill-array-data", extra_units=[0, 0])
    _emit(recipe, "return-void")

    def _pad_to_even():
        if len(recipe.units) % 2:
            _emit(recipe, "nop")

    n_targets = int(rng.integers(1, 4))
    _pad_to_even()
    packed_payload = len(recipe.units)
    recipe.units.extend([0x0100, n_targets, 0, 0])
    recipe.units.extend([0, 0] * n_targets)
    recipe.smali_lines.append(":pswitch_data_0")
    recipe.smali_lines.append(".packed-switch 0x0")
    for t in range(n_targets):
        recipe.smali_lines.append(f"    :pswitch_{t}")
    recipe.smali_lines.append(".end packed-switch")

    n_keys = int(rng.integers(1, 4))
    _pad_to_even()
    sparse_payload = len(recipe.units)
    recipe.units.extend([0x0200, n_keys])
    recipe.units.extend([0, 0] * n_keys)   # keys
    recipe.units.extend([0, 0] * n_keys)   # targets
    recipe.smali_lines.append(":sswitch_data_0")
    recipe.smali_lines.append(".sparse-switch")
    for k in range(n_keys):
        recipe.smali_lines.append(f"    0x{k:x} -> :sswitch_{k}")
    recipe.smali_lines.append(".end sparse-switch")

    n_bytes = 2 * int(rng.integers(1, 5))  # even so no trailing pad unit
    _pad_to_even()
    array_payload = len(recipe.units)
    recipe.units.extend([0x0300, 1, n_bytes, 0])
    recipe.units.extend([0] * (n_bytes // 2))
    recipe.smali_lines.append(":array_0")
    recipe.smali_lines.append(".array-data 1")
    for b in range(n_bytes):
        recipe.smali_lines.append(f"    0x{b:x}t")
    recipe.smali_lines.append(".end array-data")

    for pos, payload in ((packed_pos, packed_payload), (sparse_pos, sparse_payload),
                         (array_pos, array_payload)):
        offset = payload - pos
        recipe.units[pos + 1] = offset & 0xFFFF
        recipe.units[pos + 2] = (offset >> 16) & 0xFFFF
    return recipe


def expected_histogram(classes: list[list[MethodRecipe]]) -> np.ndarray:
    counts = np.zeros(256, dtype=np.int64)
    for methods in classes:
        for recipe in methods:
            for opcode, n in recipe.counts.items():
                counts[opcode] += n
    return counts


def _uleb128(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def build_dex(classes: list[list[MethodRecipe]], version: bytes = b"035") -> bytes:
    """Assemble a structurally valid DEX: header, class_defs, code items,
    class_data items and a minimal map. Id tables are empty (the opcode
    walk never dereferences them)."""
    n_classes = len(classes)
    class_defs_off = 112
    offset = class_defs_off + 32 * n_classes

    code_blob = bytearray()
    code_offsets: list[list[int]] = []
    for methods in classes:
        offs = []
        for recipe in methods:
            while (offset + len(code_blob)) % 4:
                code_blob.append(0)
            offs.append(offset + len(code_blob))
            code_blob += struct.pack("<4H2I", 8, 1, 2, 0, 0, len(recipe.units))
            for unit in recipe.units:
                code_blob += struct.pack("<H", unit & 0xFFFF)
        code_offsets.append(offs)
    class_data_base = offset + len(code_blob)

    data_blob = bytearray()
    class_data_offs = []
    method_counter = 0
    for ci, methods in enumerate(classes):
        class_data_offs.append(class_data_base + len(data_blob))
        data_blob += _uleb128(0)             # static fields
        data_blob += _uleb128(0)             # instance fields
        data_blob += _uleb128(len(methods))  # direct methods
        data_blob += _uleb128(0)             # virtual methods
        for mi in range(len(methods)):
            idx_diff = method_counter if mi == 0 else 1
            method_counter += 1
            data_blob += _uleb128(idx_diff)
            data_blob += _uleb128(0x1)       # ACC_PUBLIC
            data_blob += _uleb128(code_offsets[ci][mi])

    map_off = class_data_base + len(data_blob)
    while map_off % 4:
        data_blob.append(0)
        map_off += 1
    # map_list with a single header_item entry
    map_blob = struct.pack("<I", 1) + struct.pack("<2H2I", 0x0000, 0, 1, 0)

    file_size = map_off + len(map_blob)
    header = bytearray(112)
    header[0:8] = b"dex\n" + version + b"\x00"
    struct.pack_into("<I", header, 32, file_size)
    struct.pack_into("<I", header, 36, 0x70)
    struct.pack_into("<I", header, 40, 0x12345678)
    struct.pack_into("<2I", header, 44, 0, 0)            # link
    struct.pack_into("<I", header, 52, map_off)
    struct.pack_into("<2I", header, 56, 0, 0)            # string_ids
    struct.pack_into("<2I", header, 64, 0, 0)            # type_ids
    struct.pack_into("<2I", header, 72, 0, 0)            # proto_ids
    struct.pack_into("<2I", header, 80, 0, 0)            # field_ids
    struct.pack_into("<2I", header, 88, 0, 0)            # method_ids
    struct.pack_into("<2I", header, 96, n_classes, class_defs_off if n_classes else 0)
    struct.pack_into("<2I", header, 104, file_size - offset, offset)  # data section

    class_defs = bytearray()
    for ci in range(n_classes):
        class_defs += struct.pack("<8I", ci, 0x1, 0, 0, 0xFFFFFFFF, 0,
                                  class_data_offs[ci], 0)

    dex = bytearray(header) + class_defs + code_blob + data_blob + map_blob
    assert len(dex) == file_size
    signature = hashlib.sha1(dex[32:]).digest()
    dex[12:32] = signature
    struct.pack_into("<I", dex, 8, zlib.adler32(bytes(dex[12:])))
    return bytes(dex)


def smali_files(classes: list[list[MethodRecipe]], crlf: bool = False) -> dict[str, str]:
    """Faithful smali rendering: one file per class under com/fixture/."""
    eol = "\r\n" if crlf else "\n"
    files = {}
    for ci, methods in enumerate(classes):
        lines = [
            f"# fixture class C{ci}",
            f".class public Lcom/fixture/C{ci};",
            ".super Ljava/lang/Object;",
            f'.source "C{ci}.java"',
            "",
        ]
        for mi, recipe in enumerate(methods):
            lines.append(f".method public m{mi}()V")
            lines.append("    .registers 8")
            lines.append("    .prologue")
            for ins_line in recipe.smali_lines:
                lines.append(f"    {ins_line}")
            lines.append(".end method")
            lines.append("")
        files[f"com/fixture/C{ci}.smali"] = eol.join(lines) + eol
    return files


@dataclass
class FixtureApp:
    classes: list[list[MethodRecipe]]
    dex: bytes
    smali: dict[str, str]
    expected: np.ndarray


def make_fixture_app(seed: int, n_classes: int = 2, methods_per_class: int = 3,
                     instructions: int = 25, include_switch: bool = True,
                     crlf: bool = False, version: bytes = b"035") -> FixtureApp:
    rng = np.random.default_rng(seed)
    classes = []
    for ci in range(n_classes):
        methods = [simple_method(rng, int(rng.integers(3, instructions + 1)))
                   for _ in range(methods_per_class)]
        if include_switch and ci == 0:
            methods.append(switch_method(rng))
        classes.append(methods)
    return FixtureApp(classes=classes, dex=build_dex(classes, version=version),
                      smali=smali_files(classes, crlf=crlf),
                      expected=expected_histogram(classes))


def write_smali_tree(root, files: dict[str, str]) -> None:
    for rel, text in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="")
