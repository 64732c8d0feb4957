"""Opcode histogram extraction from DEX binaries, APK archives and smali text."""
from __future__ import annotations

import csv
import json
import logging
import re
import struct
import zipfile
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .dalvik import (
    DEFAULT_TABLE,
    FILL_ARRAY_PAYLOAD_TAG,
    PACKED_SWITCH_PAYLOAD_TAG,
    SPARSE_SWITCH_PAYLOAD_TAG,
    InstructionFormatTable,
)
from .errors import MalformedDex, NoDexEntries, NoSmaliFiles, ParseError, UnrecognizedArtifact

log = logging.getLogger(__name__)

DEX_MAGIC_PREFIX = b"dex\n"
SUPPORTED_DEX_VERSIONS = (b"035", b"036", b"037", b"038", b"039")
ZIP_MAGIC = b"PK\x03\x04"
DEX_HEADER_SIZE = 112
ENDIAN_CONSTANT = 0x12345678

# classes.dex, classes2.dex, classes3.dex, ... (no classes1.dex, no leading zeros)
_DEX_ENTRY_RE = re.compile(r"^classes(?:([2-9]|[1-9][0-9]+))?\.dex$")

# Identifies the extraction semantics baked into cached histograms.
EXTRACTION_CONFIG = "dex:035-039;payloads:skipped;unknown:counted;smali:leading-mnemonic"

CSV_OPCODE_COLUMNS = tuple(f"op_{i:02x}" for i in range(256))


class ArtifactKind(Enum):
    APK_CONTAINER = "apk"
    DEX_FILE = "dex"
    SMALI_DIR = "smali"


@dataclass(frozen=True)
class AppArtifact:
    id: str
    kind: ArtifactKind
    source: Path


@dataclass
class OpcodeHistogram:
    """Per-app occurrence counts of the 256 Dalvik opcode byte values."""

    app_id: str
    counts: np.ndarray  # shape (256,), int64
    total: int

    @classmethod
    def from_counts(cls, app_id: str, counts) -> "OpcodeHistogram":
        arr = np.asarray(counts, dtype=np.int64)
        if arr.shape != (256,):
            raise ValueError(f"histogram needs 256 bins, got shape {arr.shape}")
        if (arr < 0).any():
            raise ValueError("histogram counts must be nonnegative")
        return cls(app_id=app_id, counts=arr, total=int(arr.sum()))


@dataclass
class Diagnostics:
    """Non-fatal extraction events: undefined opcode slots hit in DEX
    streams, smali tokens that match no mnemonic."""

    unknown_opcodes: Counter = field(default_factory=Counter)
    unmatched_tokens: Counter = field(default_factory=Counter)
    methods_walked: int = 0
    smali_files_read: int = 0

    @property
    def unknown_opcode_total(self) -> int:
        return sum(self.unknown_opcodes.values())

    @property
    def unmatched_token_total(self) -> int:
        return sum(self.unmatched_tokens.values())


def detect_artifact_kind(source) -> AppArtifact:
    """Resolve an input path to an artifact kind by content sniffing."""
    path = Path(source)
    if path.is_dir():
        if any(True for _ in path.rglob("*.smali")):
            return AppArtifact(id=str(path), kind=ArtifactKind.SMALI_DIR, source=path)
        raise UnrecognizedArtifact(f"{path}: directory contains no .smali files")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if len(head) >= 8 and head[:4] == DEX_MAGIC_PREFIX and head[4:7].isdigit() and head[7] == 0:
        return AppArtifact(id=str(path), kind=ArtifactKind.DEX_FILE, source=path)
    if head[:4] == ZIP_MAGIC:
        try:
            with zipfile.ZipFile(path) as zf:
                has_dex = any(_DEX_ENTRY_RE.match(name) for name in zf.namelist())
        except zipfile.BadZipFile as exc:
            raise UnrecognizedArtifact(f"{path}: ZIP signature but unreadable archive ({exc})")
        if has_dex:
            return AppArtifact(id=str(path), kind=ArtifactKind.APK_CONTAINER, source=path)
        raise UnrecognizedArtifact(f"{path}: ZIP archive without classes.dex entries")
    raise UnrecognizedArtifact(f"{path}: not an APK, DEX file or smali directory")


def _read_uleb128(data: bytes, off: int, end: int, what: str) -> tuple[int, int]:
    result = 0
    shift = 0
    for _ in range(5):
        if off >= end:
            raise MalformedDex(f"truncated uleb128 in {what} at offset {off:#x}")
        byte = data[off]
        off += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, off
        shift += 7
    raise MalformedDex(f"uleb128 longer than 5 bytes in {what} at offset {off:#x}")


def _walk_insns(units: list[int], counts: list[int], table: InstructionFormatTable,
                diagnostics: Diagnostics | None, code_off: int,
                warned_unknown: set[int]) -> None:
    """Count one opcode per instruction, skipping payload pseudo-instructions
    by their self-describing sizes. Visits each unit at most once and must
    land exactly on the end of the stream."""
    widths = table.widths
    validity = table.validity
    n = len(units)
    i = 0
    while i < n:
        unit = units[i]
        op = unit & 0xFF
        if op == 0x00 and unit != 0x0000:
            tag = unit >> 8
            if tag == PACKED_SWITCH_PAYLOAD_TAG:
                if i + 2 > n:
                    raise MalformedDex(
                        f"truncated packed-switch payload (code_item at {code_off:#x})")
                step = units[i + 1] * 2 + 4
            elif tag == SPARSE_SWITCH_PAYLOAD_TAG:
                if i + 2 > n:
                    raise MalformedDex(
                        f"truncated sparse-switch payload (code_item at {code_off:#x})")
                step = units[i + 1] * 4 + 2
            elif tag == FILL_ARRAY_PAYLOAD_TAG:
                if i + 4 > n:
                    raise MalformedDex(
                        f"truncated fill-array-data payload (code_item at {code_off:#x})")
                elem_width = units[i + 1]
                size = units[i + 2] | (units[i + 3] << 16)
                step = ((size * elem_width + 1) >> 1) + 4
            else:
                # nop with a stray high byte: still a 1-unit nop
                counts[0x00] += 1
                i += 1
                continue
            if i + step > n:
                raise MalformedDex(
                    f"payload at unit {i} overruns insns (code_item at {code_off:#x})")
            i += step
            continue
        if not validity[op] and op not in warned_unknown:
            warned_unknown.add(op)
            log.warning("undefined opcode 0x%02x in code_item at %#x; counting and continuing",
                        op, code_off)
        if not validity[op] and diagnostics is not None:
            diagnostics.unknown_opcodes[op] += 1
        width = widths[op]
        if i + width > n:
            raise MalformedDex(
                f"instruction 0x{op:02x} at unit {i} overruns insns (code_item at {code_off:#x})")
        counts[op] += 1
        i += width


def extract_from_dex(dex_bytes, table: InstructionFormatTable = DEFAULT_TABLE, *,
                     app_id: str = "<dex>",
                     diagnostics: Diagnostics | None = None) -> OpcodeHistogram:
    """Walk every method code_item reachable from the class_defs table and
    return the summed opcode histogram."""
    data = bytes(dex_bytes)
    if len(data) < DEX_HEADER_SIZE:
        raise MalformedDex(f"{app_id}: file shorter than a DEX header ({len(data)} bytes)")
    if data[:4] != DEX_MAGIC_PREFIX or data[7] != 0:
        raise MalformedDex(f"{app_id}: bad DEX magic {data[:8]!r}")
    version = data[4:7]
    if version not in SUPPORTED_DEX_VERSIONS:
        raise MalformedDex(f"{app_id}: unsupported DEX version {version!r}")
    file_size, header_size, endian_tag = struct.unpack_from("<3I", data, 32)
    if not DEX_HEADER_SIZE <= file_size <= len(data):
        raise MalformedDex(f"{app_id}: header file_size {file_size} out of bounds")
    if endian_tag != ENDIAN_CONSTANT:
        raise MalformedDex(f"{app_id}: unsupported endian_tag {endian_tag:#x}")
    map_off = struct.unpack_from("<I", data, 52)[0]
    if map_off and map_off + 4 > file_size:
        raise MalformedDex(f"{app_id}: map_off {map_off:#x} out of bounds")
    class_defs_size, class_defs_off = struct.unpack_from("<2I", data, 96)

    counts = [0] * 256
    warned_unknown: set[int] = set()
    if class_defs_size:
        if class_defs_off + 32 * class_defs_size > file_size:
            raise MalformedDex(f"{app_id}: class_defs at {class_defs_off:#x} out of bounds")
        for ci in range(class_defs_size):
            class_data_off = struct.unpack_from("<I", data, class_defs_off + 32 * ci + 24)[0]
            if class_data_off == 0:
                continue
            if class_data_off >= file_size:
                raise MalformedDex(
                    f"{app_id}: class_data_off {class_data_off:#x} out of bounds")
            _walk_class_data(data, class_data_off, file_size, counts, table,
                             diagnostics, warned_unknown)
    return OpcodeHistogram.from_counts(app_id, counts)


def _walk_class_data(data: bytes, off: int, end: int, counts: list[int],
                     table: InstructionFormatTable, diagnostics: Diagnostics | None,
                     warned_unknown: set[int]) -> None:
    static_fields, off = _read_uleb128(data, off, end, "class_data")
    instance_fields, off = _read_uleb128(data, off, end, "class_data")
    direct_methods, off = _read_uleb128(data, off, end, "class_data")
    virtual_methods, off = _read_uleb128(data, off, end, "class_data")
    for _ in range(static_fields + instance_fields):
        _, off = _read_uleb128(data, off, end, "encoded_field")
        _, off = _read_uleb128(data, off, end, "encoded_field")
    for _ in range(direct_methods + virtual_methods):
        _, off = _read_uleb128(data, off, end, "encoded_method")
        _, off = _read_uleb128(data, off, end, "encoded_method")
        code_off, off = _read_uleb128(data, off, end, "encoded_method")
        if code_off == 0:
            continue
        if code_off + 16 > end:
            raise MalformedDex(f"code_item at {code_off:#x} out of bounds")
        insns_size = struct.unpack_from("<I", data, code_off + 12)[0]
        insns_off = code_off + 16
        if insns_off + 2 * insns_size > end:
            raise MalformedDex(f"code_item at {code_off:#x}: truncated insns")
        units = np.frombuffer(data, dtype="<u2", count=insns_size, offset=insns_off).tolist()
        _walk_insns(units, counts, table, diagnostics, code_off, warned_unknown)
        if diagnostics is not None:
            diagnostics.methods_walked += 1


_SMALI_SKIP_PREFIXES = (".", ":", "#")


def extract_from_smali(directory, table: InstructionFormatTable = DEFAULT_TABLE, *,
                       app_id: str | None = None,
                       diagnostics: Diagnostics | None = None) -> OpcodeHistogram:
    """Tokenize every .smali file under `directory` (recursive): the first
    whitespace-delimited token of each non-directive line is matched against
    the mnemonic table."""
    root = Path(directory)
    files = sorted(root.rglob("*.smali"))
    if not files:
        raise NoSmaliFiles(f"{root}: no .smali files found")
    counts = [0] * 256
    lookup = table.opcode_by_mnemonic
    for path in files:
        text = path.read_text(encoding="utf-8")
        if diagnostics is not None:
            diagnostics.smali_files_read += 1
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line[0] in _SMALI_SKIP_PREFIXES:
                continue
            token = line.split(None, 1)[0]
            op = lookup.get(token)
            if op is None:
                if diagnostics is not None:
                    diagnostics.unmatched_tokens[token] += 1
            else:
                counts[op] += 1
    return OpcodeHistogram.from_counts(app_id or str(root), counts)


def extract_from_apk(apk_path, table: InstructionFormatTable = DEFAULT_TABLE, *,
                     app_id: str | None = None,
                     diagnostics: Diagnostics | None = None) -> OpcodeHistogram:
    """Sum histograms over all classes.dex / classesN.dex entries, in
    numeric entry order."""
    path = Path(apk_path)
    with zipfile.ZipFile(path) as zf:
        entries = []
        for name in zf.namelist():
            m = _DEX_ENTRY_RE.match(name)
            if m:
                entries.append((int(m.group(1) or 1), name))
        if not entries:
            raise NoDexEntries(f"{path}: no classes.dex entries in archive")
        entries.sort()
        counts = np.zeros(256, dtype=np.int64)
        for _, name in entries:
            data = zf.read(name)
            try:
                part = extract_from_dex(data, table, app_id=f"{path}!{name}",
                                        diagnostics=diagnostics)
            except MalformedDex as exc:
                raise MalformedDex(f"{path} entry {name}: {exc}") from exc
            counts += part.counts
    return OpcodeHistogram.from_counts(app_id or str(path), counts)


def extract_artifact(artifact, table: InstructionFormatTable = DEFAULT_TABLE, *,
                     diagnostics: Diagnostics | None = None) -> OpcodeHistogram:
    """Extract from an AppArtifact or a raw path (kind auto-detected)."""
    if not isinstance(artifact, AppArtifact):
        artifact = detect_artifact_kind(artifact)
    if artifact.kind is ArtifactKind.DEX_FILE:
        data = Path(artifact.source).read_bytes()
        return extract_from_dex(data, table, app_id=artifact.id, diagnostics=diagnostics)
    if artifact.kind is ArtifactKind.APK_CONTAINER:
        return extract_from_apk(artifact.source, table, app_id=artifact.id,
                                diagnostics=diagnostics)
    return extract_from_smali(artifact.source, table, app_id=artifact.id,
                              diagnostics=diagnostics)


def write_histograms_csv(path, rows, config: dict | None = None) -> None:
    """Write histogram records: app_id, label, op_00..op_ff, total.

    Counts are decimal integers (bit-exact contract). `rows` yields
    (OpcodeHistogram, label-string-or-None) pairs.
    """
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["app_id", "label", *CSV_OPCODE_COLUMNS, "total"])
        for hist, label in rows:
            writer.writerow([hist.app_id, "" if label is None else label,
                             *(int(c) for c in hist.counts), hist.total])


def read_histograms_csv(path) -> list[tuple[OpcodeHistogram, str | None]]:
    """Read records written by write_histograms_csv; leading '#' comment
    lines are skipped."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{path}: empty histogram CSV")
    expected = ["app_id", "label", *CSV_OPCODE_COLUMNS, "total"]
    if header != expected:
        raise ParseError(f"{path}: unexpected histogram CSV header", line=1)
    out = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(expected):
            raise ParseError(f"{path}: expected {len(expected)} columns, got {len(row)}",
                             line=lineno)
        app_id = row[0]
        label = row[1] or None
        try:
            counts = [int(v) for v in row[2:258]]
            total = int(row[258])
        except ValueError as exc:
            raise ParseError(f"{path}: non-integer count ({exc})", line=lineno)
        if any(c < 0 for c in counts):
            raise ParseError(f"{path}: negative count", line=lineno)
        if total != sum(counts):
            raise ParseError(f"{path}: total column does not match counts", line=lineno)
        out.append((OpcodeHistogram.from_counts(app_id, counts), label))
    return out
