"""Labeled corpus management: manifests, a persistent histogram cache and
deterministic train/test splitting."""
from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .dalvik import DEFAULT_TABLE, InstructionFormatTable
from .errors import (
    DegenerateClass,
    DuplicateAppId,
    EmptyClass,
    InvalidParam,
    OpscanError,
    ParseError,
    UnknownLabel,
)
from .extraction import (
    EXTRACTION_CONFIG,
    Diagnostics,
    OpcodeHistogram,
    detect_artifact_kind,
    extract_artifact,
    read_histograms_csv,
    write_histograms_csv,
)

HISTOGRAMS_CSV = "histograms.csv"
CACHE_INDEX_CSV = "cache_index.csv"


class Label(Enum):
    BENIGN = "benign"
    MALWARE = "malware"

    @classmethod
    def from_string(cls, text: str, line: int | None = None) -> "Label":
        normalized = text.strip().lower()
        for label in cls:
            if normalized == label.value:
                return label
        raise UnknownLabel(f"unknown label {text!r}", line=line)


@dataclass(frozen=True)
class ManifestEntry:
    app_id: str
    path: Path
    label: Label


@dataclass(frozen=True)
class CorpusManifest:
    entries: tuple[ManifestEntry, ...]
    n_benign: int
    n_malware: int
    checksum: str  # sha256 of the manifest file bytes


def load_manifest(path) -> CorpusManifest:
    """Parse an app_id,path,label CSV. Relative paths resolve against the
    manifest's directory; labels are case-insensitive."""
    path = Path(path)
    raw = path.read_bytes()
    checksum = hashlib.sha256(raw).hexdigest()
    lines = raw.decode("utf-8").splitlines()
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{path}: empty manifest")
    if [h.strip().lower() for h in header] != ["app_id", "path", "label"]:
        raise ParseError(f"{path}: manifest header must be app_id,path,label", line=1)
    entries = []
    seen: dict[str, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise ParseError(f"{path}: expected 3 columns, got {len(row)}", line=lineno)
        app_id, app_path, label_text = (v.strip() for v in row)
        if not app_id or not app_path:
            raise ParseError(f"{path}: empty app_id or path", line=lineno)
        if app_id in seen:
            raise DuplicateAppId(f"{path}: duplicate app_id {app_id!r}", line=lineno)
        seen[app_id] = lineno
        label = Label.from_string(label_text, line=lineno)
        resolved = Path(app_path)
        if not resolved.is_absolute():
            resolved = path.parent / resolved
        entries.append(ManifestEntry(app_id=app_id, path=resolved, label=label))
    n_benign = sum(1 for e in entries if e.label is Label.BENIGN)
    return CorpusManifest(entries=tuple(entries), n_benign=n_benign,
                          n_malware=len(entries) - n_benign, checksum=checksum)


@dataclass
class LabeledHistogramSet:
    """Histogram rows paired with labels, in manifest order."""

    rows: list[tuple[OpcodeHistogram, Label]]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_benign(self) -> int:
        return sum(1 for _, lab in self.rows if lab is Label.BENIGN)

    @property
    def n_malware(self) -> int:
        return len(self.rows) - self.n_benign

    def counts_matrix(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, 256), dtype=np.int64)
        return np.stack([h.counts for h, _ in self.rows])

    def totals(self) -> np.ndarray:
        return np.array([h.total for h, _ in self.rows], dtype=np.int64)

    def labels_array(self) -> np.ndarray:
        """0 = benign, 1 = malware."""
        return np.array([1 if lab is Label.MALWARE else 0 for _, lab in self.rows],
                        dtype=np.int8)

    def subset(self, indices) -> "LabeledHistogramSet":
        rows = [self.rows[int(i)] for i in indices]
        return LabeledHistogramSet(rows=rows, provenance=f"{self.provenance}|subset")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    test: np.ndarray
    seed: int
    test_fraction: float


def _round_half_up(x: float) -> int:
    n = int(x)
    return n + 1 if x - n >= 0.5 else n


def stratified_split(hist_set: LabeledHistogramSet, test_fraction: float, seed: int,
                     stratified: bool = True) -> Split:
    """Seeded per-class shuffle + proportional allocation; the fractional
    instance goes to test when its fractional part is >= 0.5."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidParam(f"test_fraction must be in (0,1), got {test_fraction}")
    labels = hist_set.labels_array()
    if (labels == 0).sum() == 0 or (labels == 1).sum() == 0:
        raise EmptyClass("need at least one instance of each class to split")
    rng = np.random.default_rng(seed)
    groups = [np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)] if stratified \
        else [np.arange(labels.size)]
    test_parts = []
    train_parts = []
    for group in groups:
        perm = rng.permutation(group)
        n_test = _round_half_up(test_fraction * group.size)
        if n_test >= group.size:
            raise DegenerateClass("split would leave an empty training partition")
        test_parts.append(perm[:n_test])
        train_parts.append(perm[n_test:])
    test = np.sort(np.concatenate(test_parts))
    train = np.sort(np.concatenate(train_parts))
    return Split(train=train, test=test, seed=seed, test_fraction=test_fraction)


def _source_checksum(path: Path) -> str:
    """sha256 of file bytes; smali directories hash sorted (relpath, content)."""
    if path.is_dir():
        digest = hashlib.sha256()
        for f in sorted(path.rglob("*.smali")):
            digest.update(str(f.relative_to(path)).encode("utf-8"))
            digest.update(b"\0")
            digest.update(hashlib.sha256(f.read_bytes()).digest())
        return digest.hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _config_hash() -> str:
    return hashlib.sha256(EXTRACTION_CONFIG.encode("utf-8")).hexdigest()[:16]


@dataclass
class BuildReport:
    extracted: int = 0
    cached: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)
    # (app_id, status, unknown-opcode count, unmatched-token count)
    app_events: list[tuple[str, str, int, int]] = field(default_factory=list)


def _extract_one(args):
    app_id, source, table = args
    diag = Diagnostics()
    artifact = detect_artifact_kind(source)
    hist = extract_artifact(artifact, table, diagnostics=diag)
    counts = hist.counts
    return app_id, counts, diag.unknown_opcode_total, diag.unmatched_token_total


def build_histogram_set(manifest: CorpusManifest, cache_dir,
                        table: InstructionFormatTable = DEFAULT_TABLE, *,
                        on_error: str = "abort", jobs: int = 1,
                        config: dict | None = None) -> tuple[LabeledHistogramSet, BuildReport]:
    """Extract every manifest entry, reusing cached histograms whose source
    checksum and extraction config still match. Result order follows the
    manifest; cache writes happen once at the end."""
    if on_error not in ("abort", "skip"):
        raise InvalidParam(f"on_error must be abort or skip, got {on_error!r}")
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    hist_path = cache_dir / HISTOGRAMS_CSV
    index_path = cache_dir / CACHE_INDEX_CSV

    cached_hists: dict[str, OpcodeHistogram] = {}
    cached_labels: dict[str, str | None] = {}
    if hist_path.exists():
        for hist, label in read_histograms_csv(hist_path):
            cached_hists[hist.app_id] = hist
            cached_labels[hist.app_id] = label
    index: dict[str, tuple[str, str]] = {}
    if index_path.exists():
        with open(index_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(ln for ln in fh if not ln.startswith("#"))
            header = next(reader, None)
            for row in reader:
                if len(row) == 3:
                    index[row[0]] = (row[1], row[2])

    cfg_hash = _config_hash()
    report = BuildReport()
    todo: list[tuple[str, Path]] = []
    checksums: dict[str, str] = {}
    for entry in manifest.entries:
        try:
            checksum = _source_checksum(entry.path)
        except OSError as exc:
            if on_error == "abort":
                raise
            report.failures.append((entry.app_id, str(exc)))
            report.app_events.append((entry.app_id, "failed", 0, 0))
            continue
        checksums[entry.app_id] = checksum
        hit = (entry.app_id in cached_hists
               and index.get(entry.app_id) == (checksum, cfg_hash))
        if hit:
            report.cached += 1
            report.app_events.append((entry.app_id, "cached", 0, 0))
        else:
            todo.append((entry.app_id, entry.path))

    extracted: dict[str, np.ndarray] = {}
    work = [(app_id, path, table) for app_id, path in todo]
    if jobs > 1 and len(work) > 1:
        results = []
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_extract_one, w): w[0] for w in work}
            for fut, app_id in futures.items():
                try:
                    results.append(fut.result())
                except (OpscanError, OSError) as exc:
                    if on_error == "abort":
                        raise
                    report.failures.append((app_id, str(exc)))
                    report.app_events.append((app_id, "failed", 0, 0))
        for app_id, counts, n_unknown, n_unmatched in results:
            extracted[app_id] = counts
            report.extracted += 1
            report.app_events.append((app_id, "extracted", n_unknown, n_unmatched))
    else:
        for item in work:
            try:
                app_id, counts, n_unknown, n_unmatched = _extract_one(item)
            except (OpscanError, OSError) as exc:
                if on_error == "abort":
                    raise
                report.failures.append((item[0], str(exc)))
                report.app_events.append((item[0], "failed", 0, 0))
                continue
            extracted[app_id] = counts
            report.extracted += 1
            report.app_events.append((app_id, "extracted", n_unknown, n_unmatched))

    failed_ids = {app_id for app_id, _ in report.failures}
    rows: list[tuple[OpcodeHistogram, Label]] = []
    for entry in manifest.entries:
        if entry.app_id in failed_ids:
            continue
        if entry.app_id in extracted:
            hist = OpcodeHistogram.from_counts(entry.app_id, extracted[entry.app_id])
        else:
            hist = cached_hists[entry.app_id]
        rows.append((hist, entry.label))
        cached_hists[entry.app_id] = hist
        cached_labels[entry.app_id] = entry.label.value
        index[entry.app_id] = (checksums[entry.app_id], cfg_hash)

    csv_rows = [(cached_hists[a], cached_labels.get(a)) for a in sorted(cached_hists)]
    write_histograms_csv(hist_path, csv_rows, config=config)
    with open(index_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["app_id", "source_checksum", "config_hash"])
        for app_id in sorted(index):
            checksum, cfg = index[app_id]
            writer.writerow([app_id, checksum, cfg])

    provenance = f"manifest:{manifest.checksum};config:{cfg_hash}"
    return LabeledHistogramSet(rows=rows, provenance=provenance), report


def load_histogram_set(path) -> LabeledHistogramSet:
    """Load a labeled histogram set from a cache directory or a direct
    histograms.csv path. Every row must carry a label."""
    path = Path(path)
    if path.is_dir():
        path = path / HISTOGRAMS_CSV
    raw_rows = read_histograms_csv(path)
    rows = []
    for lineno, (hist, label_text) in enumerate(raw_rows, start=2):
        if label_text is None:
            raise ParseError(f"{path}: row without label cannot be used for training",
                             line=lineno)
        rows.append((hist, Label.from_string(label_text, line=lineno)))
    checksum = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    return LabeledHistogramSet(rows=rows, provenance=f"cache:{checksum}")
