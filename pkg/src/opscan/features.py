"""Prominent-opcode selection: class-mean frequency profiles, their absolute
differences and top-n ranking."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .corpus import LabeledHistogramSet
from .dalvik import DEFAULT_TABLE, InstructionFormatTable
from .errors import EmptyClass, InvalidParam, ParseError
from .extraction import OpcodeHistogram

N_OPCODES = 256


class NormalizationMode(Enum):
    """How per-app counts enter the class means: raw counts averaged over
    the class, or per-app relative frequencies (count / app total)."""

    MEAN_RAW_COUNT = "raw"
    MEAN_RELATIVE_FREQUENCY = "relative"

    @classmethod
    def from_string(cls, text: str) -> "NormalizationMode":
        for mode in cls:
            if text.strip().lower() == mode.value:
                return mode
        raise InvalidParam(f"unknown normalization mode {text!r} (use raw or relative)")


@dataclass(frozen=True)
class ClassMeanProfile:
    benign_mean: np.ndarray   # shape (256,)
    malware_mean: np.ndarray  # shape (256,)
    diff: np.ndarray          # |benign_mean - malware_mean|
    mode: NormalizationMode


@dataclass(frozen=True)
class FeatureRanking:
    """Opcodes ordered by descending difference score; ties broken by
    ascending opcode byte so the order is total."""

    ranked: tuple[tuple[int, float], ...]  # (opcode byte, score)
    n: int

    @property
    def opcodes(self) -> tuple[int, ...]:
        return tuple(op for op, _ in self.ranked)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(s for _, s in self.ranked)

    def feature_names(self) -> tuple[str, ...]:
        return tuple(f"op_{op:02x}" for op in self.opcodes)

    def __len__(self) -> int:
        return len(self.ranked)


def compute_class_means(hist_set: LabeledHistogramSet,
                        mode: NormalizationMode = NormalizationMode.MEAN_RAW_COUNT
                        ) -> ClassMeanProfile:
    """Mean opcode frequency per class and their element-wise absolute
    difference. Raw mode divides summed integer counts by the class size;
    relative mode first divides each app's counts by its total (all-zero
    apps contribute zeros)."""
    labels = hist_set.labels_array()
    counts = hist_set.counts_matrix()
    benign_rows = counts[labels == 0]
    malware_rows = counts[labels == 1]
    if benign_rows.shape[0] == 0 or malware_rows.shape[0] == 0:
        raise EmptyClass("class means need at least one benign and one malware app")
    if mode is NormalizationMode.MEAN_RAW_COUNT:
        benign_mean = benign_rows.sum(axis=0) / benign_rows.shape[0]
        malware_mean = malware_rows.sum(axis=0) / malware_rows.shape[0]
    else:
        benign_mean = _relative(benign_rows).mean(axis=0)
        malware_mean = _relative(malware_rows).mean(axis=0)
    diff = np.abs(benign_mean - malware_mean)
    return ClassMeanProfile(benign_mean=benign_mean, malware_mean=malware_mean,
                            diff=diff, mode=mode)


def _relative(rows: np.ndarray) -> np.ndarray:
    totals = rows.sum(axis=1, keepdims=True)
    safe = np.where(totals > 0, totals, 1)
    return np.where(totals > 0, rows / safe, 0.0)


def rank_features(profile: ClassMeanProfile, n: int) -> FeatureRanking:
    """Top-n opcodes by descending difference score. n beyond 256 returns
    all 256 opcodes."""
    if n < 1:
        raise InvalidParam(f"n must be >= 1, got {n}")
    diff = profile.diff
    order = np.lexsort((np.arange(N_OPCODES), -diff))
    keep = order[:min(n, N_OPCODES)]
    ranked = tuple((int(op), float(diff[op])) for op in keep)
    return FeatureRanking(ranked=ranked, n=n)


def project(histogram: OpcodeHistogram, ranking: FeatureRanking,
            mode: NormalizationMode = NormalizationMode.MEAN_RAW_COUNT) -> np.ndarray:
    """Feature vector for one app in ranking order: raw counts, or counts
    divided by the app total (zeros when the app is empty)."""
    if len(ranking) == 0:
        raise InvalidParam("ranking is empty")
    ops = np.fromiter(ranking.opcodes, dtype=np.int64, count=len(ranking))
    values = histogram.counts[ops].astype(np.float64)
    if mode is NormalizationMode.MEAN_RELATIVE_FREQUENCY:
        values = values / histogram.total if histogram.total > 0 else np.zeros_like(values)
    return values


def project_set(hist_set: LabeledHistogramSet, ranking: FeatureRanking,
                mode: NormalizationMode = NormalizationMode.MEAN_RAW_COUNT
                ) -> tuple[np.ndarray, np.ndarray]:
    """Project every row: returns (X, y) with y 0=benign / 1=malware."""
    if len(ranking) == 0:
        raise InvalidParam("ranking is empty")
    ops = np.fromiter(ranking.opcodes, dtype=np.int64, count=len(ranking))
    counts = hist_set.counts_matrix()
    x = counts[:, ops].astype(np.float64)
    if mode is NormalizationMode.MEAN_RELATIVE_FREQUENCY:
        totals = hist_set.totals()[:, None]
        safe = np.where(totals > 0, totals, 1)
        x = np.where(totals > 0, x / safe, 0.0)
    return x, hist_set.labels_array()


def write_ranking_csv(path, ranking: FeatureRanking, profile: ClassMeanProfile,
                      table: InstructionFormatTable = DEFAULT_TABLE,
                      config: dict | None = None) -> None:
    """Ranking export: rank, opcode_hex, mnemonic, F_B, F_M, D.

    Column names follow the published report schema; values are the benign
    mean, malware mean and their absolute difference.
    """
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["rank", "opcode_hex", "mnemonic", "F_B", "F_M", "D"])
        for i, (op, score) in enumerate(ranking.ranked, start=1):
            writer.writerow([i, f"0x{op:02x}", table.mnemonic(op),
                             repr(float(profile.benign_mean[op])),
                             repr(float(profile.malware_mean[op])),
                             repr(score)])


def read_ranking_csv(path) -> tuple[FeatureRanking, dict | None]:
    """Load a ranking CSV; returns the ranking and the embedded config
    (None when the file carries no config comment)."""
    path = Path(path)
    config = None
    with open(path, newline="", encoding="utf-8") as fh:
        lines = []
        for ln in fh:
            if ln.startswith("# config: "):
                config = json.loads(ln[len("# config: "):])
            elif not ln.startswith("#"):
                lines.append(ln)
    reader = csv.reader(lines)
    header = next(reader, None)
    if header != ["rank", "opcode_hex", "mnemonic", "F_B", "F_M", "D"]:
        raise ParseError(f"{path}: unexpected ranking CSV header", line=1)
    ranked = []
    for lineno, row in enumerate(reader, start=2):
        try:
            op = int(row[1], 16)
            score = float(row[5])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}: bad ranking row ({exc})", line=lineno)
        ranked.append((op, score))
    if not ranked:
        raise ParseError(f"{path}: ranking CSV holds no rows")
    return FeatureRanking(ranked=tuple(ranked), n=len(ranked)), config
