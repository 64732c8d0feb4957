"""Versioned, checksummed model files.

The document is JSON with a sha256 over the canonical serialization of the
model body; trees are stored as flat node lists (child links by index) so
deep trees never hit the recursion limit.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .classifiers import NaiveBayesLeaf, SelectionProvenance, TrainedModel, TreeNode
from .errors import CorruptModel, VersionMismatch
from .features import FeatureRanking, NormalizationMode

MODEL_FORMAT = "opscan-model"
MODEL_VERSION = 1


def _flatten_tree(root: TreeNode) -> list[dict]:
    nodes: list[dict] = []
    stack = [(root, None, None)]  # (node, parent slot index, "l"/"r")
    while stack:
        node, parent_pos, side = stack.pop()
        pos = len(nodes)
        if node.is_leaf:
            entry: dict = {"b": node.n_benign, "m": node.n_malware}
            if node.nb is not None:
                entry["nb"] = {
                    "priors": [float(v) for v in node.nb.priors],
                    "means": node.nb.means.tolist(),
                    "vars": node.nb.variances.tolist(),
                }
        else:
            entry = {"f": node.feature, "t": float(node.threshold), "l": -1, "r": -1}
        nodes.append(entry)
        if parent_pos is not None:
            nodes[parent_pos][side] = pos
        if not node.is_leaf:
            stack.append((node.right, pos, "r"))
            stack.append((node.left, pos, "l"))
    return nodes


def _rebuild_tree(entries: list[dict]) -> TreeNode:
    if not entries:
        raise CorruptModel("tree with no nodes")
    nodes = []
    for entry in entries:
        node = TreeNode()
        if "f" in entry:
            node.feature = int(entry["f"])
            node.threshold = float(entry["t"])
        else:
            node.n_benign = int(entry["b"])
            node.n_malware = int(entry["m"])
            nb = entry.get("nb")
            if nb is not None:
                node.nb = NaiveBayesLeaf(
                    priors=np.array(nb["priors"], dtype=np.float64),
                    means=np.array(nb["means"], dtype=np.float64),
                    variances=np.array(nb["vars"], dtype=np.float64),
                )
        nodes.append(node)
    for node, entry in zip(nodes, entries):
        if "f" in entry:
            node.left = nodes[entry["l"]]
            node.right = nodes[entry["r"]]
    return nodes[0]


def _model_body(model: TrainedModel) -> dict:
    body = {
        "kind": model.kind,
        "params": model.params,
        "seed": model.seed,
        "feature_names": list(model.feature_names),
        "trees": [_flatten_tree(t) for t in model.trees],
        "selection": None,
    }
    if model.selection is not None:
        body["selection"] = {
            "mode": model.selection.mode.value,
            "opcodes": list(model.selection.ranking.opcodes),
            "scores": list(model.selection.ranking.scores),
            "n": model.selection.ranking.n,
        }
    return body


def _canonical(body: dict) -> str:
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_model(model: TrainedModel, path, config: dict | None = None) -> None:
    body = _model_body(model)
    if config is not None:
        body["config"] = config
    canonical = _canonical(body)
    document = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "sha256": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "model": body,
    }
    Path(path).write_text(
        json.dumps(document, sort_keys=True, separators=(",", ":"), allow_nan=False),
        encoding="utf-8")


def load_model(path) -> TrainedModel:
    """load(save(m)) predicts identically to m; truncated or tampered files
    fail the checksum, future versions are refused."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptModel(f"{path}: not a valid model document ({exc})")
    if not isinstance(document, dict) or document.get("format") != MODEL_FORMAT:
        raise CorruptModel(f"{path}: not an {MODEL_FORMAT} document")
    version = document.get("version")
    if version != MODEL_VERSION:
        raise VersionMismatch(
            f"{path}: model version {version!r}, this build reads version {MODEL_VERSION}")
    body = document.get("model")
    if not isinstance(body, dict):
        raise CorruptModel(f"{path}: missing model body")
    if hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest() != document.get("sha256"):
        raise CorruptModel(f"{path}: checksum mismatch")
    try:
        trees = [_rebuild_tree(entries) for entries in body["trees"]]
        selection = None
        if body.get("selection") is not None:
            sel = body["selection"]
            ranked = tuple(zip((int(o) for o in sel["opcodes"]),
                               (float(s) for s in sel["scores"])))
            selection = SelectionProvenance(
                ranking=FeatureRanking(ranked=ranked, n=int(sel["n"])),
                mode=NormalizationMode.from_string(sel["mode"]))
        return TrainedModel(
            kind=body["kind"],
            params=body["params"],
            trees=trees,
            feature_names=tuple(body["feature_names"]),
            seed=body.get("seed"),
            selection=selection,
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CorruptModel(f"{path}: malformed model body ({exc})")
