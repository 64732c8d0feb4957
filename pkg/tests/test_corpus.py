"""Manifest parsing, histogram cache semantics and split invariants."""
import numpy as np
import pytest

import opscan.corpus as corpus_mod
from opscan.corpus import (
    Label,
    LabeledHistogramSet,
    build_histogram_set,
    load_histogram_set,
    load_manifest,
    stratified_split,
)
from opscan.errors import (
    DegenerateClass,
    DuplicateAppId,
    EmptyClass,
    InvalidParam,
    MalformedDex,
    ParseError,
    UnknownLabel,
)
from opscan.extraction import OpcodeHistogram, extract_from_dex

from dexbuild import make_fixture_app, write_smali_tree


def write_manifest(path, rows, header="app_id,path,label"):
    lines = [header] + [",".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def small_corpus(tmp_path):
    """3 dex apps + 1 smali app on disk with a manifest."""
    rows = []
    for i, label in enumerate(["benign", "benign", "malware"]):
        app = make_fixture_app(seed=100 + i)
        p = tmp_path / f"app{i}.dex"
        p.write_bytes(app.dex)
        rows.append((f"app{i}", p.name, label))
    smali_app = make_fixture_app(seed=200)
    smali_dir = tmp_path / "app3_smali"
    write_smali_tree(smali_dir, smali_app.smali)
    rows.append(("app3", smali_dir.name, "malware"))
    manifest_path = write_manifest(tmp_path / "manifest.csv", rows)
    return manifest_path, tmp_path


class TestManifest:
    def test_counts(self, tmp_path):
        p = write_manifest(tmp_path / "m.csv", [
            ("a", "a.dex", "benign"), ("b", "b.dex", "benign"),
            ("c", "c.dex", "malware"), ("d", "d.dex", "malware"),
            ("e", "e.dex", "malware")])
        manifest = load_manifest(p)
        assert manifest.n_benign == 2
        assert manifest.n_malware == 3
        assert len(manifest.entries) == 5

    def test_duplicate_app_id_names_line(self, tmp_path):
        p = write_manifest(tmp_path / "m.csv", [
            ("a", "a.dex", "benign"), ("b", "b.dex", "benign"),
            ("a", "c.dex", "malware")])
        with pytest.raises(DuplicateAppId, match="line 4"):
            load_manifest(p)

    def test_label_case_insensitive(self, tmp_path):
        p = write_manifest(tmp_path / "m.csv", [
            ("a", "a.dex", "Benign"), ("b", "b.dex", "MALWARE")])
        manifest = load_manifest(p)
        assert manifest.entries[0].label is Label.BENIGN
        assert manifest.entries[1].label is Label.MALWARE

    def test_unknown_label(self, tmp_path):
        p = write_manifest(tmp_path / "m.csv", [("a", "a.dex", "suspicious")])
        with pytest.raises(UnknownLabel, match="line 2"):
            load_manifest(p)

    def test_bad_header(self, tmp_path):
        p = write_manifest(tmp_path / "m.csv", [("a", "x", "benign")],
                           header="id,file,verdict")
        with pytest.raises(ParseError):
            load_manifest(p)

    def test_wrong_column_count(self, tmp_path):
        (tmp_path / "m.csv").write_text("app_id,path,label\na,b.dex\n")
        with pytest.raises(ParseError, match="line 2"):
            load_manifest(tmp_path / "m.csv")

    def test_relative_paths_resolve_against_manifest(self, tmp_path):
        sub = tmp_path / "data"
        sub.mkdir()
        p = write_manifest(sub / "m.csv", [("a", "apps/a.dex", "benign")])
        manifest = load_manifest(p)
        assert manifest.entries[0].path == sub / "apps/a.dex"


class TestBuildHistogramSet:
    def test_cold_build_extracts_all(self, small_corpus):
        manifest_path, root = small_corpus
        manifest = load_manifest(manifest_path)
        hist_set, report = build_histogram_set(manifest, root / "cache")
        assert report.extracted == 4
        assert report.cached == 0
        assert len(hist_set) == 4
        assert hist_set.n_benign == 2
        assert hist_set.n_malware == 2
        assert (root / "cache" / "histograms.csv").exists()
        assert (root / "cache" / "cache_index.csv").exists()

    def test_warm_cache_extracts_nothing(self, small_corpus, monkeypatch):
        manifest_path, root = small_corpus
        manifest = load_manifest(manifest_path)
        build_histogram_set(manifest, root / "cache")
        calls = []
        original = corpus_mod._extract_one

        def counting(args):
            calls.append(args[0])
            return original(args)

        monkeypatch.setattr(corpus_mod, "_extract_one", counting)
        hist_set, report = build_histogram_set(manifest, root / "cache")
        assert calls == []
        assert report.extracted == 0
        assert report.cached == 4
        assert len(hist_set) == 4

    def test_modified_file_reextracted(self, small_corpus):
        manifest_path, root = small_corpus
        manifest = load_manifest(manifest_path)
        set1, _ = build_histogram_set(manifest, root / "cache")
        new_app = make_fixture_app(seed=999)
        (root / "app1.dex").write_bytes(new_app.dex)
        set2, report = build_histogram_set(manifest, root / "cache")
        assert report.extracted == 1
        assert report.cached == 3
        changed = dict((h.app_id, h) for h, _ in set2.rows)
        assert np.array_equal(changed["app1"].counts, new_app.expected)

    def test_cache_hit_is_bit_identical_to_reextraction(self, small_corpus):
        manifest_path, root = small_corpus
        manifest = load_manifest(manifest_path)
        build_histogram_set(manifest, root / "cache")
        warm_set, _ = build_histogram_set(manifest, root / "cache")
        for hist, _ in warm_set.rows:
            entry = next(e for e in manifest.entries if e.app_id == hist.app_id)
            if entry.path.suffix == ".dex":
                fresh = extract_from_dex(entry.path.read_bytes())
                assert np.array_equal(hist.counts, fresh.counts)

    def test_labels_follow_manifest(self, small_corpus):
        manifest_path, root = small_corpus
        manifest = load_manifest(manifest_path)
        hist_set, _ = build_histogram_set(manifest, root / "cache")
        by_id = {h.app_id: lab for h, lab in hist_set.rows}
        for entry in manifest.entries:
            assert by_id[entry.app_id] is entry.label

    def test_empty_manifest(self, tmp_path):
        p = write_manifest(tmp_path / "m.csv", [])
        hist_set, report = build_histogram_set(load_manifest(p), tmp_path / "cache")
        assert len(hist_set) == 0
        assert report.extracted == 0

    def test_missing_file_aborts_by_default(self, tmp_path):
        p = write_manifest(tmp_path / "m.csv", [("a", "missing.dex", "benign")])
        with pytest.raises(OSError):
            build_histogram_set(load_manifest(p), tmp_path / "cache")

    def test_skip_policy_records_failure(self, small_corpus):
        manifest_path, root = small_corpus
        rows = [("bad", "missing.dex", "benign"),
                ("app0", "app0.dex", "benign"),
                ("app2", "app2.dex", "malware")]
        p = write_manifest(root / "m2.csv", rows)
        hist_set, report = build_histogram_set(load_manifest(p), root / "cache2",
                                               on_error="skip")
        assert len(hist_set) == 2
        assert [f[0] for f in report.failures] == ["bad"]

    def test_corrupt_dex_aborts(self, tmp_path):
        bad = tmp_path / "bad.dex"
        bad.write_bytes(b"dex\n035\x00" + b"\0" * 200)
        p = write_manifest(tmp_path / "m.csv", [("bad", "bad.dex", "malware")])
        with pytest.raises(MalformedDex):
            build_histogram_set(load_manifest(p), tmp_path / "cache")

    def test_parallel_jobs_match_sequential(self, small_corpus):
        manifest_path, root = small_corpus
        manifest = load_manifest(manifest_path)
        seq_set, _ = build_histogram_set(manifest, root / "cache_seq", jobs=1)
        par_set, _ = build_histogram_set(manifest, root / "cache_par", jobs=2)
        assert (root / "cache_seq" / "histograms.csv").read_text() == \
            (root / "cache_par" / "histograms.csv").read_text()
        for (h1, l1), (h2, l2) in zip(seq_set.rows, par_set.rows):
            assert h1.app_id == h2.app_id
            assert np.array_equal(h1.counts, h2.counts)
            assert l1 is l2

    def test_loaded_set_roundtrips(self, small_corpus):
        manifest_path, root = small_corpus
        manifest = load_manifest(manifest_path)
        built, _ = build_histogram_set(manifest, root / "cache")
        loaded = load_histogram_set(root / "cache")
        by_id = {h.app_id: (h, lab) for h, lab in loaded.rows}
        assert len(loaded) == len(built)
        for h, lab in built.rows:
            lh, llab = by_id[h.app_id]
            assert np.array_equal(lh.counts, h.counts)
            assert llab is lab


def label_set(n_benign, n_malware):
    rows = [(OpcodeHistogram.from_counts(f"b{i}", [0] * 256), Label.BENIGN)
            for i in range(n_benign)]
    rows += [(OpcodeHistogram.from_counts(f"m{i}", [0] * 256), Label.MALWARE)
             for i in range(n_malware)]
    return LabeledHistogramSet(rows=rows)


class TestStratifiedSplit:
    def test_exact_proportionality(self):
        split = stratified_split(label_set(10, 10), 0.2, seed=3)
        labels = label_set(10, 10).labels_array()
        test_labels = labels[split.test]
        assert (test_labels == 0).sum() == 2
        assert (test_labels == 1).sum() == 2

    def test_determinism(self):
        s = label_set(13, 9)
        a = stratified_split(s, 0.3, seed=42)
        b = stratified_split(s, 0.3, seed=42)
        assert np.array_equal(a.train, b.train)
        assert np.array_equal(a.test, b.test)

    def test_seed_changes_split(self):
        s = label_set(30, 30)
        a = stratified_split(s, 0.3, seed=1)
        b = stratified_split(s, 0.3, seed=2)
        assert not np.array_equal(a.test, b.test)

    def test_proportional_rounding_small(self):
        split = stratified_split(label_set(5, 5), 0.2, seed=0)
        labels = label_set(5, 5).labels_array()
        test_labels = labels[split.test]
        assert (test_labels == 0).sum() == 1
        assert (test_labels == 1).sum() == 1

    def test_half_up_rounding(self):
        # 0.25 of 6 = 1.5 -> 2 per class
        split = stratified_split(label_set(6, 6), 0.25, seed=0)
        assert split.test.size == 4

    def test_disjoint_exhaustive(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            nb, nm = int(rng.integers(2, 40)), int(rng.integers(2, 40))
            frac = float(rng.uniform(0.1, 0.5))
            s = label_set(nb, nm)
            split = stratified_split(s, frac, seed=int(rng.integers(0, 1000)))
            combined = np.concatenate([split.train, split.test])
            assert np.array_equal(np.sort(combined), np.arange(nb + nm))
            labels = s.labels_array()
            for cls, n_cls in ((0, nb), (1, nm)):
                got = (labels[split.test] == cls).sum()
                assert abs(got - frac * n_cls) <= 1

    def test_degenerate_class(self):
        with pytest.raises(DegenerateClass):
            stratified_split(label_set(1, 10), 0.5, seed=0)

    def test_empty_class(self):
        rows = [(OpcodeHistogram.from_counts("b", [0] * 256), Label.BENIGN)]
        with pytest.raises(EmptyClass):
            stratified_split(LabeledHistogramSet(rows=rows), 0.2, seed=0)

    def test_fraction_bounds(self):
        with pytest.raises(InvalidParam):
            stratified_split(label_set(5, 5), 1.0, seed=0)
        with pytest.raises(InvalidParam):
            stratified_split(label_set(5, 5), 0.0, seed=0)

    def test_non_stratified_mode(self):
        s = label_set(20, 20)
        split = stratified_split(s, 0.25, seed=5, stratified=False)
        combined = np.concatenate([split.train, split.test])
        assert np.array_equal(np.sort(combined), np.arange(40))
        assert split.test.size == 10
