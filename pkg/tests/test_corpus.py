import json
from pathlib import Path

import numpy as np
import pytest

from writerid import corpus
from writerid.errors import ConfigError, ManifestError


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = corpus.generate_corpus(
        8, 20, (128, 128), seed=7, out_dir=root, calibrate_per_writer=5, test_per_writer=4
    )
    return manifest


class TestGenerateCorpus:
    def test_counts_forced_by_arguments(self, small_corpus):
        assert len(small_corpus.samples) == 160
        assert len({r.writer_id for r in small_corpus.samples}) == 8

    def test_determinism_byte_identical(self, tmp_path):
        a = corpus.generate_corpus(2, 9, (64, 64), seed=7, out_dir=tmp_path / "a",
                                   calibrate_per_writer=2, test_per_writer=2)
        corpus.generate_corpus(2, 9, (64, 64), seed=7, out_dir=tmp_path / "b",
                               calibrate_per_writer=2, test_per_writer=2)
        for record in a.samples:
            b1 = (tmp_path / "a" / record.image_path).read_bytes()
            b2 = (tmp_path / "b" / record.image_path).read_bytes()
            assert b1 == b2, record.sample_id
        assert (tmp_path / "a" / "manifest.jsonl").read_text() == (
            tmp_path / "b" / "manifest.jsonl"
        ).read_text()

    def test_single_writer_accepted_zero_rejected(self, tmp_path):
        m = corpus.generate_corpus(1, 5, (64, 64), seed=3, out_dir=tmp_path / "one",
                                   calibrate_per_writer=2, test_per_writer=2)
        assert m.num_writers == 1
        with pytest.raises(ValueError):
            corpus.generate_corpus(0, 5, (64, 64), seed=3, out_dir=tmp_path / "zero")

    def test_indivisible_image_size_names_dimension(self, tmp_path):
        with pytest.raises(ConfigError, match="width"):
            corpus.generate_corpus(2, 5, (64, 60), seed=3, out_dir=tmp_path / "bad",
                                   calibrate_per_writer=1, test_per_writer=1)

    def test_pixel_range(self, small_corpus):
        img = small_corpus.load_sample(small_corpus.samples[0])
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_distinct_style_triples(self):
        styles = corpus.make_writer_styles(12, 5)
        triples = {(s.stroke_thickness, s.slant, s.glyph_density) for s in styles}
        assert len(triples) == 12


class TestInjectDefects:
    @pytest.fixture(scope="class")
    def page(self):
        styles = corpus.make_writer_styles(2, 3)
        from writerid.seeding import rng_for

        return corpus.render_page(styles[0], (128, 128), rng_for(3, "page"))

    def test_zero_area_is_identity(self, page):
        spec = corpus.DefectSpec(kind="stain", area_ratio=0.0, seed=1)
        np.testing.assert_array_equal(corpus.inject_defects(page, spec), page)

    def test_ten_percent_stain_changed_fraction(self, page):
        spec = corpus.DefectSpec(kind="stain", area_ratio=0.10, seed=5)
        out = corpus.inject_defects(page, spec)
        changed = (out != page).mean()
        assert 0.08 <= changed <= 0.12

    def test_fifty_percent_changed_fraction_by_pixel_diff(self, page):
        spec = corpus.DefectSpec(kind="stain", area_ratio=0.50, seed=6)
        out = corpus.inject_defects(page, spec)
        changed = int((out != page).sum())
        frac = changed / page.size
        assert 0.48 <= frac <= 0.52

    @pytest.mark.parametrize("kind", corpus.DEFECT_KINDS)
    def test_modified_pixels_equal_rendered_mask(self, page, kind):
        spec = corpus.DefectSpec(kind=kind, area_ratio=0.15, seed=9)
        mask, _ = corpus.render_defect_mask(spec, page)
        out = corpus.inject_defects(page, spec)
        np.testing.assert_array_equal(out != page, mask)

    @pytest.mark.parametrize("kind", corpus.DEFECT_KINDS)
    @pytest.mark.parametrize("area", [0.05, 0.2, 0.5])
    def test_mask_area_within_two_percent_relative(self, page, kind, area):
        spec = corpus.DefectSpec(kind=kind, area_ratio=area, seed=11)
        mask, _ = corpus.render_defect_mask(spec, page)
        assert abs(mask.sum() - area * page.size) <= 0.02 * area * page.size

    def test_out_of_range_ratio_rejected(self, page):
        with pytest.raises(ValueError):
            corpus.DefectSpec(kind="stain", area_ratio=1.2, seed=0)

    def test_output_in_unit_range(self, page):
        for kind in corpus.DEFECT_KINDS:
            out = corpus.inject_defects(page, corpus.DefectSpec(kind=kind, area_ratio=0.3, seed=2))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_determinism(self, page):
        spec = corpus.DefectSpec(kind="fold", area_ratio=0.2, seed=13)
        np.testing.assert_array_equal(
            corpus.inject_defects(page, spec), corpus.inject_defects(page, spec)
        )


class TestInjectForgeries:
    def test_zero_ratio_unchanged_except_provenance(self, tmp_path):
        m = corpus.generate_corpus(3, 8, (64, 64), seed=8, out_dir=tmp_path / "f0",
                                   calibrate_per_writer=2, test_per_writer=3)
        out = corpus.inject_forgeries(m, 0.0, seed=1)
        assert out.samples == m.samples
        assert len(out.provenance) == len(m.provenance) + 1

    def test_exact_forged_count(self, tmp_path):
        m = corpus.generate_corpus(5, 24, (64, 64), seed=9, out_dir=tmp_path / "f1",
                                   calibrate_per_writer=2, test_per_writer=4)
        # test split is 5 writers x 4 = 20 samples
        out = corpus.inject_forgeries(m, 0.10, seed=2)
        forged = [r for r in out.samples if r.forged]
        assert len(forged) == 2  # floor(0.10 * 20)
        for r in forged:
            assert r.true_writer_id is not None and r.true_writer_id != r.writer_id
            assert (tmp_path / "f1" / r.image_path).is_file()

    def test_composition_draws_from_unforged(self, tmp_path):
        m = corpus.generate_corpus(5, 26, (64, 64), seed=10, out_dir=tmp_path / "f2",
                                   calibrate_per_writer=2, test_per_writer=4)
        n_test = len(m.split("test"))
        first = corpus.inject_forgeries(m, 0.10, seed=3)
        second = corpus.inject_forgeries(first, 0.20, seed=4)
        n1 = int(0.10 * n_test)
        n2 = int(0.20 * (n_test - n1))
        assert sum(r.forged for r in second.samples) == n1 + n2

    def test_ratio_above_half_rejected(self, tmp_path):
        m = corpus.generate_corpus(2, 8, (64, 64), seed=11, out_dir=tmp_path / "f3",
                                   calibrate_per_writer=2, test_per_writer=2)
        with pytest.raises(ValueError):
            corpus.inject_forgeries(m, 0.6, seed=5)


class TestManifestIO:
    def test_round_trip_structural_equality(self, small_corpus):
        loaded = corpus.load_manifest(small_corpus.root / "manifest.jsonl")
        assert loaded.samples == small_corpus.samples
        assert loaded.styles == small_corpus.styles
        assert loaded.corpus_seed == small_corpus.corpus_seed

    def test_duplicate_sample_id_named(self, small_corpus, tmp_path):
        lines = (small_corpus.root / "manifest.jsonl").read_text().splitlines()
        lines.append(lines[1])
        bad = tmp_path / "dup.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        dup_id = json.loads(lines[1])["sample_id"]
        with pytest.raises(ManifestError, match=dup_id):
            corpus.load_manifest(bad, check_files=False)

    def test_missing_image_file_named(self, small_corpus, tmp_path):
        text = (small_corpus.root / "manifest.jsonl").read_text()
        bad = tmp_path / "missing.jsonl"
        bad.write_text(text)
        with pytest.raises(ManifestError, match="missing image"):
            corpus.load_manifest(bad)

    def test_unbalanced_calibrate_split_rejected(self, small_corpus, tmp_path):
        lines = (small_corpus.root / "manifest.jsonl").read_text().splitlines()
        out = []
        dropped = False
        for line in lines:
            rec = json.loads(line)
            if not dropped and rec.get("record") == "sample" and rec["split"] == "calibrate":
                dropped = True
                continue
            out.append(line)
        bad = tmp_path / "unbalanced.jsonl"
        bad.write_text("\n".join(out) + "\n")
        with pytest.raises(ManifestError, match="unbalanced"):
            corpus.load_manifest(bad, check_files=False)

    def test_calibrate_split_balanced_by_construction(self, small_corpus):
        counts = {}
        for r in small_corpus.split("calibrate"):
            counts[r.writer_id] = counts.get(r.writer_id, 0) + 1
        assert set(counts.values()) == {5}


def test_style_separability(small_corpus):
    inter, intra = corpus.style_separation_stats(small_corpus)
    assert inter > intra
