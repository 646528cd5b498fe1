import numpy as np
import pytest

from snapdiff import corpus
from snapdiff.corpus import (ConceptSpec, Corpus, caption, make_concepts,
                             make_split, render_concept)
from snapdiff.evalkit import dominant_color


def test_centered_circle_geometry():
    spec = ConceptSpec(0, "circle", "red", "solid", 0.5)
    s = render_concept(spec, background_id=0, nuisance_seed=0)
    nonblack = s.image.sum(axis=-1) > 0
    frac = nonblack.mean()
    assert 0.15 <= frac <= 0.25  # pi * 0.25^2 ~ 0.196
    assert np.all(s.image[nonblack] == np.array([1.0, 0.0, 0.0]))


def test_render_deterministic():
    spec = ConceptSpec(3, "star", "blue", "dots", 0.6)
    a = render_concept(spec, 2, 42).image
    b = render_concept(spec, 2, 42).image
    assert np.array_equal(a, b)


def test_render_values_in_range():
    for shape in corpus.SHAPES:
        img = render_concept(ConceptSpec(0, shape, "teal", "checker", 0.55), 3, 9).image
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_invalid_attribute_rejected():
    with pytest.raises(ValueError, match="shape"):
        ConceptSpec(0, "blob", "red", "solid", 0.5)
    with pytest.raises(ValueError, match="color"):
        ConceptSpec(0, "circle", "mauve", "solid", 0.5)
    with pytest.raises(ValueError, match="texture"):
        ConceptSpec(0, "circle", "red", "plaid", 0.5)


def test_striped_blue_square_passes_hue_oracle():
    s = render_concept(ConceptSpec(1, "square", "blue", "stripes", 0.6), 1, 5)
    assert dominant_color(s.image) == "blue"


def test_identity_bijection(micro_corpus):
    tuples = {(c.shape, c.color, c.texture) for c in micro_corpus.concepts}
    ids = {c.identity_id for c in micro_corpus.concepts}
    assert len(tuples) == len(micro_corpus.concepts)
    assert ids == set(range(len(micro_corpus.concepts)))


def test_split_paper_scale():
    split = make_split(101, 71, seed=0)
    assert len(split.train_ids) == 71
    assert len(split.test_ids) == 30
    assert not set(split.train_ids) & set(split.test_ids)
    assert set(split.train_ids) | set(split.test_ids) == set(range(101))


def test_split_boundary_empty_test():
    split = make_split(10, 10, seed=1)
    assert split.test_ids == []


def test_split_seed_changes_partition_not_sizes():
    a = make_split(30, 21, seed=1)
    b = make_split(30, 21, seed=2)
    assert len(a.train_ids) == len(b.train_ids) == 21
    assert a.train_ids != b.train_ids


def test_split_rejects_bad_sizes():
    with pytest.raises(ValueError):
        make_split(10, 11, seed=0)


def test_caption_examples():
    assert caption("red circle", "a photo of a {}") == "a photo of a red circle"
    assert caption("*", "a cropped photo of the {}") == "a cropped photo of the *"
    assert caption("x", "{}") == "x"
    with pytest.raises(ValueError):
        caption("x", "a {} and a {}")


def test_templates_have_one_slot():
    for t in corpus.TEMPLATES:
        assert t.count("{}") == 1
    assert len(corpus.TEMPLATES) >= 27


def test_vocabulary_closed_and_small():
    vocab = corpus.build_vocabulary()
    assert len(vocab) <= 128
    assert len(set(vocab)) == len(vocab)
    for c in corpus.COLORS:
        assert c in vocab


def test_corpus_save_load_roundtrip(tmp_path, micro_corpus):
    root = tmp_path / "corpus"
    micro_corpus.save(root)
    again = Corpus.load(root)
    assert len(again.samples) == len(micro_corpus.samples)
    assert again.split.train_ids == micro_corpus.split.train_ids
    # 8-bit quantization on disk
    assert np.max(np.abs(again.samples[0].image - micro_corpus.samples[0].image)) <= 1 / 255


def test_corpus_regeneration_byte_identical(tmp_path, micro_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    Corpus.generate(micro_cfg).save(a)
    Corpus.generate(micro_cfg).save(b)
    for name in ["manifest.json", "split.json", "images/00000.png"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_corpus_attributes_recoverable(desk_corpus):
    # the corpus must be learnable or nothing downstream is testable: an
    # independent oracle should recover each sample's full attribute tuple
    from snapdiff.evalkit import AttributeOracle
    oracle = AttributeOracle()
    oracle.fit(seed=0)
    hits = 0
    for s in desk_corpus.samples:
        got = oracle.classify(s.image)
        hits += int(got == (s.concept.shape, s.concept.color, s.concept.texture))
    assert hits / len(desk_corpus.samples) >= 0.85


def test_scale_attribute_within_bounds():
    for c in make_concepts(30, seed=5):
        assert 0.3 <= c.scale <= 0.7
