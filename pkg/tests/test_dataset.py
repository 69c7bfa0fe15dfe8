import json

import numpy as np
import pytest

from glyphdiff.dataset import (caption_for, load_dataset, procedural_background,
                               save_dataset, synth_dataset, synth_shape_dataset)
from glyphdiff.glyphs import make_scripts
from glyphdiff.metrics import template_ocr
from glyphdiff.raster import validate_layout


@pytest.fixture(scope="module")
def scripts():
    return make_scripts(2, 8, seed=11)


def test_small_text_count_exact(scripts):
    samples = synth_dataset(scripts, 100, 48, 48, 0.3, seed=5)
    assert sum(s.small_text for s in samples) == 30
    assert all(all(ln.font_px <= 12 for ln in s.layout.lines)
               for s in samples if s.small_text)
    assert all(all(ln.font_px > 12 for ln in s.layout.lines)
               for s in samples if not s.small_text)


def test_zero_small_fraction(scripts):
    samples = synth_dataset(scripts, 10, 48, 48, 0.0, seed=1)
    assert not any(s.small_text for s in samples)


def test_rejects_bad_args(scripts):
    with pytest.raises(ValueError):
        synth_dataset(scripts, 0, 48, 48, 0.0, seed=1)
    with pytest.raises(ValueError):
        synth_dataset(scripts, 5, 48, 48, 1.5, seed=1)
    with pytest.raises(ValueError):
        synth_dataset(scripts, 5, 48, 48, 0.5, seed=1, script_weights=[1.0])


def test_determinism_and_shard_independence(scripts):
    a = synth_dataset(scripts, 12, 32, 32, 0.25, seed=7)
    b = synth_dataset(scripts, 12, 32, 32, 0.25, seed=7)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image)
        assert x.caption == y.caption


def test_disjoint_seeds_give_different_backgrounds():
    rng1 = np.random.default_rng(1)
    rng2 = np.random.default_rng(2)
    b1 = procedural_background(32, 32, rng1)
    b2 = procedural_background(32, 32, rng2)
    assert not np.array_equal(b1, b2)
    assert b1.max() <= 0.6 and b1.min() >= 0.02


def test_layouts_valid_and_captions_mention_text(scripts):
    samples = synth_dataset(scripts, 30, 48, 48, 0.3, seed=3)
    for s in samples:
        validate_layout(s.layout, 48, 48)
        for ln in s.layout.lines:
            assert f'"{ln.text}"' in s.caption
        assert len(s.script_ids) == len(s.layout.lines)


def test_rendered_text_matches_layout(scripts):
    by_id = {s.script_id: s for s in scripts}
    samples = synth_dataset(scripts, 10, 48, 48, 0.0, seed=13)
    for s in samples:
        script = by_id[s.script_ids[0]]
        res = template_ocr(s.condition, s.layout, script)
        assert all(ln.match for ln in res.lines)


def test_caption_template():
    assert caption_for([]) == "a scene"
    assert caption_for(["ab"]) == 'a scene with the text "ab"'
    assert caption_for(["ab", "c"]) == 'a scene with the text "ab" and the text "c"'


def test_script_weighting_biases_draws(scripts):
    samples = synth_dataset(scripts, 300, 32, 32, 0.0, seed=2, script_weights=[10, 1])
    n0 = sum(s.script_ids[0] == "S0" for s in samples)
    assert n0 > 230  # expect ~273


def test_save_load_roundtrip(tmp_path, scripts):
    samples = synth_dataset(scripts, 6, 32, 32, 0.5, seed=4)
    h = save_dataset(samples, scripts, tmp_path)
    loaded, lscripts, lh = load_dataset(tmp_path)
    assert h == lh
    assert len(loaded) == 6
    assert [s.script_id for s in lscripts] == ["S0", "S1"]
    for a, b in zip(samples, loaded):
        assert np.abs(a.image - b.image).max() <= 1.0 / 255.0
        assert a.caption == b.caption
        assert a.layout.to_dict() == b.layout.to_dict()
        assert a.small_text == b.small_text


def test_meta_jsonl_byte_identical(tmp_path, scripts):
    samples = synth_dataset(scripts, 5, 32, 32, 0.2, seed=4)
    save_dataset(samples, scripts, tmp_path / "a")
    save_dataset(samples, scripts, tmp_path / "b")
    assert ((tmp_path / "a" / "meta.jsonl").read_bytes()
            == (tmp_path / "b" / "meta.jsonl").read_bytes())


def test_shape_dataset_edge_conditions():
    shapes = synth_shape_dataset(4, 32, 32, seed=6)
    for s in shapes:
        assert s.layout.empty
        assert s.condition.shape == (3, 32, 32)
        assert set(np.unique(s.condition)) <= {0.0, 1.0}
        assert s.condition.sum() > 0  # scenes have some edges
        assert np.array_equal(s.condition[0], s.condition[1])
