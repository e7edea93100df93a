import os

import numpy as np
import pytest
from scipy import ndimage

from peftlab.data import (
    DESCRIPTOR,
    GRID_LABELS,
    POLYP_COLOR,
    build_prompts,
    build_tokenizer,
    cell_of,
    corpus_checksum,
    generate_corpus,
    load_corpus,
    load_external_metadata,
    make_image,
    questions_for,
    save_corpus,
    save_png,
    split_80_20,
)
from peftlab.errors import InputError, ParseError
from peftlab.text import MEDVQA


def polyp_mask(pixels):
    """Pixels close to the polyp colour; backgrounds are clipped far below it."""
    return np.all(np.abs(pixels - POLYP_COLOR) < 0.15, axis=-1)


def write_corpus(path, seed):
    images, examples = generate_corpus(15, seed)
    save_corpus(str(path), images, examples, build_tokenizer(examples), split_80_20(examples, seed), seed, 32)
    return corpus_checksum(str(path))


def test_same_seed_byte_identical(tmp_path):
    assert write_corpus(tmp_path / "a", 0) == write_corpus(tmp_path / "b", 0)
    assert write_corpus(tmp_path / "c", 1) != write_corpus(tmp_path / "a", 0)


def test_corpus_roundtrip(tmp_path):
    write_corpus(tmp_path, 2)
    c = load_corpus(str(tmp_path))
    images, examples = generate_corpus(15, 2)
    assert [e.to_json() for e in c.examples] == [e.to_json() for e in examples]
    # PNG is 8-bit, so pixels agree to quantization
    assert np.max(np.abs(c.images[images[0].id] - images[0].pixels)) <= 0.5 / 255 + 1e-12


def test_zero_count_rules():
    img = make_image("x", np.random.default_rng(0), count=0)
    qa = {e.category: e.answer for e in questions_for(img)}
    assert qa == {"count": ["0"], "yesno": ["no"]}


def test_one_polyp_count_question():
    img = make_image("x", np.random.default_rng(1), count=1)
    qa = {e.category: e for e in questions_for(img)}
    assert qa["count"].question == [MEDVQA, "how", "many", "polyps", "are", "in", "the", "image"]
    assert qa["count"].answer == ["1"]
    assert qa["yesno"].answer == ["yes"]
    assert " ".join(qa["location"].answer) == img.polyp_locations[0]


@pytest.mark.parametrize("seed", range(12))
def test_labels_recoverable_from_pixels(seed):
    img = make_image("x", np.random.default_rng(seed), count=seed % 5)
    labels, n = ndimage.label(polyp_mask(img.pixels))
    assert n == img.polyp_count
    found = sorted(
        GRID_LABELS[cell_of(ys.mean() + 0.5, xs.mean() + 0.5, 32)]
        for ys, xs in (np.nonzero(labels == k) for k in range(1, n + 1))
    )
    assert found == sorted(img.polyp_locations)


def test_counts_cover_all_values():
    images, _ = generate_corpus(20, 0)
    assert sorted({i.polyp_count for i in images}) == [0, 1, 2, 3, 4]


def test_split_sizes_disjoint_and_deterministic():
    _, examples = generate_corpus(100, 0)
    s = split_80_20(examples, seed=5)
    assert len(s.train_ids) == 80 and len(s.validation_ids) == 20
    assert not set(s.train_ids) & set(s.validation_ids)
    assert split_80_20(examples, seed=5).train_ids == s.train_ids


def test_small_inputs_rejected():
    with pytest.raises(InputError):
        generate_corpus(3)
    with pytest.raises(InputError):
        make_image("x", np.random.default_rng(0), size=16)


def test_prompts():
    images, _ = generate_corpus(10, 0)
    by_count = {i.polyp_count: p for i, p in zip(images, build_prompts(images))}
    assert by_count[1].startswith(DESCRIPTOR) and "one polyp in the" in by_count[1]
    assert by_count[0] == f"{DESCRIPTOR} with no polyp"
    assert len(set(by_count.values())) == 5


def _fixture(tmp_path, rows):
    img = make_image("x", np.random.default_rng(0), count=1)
    save_png(str(tmp_path / "a.png"), img.pixels)
    path = tmp_path / "meta.csv"
    path.write_text("image_path,question,answer\n" + "".join(r + "\n" for r in rows))
    return str(path)


def test_external_metadata(tmp_path):
    assert load_external_metadata(_fixture(tmp_path, [])) == ([], {})
    rows = ["a.png,How many polyps are in the image?,1", "a.png,Is there a polyp?,yes", "a.png,Where?,central"]
    examples, images = load_external_metadata(_fixture(tmp_path, rows))
    assert [(e.answer, e.category) for e in examples] == [(["1"], "count"), (["yes"], "yesno"),
                                                          (["central"], "location")]
    assert all(e.question[0] == MEDVQA for e in examples)
    assert set(images) == {"a.png"} and images["a.png"].shape == (32, 32, 3)


def test_external_metadata_errors(tmp_path):
    with pytest.raises(ParseError, match="row 2"):
        load_external_metadata(_fixture(tmp_path, ["a.png,q,1", "a.png,q"]))
    with pytest.raises(ParseError, match="not found"):
        load_external_metadata(_fixture(tmp_path, ["missing.png,q,1"]))
    with pytest.raises(ParseError):
        load_external_metadata(os.path.join(str(tmp_path), "nope.csv"))
