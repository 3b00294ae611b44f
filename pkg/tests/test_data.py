import json

import numpy as np
import pytest

from bita.data import (
    COUNT_WORDS,
    PLURALS,
    ImageTextPair,
    Scene,
    SyntheticSpec,
    augment,
    generate_synthetic_dataset,
    load_manifest,
    make_batches,
    read_raw_image,
    render_scene,
    save_manifest,
    scene_captions,
    write_raw_image,
)
from bita.vocab import CLS, EOS, PAD, build_vocab, normalize_words

SPEC = SyntheticSpec()


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic_dataset(SPEC, 64, seed=7)


@pytest.fixture(scope="module")
def vocab(dataset):
    return build_vocab(c for p in dataset for c in p.captions)


def test_generation_is_deterministic(dataset):
    again = generate_synthetic_dataset(SPEC, 64, seed=7)
    assert all(a == b for a, b in zip(dataset, again))
    assert all(a.image.tobytes() == b.image.tobytes() for a, b in zip(dataset, again))
    other = generate_synthetic_dataset(SPEC, 64, seed=8)
    assert any(a.captions != b.captions for a, b in zip(dataset, other))


def test_captions_unique_within_pair_and_dataset(dataset):
    seen = set()
    for p in dataset:
        assert len(set(p.captions)) == len(p.captions)
        assert len(p.captions) == 5
        for c in p.captions:
            assert c not in seen
            seen.add(c)
    assert len({tuple(p.captions) for p in dataset}) == 64


def test_single_red_square_caption():
    scene = Scene(groups=((1, "red", "square"),), cells=((1, 2),))
    for caption in scene_captions(scene):
        words = normalize_words(caption)
        assert "red" in words and "square" in words


def test_captions_truthful_to_scene(dataset):
    vocabulary_of_objects = set(COUNT_WORDS.values()) | set(SPEC.colors) | set(SPEC.shapes) | set(PLURALS.values())
    for p in dataset:
        truth = set()
        for count, color, shape in p.scene.groups:
            truth |= {COUNT_WORDS[count], color, shape if count == 1 else PLURALS[shape]}
        for c in p.captions:
            content = {w for w in normalize_words(c) if w in vocabulary_of_objects} - {"a"}
            assert content <= truth, (c, p.scene.groups)
            assert truth - {"a"} <= set(normalize_words(c))


def test_render_matches_scene(dataset):
    for p in dataset[:10]:
        img = p.image
        assert img.shape == (32, 32, 3) and img.min() >= 0 and img.max() <= 1
        n_objects = sum(g[0] for g in p.scene.groups)
        cell = SPEC.cell_size()
        occupied = 0
        for r in range(SPEC.cells):
            for c in range(SPEC.cells):
                patch = img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell]
                occupied += not np.all(patch == 0.5)
        assert occupied == n_objects
    assert np.array_equal(render_scene(dataset[0].scene), dataset[0].image)


def test_inventory_limit():
    with pytest.raises(ValueError, match="at most"):
        generate_synthetic_dataset(SPEC, 10_000, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(SPEC, 0, seed=0)


def test_pair_validation():
    with pytest.raises(ValueError, match="p1"):
        ImageTextPair("p1", np.zeros((4, 4, 3)), [])
    with pytest.raises(ValueError):
        ImageTextPair("p2", np.full((4, 4, 3), 2.0), ["x"])
    with pytest.raises(ValueError):
        ImageTextPair("p3", np.zeros((4, 4, 3)), ["c"] * 6)


# -------------------------------------------------------------- manifests


def test_manifest_roundtrip_and_order(tmp_path, dataset):
    raw = ImageTextPair("raw-1", np.random.default_rng(0).uniform(0, 1, (32, 32, 3)).astype(np.float32),
                        ["a noisy picture"])
    pairs = dataset[:5] + [raw]
    path = tmp_path / "m.jsonl"
    save_manifest(path, pairs)
    loaded = load_manifest(path)
    assert [p.id for p in loaded] == [p.id for p in pairs]
    assert all(a == b for a, b in zip(loaded, pairs))


def test_manifest_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_manifest(path) == []


def test_manifest_errors_carry_line_and_id(tmp_path, dataset):
    good = json.dumps({"id": "x", "image": "synthetic:" + dataset[0].scene.encode(), "captions": ["c"]})
    path = tmp_path / "bad.jsonl"
    path.write_text(good + "\n{not json\n")
    with pytest.raises(ValueError, match=":2:"):
        load_manifest(path)
    path.write_text(good + "\n" + json.dumps({"id": "nocap", "image": "synthetic:" + dataset[0].scene.encode(),
                                               "captions": []}) + "\n")
    with pytest.raises(ValueError, match="nocap"):
        load_manifest(path)
    path.write_text(json.dumps({"id": "noimg", "captions": ["c"]}) + "\n")
    with pytest.raises(ValueError, match="noimg"):
        load_manifest(path)


def test_raw_image_format(tmp_path):
    img = np.random.default_rng(1).uniform(0, 1, (5, 7, 3))
    path = tmp_path / "img.f32"
    write_raw_image(path, img)
    data = path.read_bytes()
    assert len(data) == 12 + 5 * 7 * 3 * 4
    assert np.frombuffer(data[:12], dtype="<u4").tolist() == [5, 7, 3]
    np.testing.assert_array_equal(read_raw_image(path), img.astype(np.float32))
    path.write_bytes(data[:-4])
    with pytest.raises(ValueError):
        read_raw_image(path)


# ------------------------------------------------------------ augmentation


def test_augment_deterministic_and_sized(dataset):
    img = dataset[0].image
    a = augment(img, 42)
    assert a.tobytes() == augment(img, 42).tobytes()
    assert a.shape == (32, 32, 3)
    assert augment(img, 42, out_size=16).shape == (16, 16, 3)


def test_flip_only_is_an_involution(dataset):
    img = dataset[3].image
    for seed in range(8):
        once = augment(img, seed, crop=False)
        twice = augment(once, seed, crop=False)
        assert np.array_equal(twice, img)
        assert np.array_equal(once, img) or np.array_equal(once, img[:, ::-1])


# ----------------------------------------------------------------- batches


def test_batches_deterministic_per_epoch_seed(dataset, vocab):
    a = list(make_batches(dataset, 16, 3, vocab, 16, "full"))
    b = list(make_batches(dataset, 16, 3, vocab, 16, "full"))
    assert len(a) == 4
    for x, y in zip(a, b):
        assert x.ids == y.ids and x.images.tobytes() == y.images.tobytes()
        assert np.array_equal(x.lm_input, y.lm_input)


def test_short_batch_dropped_and_size_checked(dataset, vocab):
    assert len(list(make_batches(dataset[:40], 16, 0, vocab, 16))) == 2
    with pytest.raises(ValueError):
        list(make_batches(dataset[:8], 16, 0, vocab, 16))
    with pytest.raises(ValueError):
        list(make_batches(dataset, 1, 0, vocab, 16))


def test_no_duplicate_captions_in_any_batch(dataset, vocab):
    for epoch in range(100):
        for batch in make_batches(dataset, 16, epoch, vocab, 16):
            assert len(set(batch.captions)) == len(batch.captions)


def test_batch_tensors_aligned_and_padded(dataset, vocab):
    batch = next(iter(make_batches(dataset, 16, 0, vocab, 16)))
    by_id = {p.id: p for p in dataset}
    for i, (pid, cap) in enumerate(zip(batch.ids, batch.captions)):
        assert cap in by_id[pid].captions
        assert np.array_equal(batch.images[i], by_id[pid].image)
        n = len(normalize_words(cap))
        assert batch.text_ids[i, 0] == CLS
        assert np.all(batch.text_ids[i, n + 1:] == PAD)
        assert batch.lm_target[i, n] == EOS
        assert np.all(batch.lm_target[i, n + 1:] == PAD)
    assert np.array_equal(batch.text_mask, batch.text_ids != PAD)
    assert np.array_equal(batch.lm_mask, batch.lm_target != PAD)
    lengths = batch.lm_mask.sum(axis=1)
    assert batch.lm_input.shape[1] == lengths.max()
