import numpy as np
import pytest

from ssc import data


@pytest.fixture(scope="module")
def freq_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("freq_corpus")
    data.generate_synthetic_corpus(root, 500, 3, 64, seed=7)
    return root


def test_single_image_corpus(tmp_path):
    root = tmp_path / "one"
    data.generate_synthetic_corpus(root, 1, 2, 64, seed=0)
    lines = [ln for ln in (root / "labels.txt").read_text().splitlines() if ln]
    assert len(lines) == 2  # header + one entry
    assert len(list((root / "images").iterdir())) == 1
    assert len(list((root / "masks").iterdir())) == 1


def test_generation_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    data.generate_synthetic_corpus(a, 12, 3, 64, seed=5)
    data.generate_synthetic_corpus(b, 12, 3, 64, seed=5)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_class_frequencies_bounded(freq_corpus):
    corpus = data.load_corpus(freq_corpus)
    counts = np.zeros(corpus.n_classes)
    for _, classes in corpus.entries:
        counts[np.asarray(classes) - 1] += 1
    freq = counts / len(corpus)
    assert np.all(freq >= 0.2) and np.all(freq <= 0.8), freq


def test_mask_labels_subset_of_label_vector(freq_corpus):
    corpus = data.load_corpus(freq_corpus)
    for item in corpus:
        present = set(np.nonzero(item.labels)[0] + 1)
        mask_classes = set(np.unique(item.mask)) - {0}
        assert mask_classes <= present, item.id


def test_invalid_arguments(tmp_path):
    with pytest.raises(ValueError):
        data.generate_synthetic_corpus(tmp_path / "x", 1, 1, 64, seed=0)
    with pytest.raises(ValueError):
        data.generate_synthetic_corpus(tmp_path / "x", 1, 9, 64, seed=0)
    with pytest.raises(ValueError):
        data.generate_synthetic_corpus(tmp_path / "x", 1, 3, 60, seed=0)
    with pytest.raises(ValueError):
        data.generate_synthetic_corpus(tmp_path / "x", 1, 3, 16, seed=0)


def test_image_invariants(tmp_path):
    root = tmp_path / "c"
    data.generate_synthetic_corpus(root, 4, 3, 64, seed=3)
    for item in data.load_corpus(root):
        assert item.image.shape == (64, 64, 3)
        assert item.image.min() >= 0.0 and item.image.max() <= 1.0
        assert item.labels.sum() >= 1


def test_png_round_trip(tmp_path):
    rng = np.random.Generator(np.random.PCG64(0))
    pixels = data.quantize(rng.random((48, 32, 3)).astype(np.float32))
    data.save_image_png(tmp_path / "x.png", pixels)
    loaded = data.load_image_png(tmp_path / "x.png")
    np.testing.assert_array_equal(loaded, pixels)


def _write_manual_corpus(root, n_classes=4, entries=(("img7", "2,3"),), size=32):
    (root / "images").mkdir(parents=True)
    header = "classes %d %s" % (n_classes, " ".join(f"c{i}" for i in range(1, n_classes + 1)))
    lines = [header] + [f"{i} {spec}" for i, spec in entries]
    (root / "labels.txt").write_text("\n".join(lines) + "\n")
    rng = np.random.Generator(np.random.PCG64(1))
    for image_id, _ in entries:
        data.save_image_png(root / "images" / f"{image_id}.png", rng.random((size, size, 3)))


def test_loader_length_and_encoding(tmp_path):
    root = tmp_path / "man"
    _write_manual_corpus(root, entries=(("img7", "2,3"), ("img8", "1"), ("img9", "4")))
    corpus = data.load_corpus(root)
    items = list(corpus)
    assert len(items) == 3
    np.testing.assert_array_equal(items[0].labels, [0.0, 1.0, 1.0, 0.0])
    assert all(item.mask is None for item in items)  # no masks/ directory, no error


def test_loader_missing_image(tmp_path):
    root = tmp_path / "man"
    _write_manual_corpus(root, entries=(("img7", "1"),))
    (root / "images" / "img7.png").unlink()
    with pytest.raises(FileNotFoundError, match="img7"):
        list(data.load_corpus(root))


def test_loader_malformed_line(tmp_path):
    root = tmp_path / "man"
    _write_manual_corpus(root)
    text = (root / "labels.txt").read_text() + "broken line here\n"
    (root / "labels.txt").write_text(text)
    with pytest.raises(data.CorpusFormatError, match=":3"):
        data.load_corpus(root)


def test_loader_bad_class_index(tmp_path):
    root = tmp_path / "man"
    _write_manual_corpus(root, entries=(("img7", "0,2"),))
    with pytest.raises(data.CorpusFormatError, match="1..4"):
        data.load_corpus(root)


def test_loader_header_mismatch(tmp_path):
    root = tmp_path / "man"
    (root / "images").mkdir(parents=True)
    (root / "labels.txt").write_text("classes 3 only two\n")
    with pytest.raises(data.CorpusFormatError, match="class names"):
        data.load_corpus(root)


# --- augmentation ---------------------------------------------------------

def test_flip_is_involution():
    rng = np.random.Generator(np.random.PCG64(2))
    image = rng.random((64, 64, 3)).astype(np.float32)
    params = data.AugmentParams(flip=True, scale=1.0, dy=0.5, dx=0.5)
    once = data.apply_augment(image, params, 64)
    twice = data.apply_augment(once, params, 64)
    np.testing.assert_array_equal(twice, image)


def test_identity_draw():
    rng = np.random.Generator(np.random.PCG64(2))
    image = rng.random((64, 64, 3)).astype(np.float32)
    params = data.AugmentParams(flip=False, scale=1.0, dy=0.3, dx=0.7)
    np.testing.assert_array_equal(data.apply_augment(image, params, 64), image)


def test_augment_output_dims(rng):
    image = rng.random((64, 64, 3)).astype(np.float32)
    for _ in range(50):
        out = data.augment(image, rng, out_size=64)
        assert out.shape == (64, 64, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_labels_follow_geometry(rng):
    labels = (rng.random((64, 64)) * 5).astype(np.int64)
    params = data.AugmentParams(flip=True, scale=1.2, dy=0.4, dx=0.6)
    out = data.apply_augment_labels(labels, params, 64)
    assert out.shape == (64, 64)
    assert set(np.unique(out)) <= set(np.unique(labels))
