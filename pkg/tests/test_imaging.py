import csv
import hashlib
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sr3endo.imaging import (ImageFormatError, Pair, TooSmallError, augment, bicubic_resize, clean_image,
                             detect_green_block, load_image, make_pair, open_corpus, preprocess_corpus,
                             read_manifest, resample_matrix, save_image, synth_toy_dataset, synth_toy_image,
                             toy_splits)
from sr3endo.tensor import Rng

from oracles import bicubic_loop

GREEN = (0.1, 0.85, 0.2)


def tissue(h, w, seed=0):
    """Reddish endoscopy-like background with no green pixels."""
    r = np.random.default_rng(seed)
    img = np.empty((h, w, 3))
    img[..., 0] = r.uniform(0.55, 0.9, (h, w))
    img[..., 1] = r.uniform(0.2, 0.4, (h, w))
    img[..., 2] = r.uniform(0.15, 0.35, (h, w))
    return img


def with_block(img, left, top, right, bottom):
    img = img.copy()
    img[top:bottom, left:right] = GREEN
    return img


def png_bytes(pixels: np.ndarray) -> bytes:
    """Minimal PNG encoder (RGB8, no filtering) built from zlib and struct only."""
    h, w, _ = pixels.shape

    def chunk(kind, data):
        return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data))

    raw = b"".join(b"\x00" + pixels[y].astype(np.uint8).tobytes() for y in range(h))
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


# I/O ------------------------------------------------------------------------------------

def test_lossless_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 5, 3)) / 255.0
    save_image(img, tmp_path / "a.png")
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), img)


def test_single_pixel_roundtrip(tmp_path):
    img = np.array([[[10, 20, 30]]]) / 255.0
    save_image(img, tmp_path / "p.png")
    out = load_image(tmp_path / "p.png")
    assert out.shape == (1, 1, 3)
    np.testing.assert_array_equal(np.round(out * 255), [[[10, 20, 30]]])


def test_decode_independently_encoded_fixture(tmp_path):
    pix = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]],
                    [[12, 34, 56], [200, 100, 50], [1, 2, 3]]], dtype=np.uint8)
    data = png_bytes(pix)
    path = tmp_path / "fixture.png"
    path.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    assert hashlib.sha256(path.read_bytes()).hexdigest() == digest
    np.testing.assert_array_equal(np.round(load_image(path) * 255).astype(np.uint8), pix)


def test_load_errors_name_the_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(png_bytes(np.zeros((4, 4, 3)))[:30])
    with pytest.raises(ImageFormatError, match="broken.png"):
        load_image(bad)
    with pytest.raises(ImageFormatError, match="missing.png"):
        load_image(tmp_path / "missing.png")


def test_jpeg_loads(tmp_path):
    from PIL import Image
    Image.fromarray(np.full((8, 8, 3), 128, np.uint8)).save(tmp_path / "x.jpg", quality=95)
    assert np.abs(load_image(tmp_path / "x.jpg") - 128 / 255).max() < 0.02


# green blocks ------------------------------------------------------------------------------

def test_pure_red_has_no_block():
    img = np.zeros((100, 100, 3))
    img[..., 0] = 1
    assert detect_green_block(img) is None


def test_bottom_left_rectangle_detected():
    img = with_block(tissue(300, 400), 0, 240, 80, 300)  # 80 wide, 60 tall
    block = detect_green_block(img)
    assert block is not None
    np.testing.assert_allclose(block.box, (0, 240, 80, 300), atol=1)


def test_top_right_rectangle_ignored():
    img = with_block(tissue(300, 400), 320, 0, 400, 60)
    assert detect_green_block(img) is None


def test_tiny_green_speck_ignored():
    img = with_block(tissue(200, 200), 5, 190, 10, 195)
    assert detect_green_block(img) is None


def test_clean_image_identity_on_clean_input():
    img = tissue(64, 64)
    res = clean_image(img)
    assert res.action == "kept" and res.image is img


def test_clean_crops_small_block():
    h, w = 400, 500
    img = with_block(tissue(h, w), 0, h - 60, 100, h)  # 20% of width, 15% of height
    res = clean_image(img)
    assert res.action == "cropped"
    out = res.image
    assert out.size / img.size > 0.6
    assert detect_green_block(out) is None
    left, top, right, bottom = res.box
    assert bottom <= h - 60 or left >= 100  # disjoint from the block


def test_clean_rejects_large_block():
    h, w = 200, 200
    img = with_block(tissue(h, w), 0, 59, 141, h)  # about half the image
    res = clean_image(img)
    assert res.action == "rejected-area" and res.image is None


@pytest.mark.parametrize("box", [None, (0, 340, 100, 400), (0, 200, 250, 400)])
def test_clean_idempotent(box):
    img = tissue(400, 400, 3)
    if box:
        img = with_block(img, *box)
    once = clean_image(img)
    if once.image is None:
        return
    twice = clean_image(once.image)
    assert twice.action == "kept"
    np.testing.assert_array_equal(twice.image, once.image)


# bicubic -------------------------------------------------------------------------------------

@pytest.mark.parametrize("size", [(5, 7), (16, 16), (3, 1)])
def test_constant_preserved(size):
    img = np.full((9, 12, 3), 0.37)
    np.testing.assert_allclose(bicubic_resize(img, *size), 0.37, atol=1e-12)


def test_identity_at_same_size():
    img = np.random.default_rng(0).uniform(size=(13, 17, 3))
    np.testing.assert_allclose(bicubic_resize(img, 17, 13), img, atol=1e-6)


def test_linear_ramp_upscaled_stays_linear():
    w = 16
    ramp = np.tile(np.arange(w, dtype=np.float64) / w, (4, 1))[..., None].repeat(3, 2)
    out = bicubic_resize(ramp, 2 * w, 4)
    x = (np.arange(2 * w) + 0.5) / 2 - 0.5  # source coordinate of each output pixel
    interior = slice(4, 2 * w - 4)
    np.testing.assert_allclose(out[:, interior, 0], np.tile(x[interior] / w, (4, 1)), atol=1e-6)


def test_upscale_matches_loop_oracle():
    img = np.random.default_rng(1).uniform(size=(16, 16, 3))
    np.testing.assert_allclose(bicubic_resize(img, 64, 64), bicubic_loop(img, 64, 64), atol=1e-6)


def test_downscale_matches_loop_oracle():
    img = np.random.default_rng(2).uniform(size=(24, 32, 3))
    np.testing.assert_allclose(bicubic_resize(img, 8, 6), bicubic_loop(img, 8, 6), atol=1e-6)


def test_resample_rows_sum_to_one():
    for n_in, n_out in [(10, 3), (3, 10), (64, 8), (7, 7)]:
        np.testing.assert_allclose(resample_matrix(n_in, n_out).sum(1), 1, atol=1e-12)


# pairs --------------------------------------------------------------------------------------

def test_pair_scale_one():
    p = make_pair(np.random.default_rng(0).uniform(size=(20, 24, 3)), 16, 1)
    np.testing.assert_allclose(p.lr_up, p.hr, atol=1e-6)


def test_pair_sizes_full_scale():
    p = make_pair(tissue(520, 600), 512, 8)
    assert p.hr.shape == (512, 512, 3) and p.lr.shape == (64, 64, 3) and p.lr_up.shape == (512, 512, 3)


def test_pair_composition():
    p = make_pair(np.random.default_rng(4).uniform(size=(48, 40, 3)), 32, 4)
    np.testing.assert_array_equal(p.lr, bicubic_resize(p.hr, 8, 8))
    np.testing.assert_array_equal(p.lr_up, bicubic_resize(bicubic_resize(p.hr, 8, 8), 32, 32))


def test_pair_too_small():
    with pytest.raises(TooSmallError):
        make_pair(tissue(30, 50), 32, 4)


def _pair(seed=0):
    p = make_pair(np.random.default_rng(seed).uniform(size=(16, 16, 3)), 16, 4)
    return p


def test_double_flip_identity():
    p = _pair()
    flipped = Pair(p.lr[:, ::-1], p.hr[:, ::-1], p.lr_up[:, ::-1])
    np.testing.assert_array_equal(flipped.hr[:, ::-1], p.hr)


def test_augment_alignment_and_reproducibility():
    p = _pair()
    seen = set()
    for seed in range(16):
        a = augment(p, Rng(seed))
        b = augment(p, Rng(seed))
        np.testing.assert_array_equal(a.hr, b.hr)
        # undo whichever flips were applied using hr, then lr_up must line up too
        for hf in (False, True):
            for vf in (False, True):
                undo = lambda x: (x[:, ::-1] if hf else x)[::-1] if vf else (x[:, ::-1] if hf else x)
                if np.array_equal(undo(a.hr), p.hr):
                    np.testing.assert_array_equal(undo(a.lr_up), p.lr_up)
                    np.testing.assert_array_equal(undo(a.lr), p.lr)
                    seen.add((hf, vf))
    assert len(seen) == 4


# toy data ---------------------------------------------------------------------------------

def test_toy_deterministic_and_clamped():
    a = synth_toy_dataset(5, 32, Rng(3))
    b = synth_toy_dataset(5, 32, Rng(3))
    for i in a.index:
        x, y = a.load(i), b.load(i)
        assert x.tobytes() == y.tobytes()
        assert x.min() >= 0 and x.max() <= 1


def test_toy_mean_brightness():
    means = [synth_toy_image(s, 16).mean() for s in range(1000)]
    assert 0.4 <= np.mean(means) <= 0.6


def test_toy_splits_disjoint():
    tr, va = toy_splits(10, 3, 16, 4, seed=0)
    assert not set(tr.index) & set(va.index)
    assert len(tr) == 10 and len(va) == 3


def test_batches_resume_from_any_step():
    tr, _ = toy_splits(7, 1, 16, 4, seed=1)
    full = tr.batches(3, Rng(5))
    seq = [next(full) for _ in range(6)]
    resumed = tr.batches(3, Rng(5), start=4)
    for k in (4, 5):
        b = next(resumed)
        np.testing.assert_array_equal(b.y0, seq[k].y0)
        np.testing.assert_array_equal(b.x_cond, seq[k].x_cond)


def test_batches_visit_every_item_each_epoch():
    tr, _ = toy_splits(6, 1, 16, 4, seed=1)
    tr_ids = []
    stream = tr.batches(2, Rng(0), augment_flips=False)
    ref = {i: tr.batch([i]).y0[0].tobytes() for i in tr.index}
    for _ in range(3):
        for y in next(stream).y0:
            tr_ids.append(next(k for k, v in ref.items() if v == y.tobytes()))
    assert sorted(tr_ids) == sorted(tr.index)


# corpus ------------------------------------------------------------------------------------------

def make_raw(root, n_clean=3, green_big=False):
    for k in range(n_clean):
        save_image(tissue(40, 48, k), root / "polyps" / f"img{k}.png")
    if green_big:
        save_image(with_block(tissue(40, 40, 9), 0, 12, 29, 40), root / "polyps" / "dirty.png")


def test_preprocess_corpus(tmp_path):
    raw = tmp_path / "raw"
    make_raw(raw, 3, green_big=True)
    save_image(tissue(20, 20), raw / "small.png")
    save_image(with_block(tissue(64, 64), 0, 56, 10, 64), raw / "cropme.png")
    report = preprocess_corpus(raw, tmp_path / "out", 32, 4, val_fraction=0.25, seed=0)
    actions = {r["id"]: r["action"] for r in report}
    assert actions["polyps__dirty"] == "rejected-area"
    assert actions["small"] == "rejected-small"
    assert actions["cropme"] == "cropped"
    assert sum(a == "kept" for a in actions.values()) == 3
    rows = read_manifest(tmp_path / "out")
    assert len(rows) == 4 and {r["split"] for r in rows} == {"train", "val"}
    assert {r["label"] for r in rows} == {"polyps", "unlabeled"}
    for r in rows:
        img = load_image(tmp_path / "out" / r["split"] / f"{r['id']}.png")
        assert img.shape == (32, 32, 3) and detect_green_block(img) is None
    tr = open_corpus(tmp_path / "out", "train", 32, 4)
    b = tr.batch(tr.index[:2])
    assert b.y0.shape == (2, 3, 32, 32)
    with open(tmp_path / "out" / "preprocess_report.tsv") as fh:
        assert next(csv.reader(fh, delimiter="\t")) == ["id", "action", "crop_box"]


def test_preprocess_rerun_identical(tmp_path):
    raw = tmp_path / "raw"
    make_raw(raw, 4)
    preprocess_corpus(raw, tmp_path / "a", 32, 4)
    preprocess_corpus(raw, tmp_path / "b", 32, 4)
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()


@given(st.integers(2, 40), st.integers(2, 40), st.integers(1, 40), st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_resize_range_property(h, w, oh, ow):
    img = np.random.default_rng(h * 41 + w).uniform(size=(h, w, 3))
    out = bicubic_resize(img, ow, oh)
    assert out.shape == (oh, ow, 3)
    # Catmull-Rom overshoots slightly at edges but stays close to the input range
    assert out.min() > -0.2 and out.max() < 1.2
