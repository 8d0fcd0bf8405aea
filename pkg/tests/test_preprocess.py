import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdnet.errors import BackendFailure, BoxOutOfRange, DegenerateImage, EmptyMask, ImageReadError
from sdnet.preprocess import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    Box,
    CallableBackend,
    FullImageBackend,
    LungMask,
    TorchModuleBackend,
    bounding_box,
    crop,
    expand_and_clamp,
    prepare_image,
    read_image,
    save_crop,
    segment_and_crop,
    segment_lungs,
    write_png,
)


def const_backend(value):
    return CallableBackend(lambda im: np.full(im.shape[:2], value), f"const-{value}")


def test_segment_saturation_and_threshold():
    img = np.zeros((6, 9), np.uint8)
    assert segment_lungs(img, FullImageBackend()).data.all()
    assert not segment_lungs(img, const_backend(0.0)).data.any()
    # >= rule at the threshold
    assert segment_lungs(img, const_backend(0.5), threshold=0.5).data.all()
    assert not segment_lungs(img, const_backend(0.4999), threshold=0.5).data.any()


def test_backend_failures():
    img = np.zeros((6, 9), np.uint8)
    with pytest.raises(BackendFailure):
        segment_lungs(img, CallableBackend(lambda im: np.ones((3, 3)), "bad-shape"))
    with pytest.raises(BackendFailure):
        segment_lungs(img, CallableBackend(lambda im: 1 / 0, "boom"))
    with pytest.raises(BackendFailure):
        segment_lungs(img, const_backend(1.5))


def test_torch_module_backend_shape():
    import torch

    class Half(torch.nn.Module):
        def forward(self, x):
            return torch.zeros_like(x)

    backend = TorchModuleBackend(Half(), "half", input_side=16)
    prob = backend.predict(np.zeros((20, 30, 3), np.uint8))
    assert prob.shape == (20, 30)
    np.testing.assert_allclose(prob, 0.5)


def test_bounding_box_examples():
    m = np.zeros((30, 30), bool)
    m[10:21, 5:16] = True
    assert bounding_box(LungMask(m)) == Box(5, 10, 15, 20)
    m = np.zeros((10, 10), bool)
    m[7, 3] = True  # x=3, y=7
    assert bounding_box(LungMask(m)) == Box(3, 7, 3, 7)
    with pytest.raises(EmptyMask):
        bounding_box(LungMask(np.zeros((4, 4), bool)))


def test_bounding_box_spans_components():
    m = np.zeros((20, 40), bool)
    m[5:15, 2:10] = True
    m[3:12, 25:35] = True
    assert bounding_box(LungMask(m)) == Box(2, 3, 34, 14)


def test_expand_worked_example():
    # dx = dy = round-half-up(0.025 * 500) = 13
    assert expand_and_clamp(Box(200, 100, 699, 599), 0.025, 1000, 800) == Box(187, 87, 712, 612)


def test_expand_clamps_and_identity():
    assert expand_and_clamp(Box(0, 0, 99, 49), 0.1, 200, 100) == Box(0, 0, 109, 54)
    assert expand_and_clamp(Box(150, 60, 199, 99), 0.5, 200, 100) == Box(125, 40, 199, 99)
    b = Box(3, 4, 50, 60)
    assert expand_and_clamp(b, 0.0, 100, 100) == b


def test_expand_image_relative():
    # 2.5% of a 1000 x 800 image -> 25 and 20 pixels
    assert expand_and_clamp(Box(200, 100, 699, 599), 0.025, 1000, 800, relative_to="image") == Box(175, 80, 724, 619)


def test_crop_examples():
    img = np.arange(100 * 100, dtype=np.uint16).reshape(100, 100)
    np.testing.assert_array_equal(crop(img, Box.full(100, 100)), img)
    corner = crop(img, Box(0, 0, 0, 0))
    assert corner.shape == (1, 1) and corner[0, 0] == img[0, 0]
    out = crop(img, Box(10, 10, 59, 59))
    assert out.shape == (50, 50)
    np.testing.assert_array_equal(out, img[10:60, 10:60])
    with pytest.raises(BoxOutOfRange):
        crop(img, Box(0, 0, 100, 5))


@st.composite
def image_and_box(draw):
    w = draw(st.integers(1, 3000))
    h = draw(st.integers(1, 3000))
    x0 = draw(st.integers(0, w - 1))
    x1 = draw(st.integers(x0, w - 1))
    y0 = draw(st.integers(0, h - 1))
    y1 = draw(st.integers(y0, h - 1))
    return w, h, Box(x0, y0, x1, y1)


@settings(max_examples=300, deadline=None)
@given(image_and_box(), st.floats(0, 0.5))
def test_expand_contains_and_stays_valid(wb, margin):
    w, h, box = wb
    out = expand_and_clamp(box, margin, w, h)
    assert out.is_valid(w, h)
    assert out.contains(box)


@settings(max_examples=100, deadline=None)
@given(image_and_box())
def test_crop_dims_match_box(wb):
    w, h, box = wb
    img = np.zeros((min(h, 3000), min(w, 3000)), np.uint8)
    out = crop(img, box)
    assert out.shape == (box.height, box.width)


def test_segment_and_crop_fallback(caplog):
    img = np.random.default_rng(0).integers(0, 255, (40, 50), dtype=np.uint8)
    res = segment_and_crop(img, const_backend(0.0))
    assert res.empty_mask_fallback
    assert res.box == Box.full(50, 40)
    np.testing.assert_array_equal(res.image, img)
    assert "empty lung mask" in caplog.text


def test_segment_and_crop_with_mask():
    def lungs(im):
        p = np.zeros(im.shape[:2])
        p[100:500, 200:700] = 0.9
        return p

    img = np.zeros((800, 1000), np.uint8)
    res = segment_and_crop(img, CallableBackend(lungs, "lungs"))
    assert res.box == Box(187, 90, 712, 509)  # dx = round(12.5) = 13, dy = round(10.0) = 10
    assert res.image.shape == (420, 526)
    assert not res.empty_mask_fallback


def test_prepare_shapes_and_values():
    out = prepare_image(np.zeros((50, 80), np.uint8), side=224)
    assert out.shape == (3, 224, 224) and out.dtype == np.float32
    expected = (0 - np.array(IMAGENET_MEAN)) / np.array(IMAGENET_STD)
    for c in range(3):
        np.testing.assert_allclose(out[c], expected[c], rtol=1e-6)


def test_prepare_no_resize_when_already_sized():
    rng = np.random.default_rng(1)
    rgb = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    out = prepare_image(rgb, side=224)
    raw = np.transpose(rgb, (2, 0, 1)) / 255.0
    back = out * np.array(IMAGENET_STD)[:, None, None] + np.array(IMAGENET_MEAN)[:, None, None]
    np.testing.assert_allclose(back, raw, atol=1e-6)


def test_prepare_gray_replicated_and_16bit():
    img = np.full((10, 10), 65535, np.uint16)
    out = prepare_image(img, side=8, mean=(0, 0, 0), std=(1, 1, 1))
    np.testing.assert_allclose(out, 1.0, rtol=1e-6)


def test_prepare_degenerate():
    with pytest.raises(DegenerateImage):
        prepare_image(np.zeros((0, 5), np.uint8))


def test_read_write_roundtrip(tmp_path):
    img = np.random.default_rng(2).integers(0, 255, (12, 17), dtype=np.uint8)
    write_png(img, tmp_path / "a.png")
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)
    img16 = (img.astype(np.uint16) * 257)
    write_png(img16, tmp_path / "b.png")
    assert read_image(tmp_path / "b.png").dtype == np.uint16
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(ImageReadError, match="x1"):
        read_image(tmp_path / "bad.png", image_id="x1")


def test_save_crop_sidecar(tmp_path):
    img = np.zeros((20, 20), np.uint8)
    res = segment_and_crop(img, FullImageBackend())
    png = save_crop(res, tmp_path, "case1")
    side = json.loads((tmp_path / "case1.json").read_text())
    assert png.exists()
    assert side["id"] == "case1"
    assert side["box"] == {"x0": 0, "y0": 0, "x1": 19, "y1": 19}
    assert side["backend_identity"] == "full-image/1"
    assert side["empty_mask_fallback"] is False
    assert side["margin"] == 0.025
