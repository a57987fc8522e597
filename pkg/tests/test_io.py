import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgp import io
from mgp.errors import BadMagicError, BadMaxvalError, ContractError, ParseError, ShapeError, TruncatedError
from mgp.tensor import Tensor


def test_minimal_p6():
    img = io.parse_ppm(b"P6\n1 1\n255\n\xff\x00\x00")
    assert img == io.ImageFile(1, 1, 3, bytes([255, 0, 0]))


def test_header_comments_and_whitespace():
    img = io.parse_ppm(b"P5 # gray\n# size next\n2\t1\n  255\n\x01\x02")
    assert (img.width, img.height, img.channels, img.pixels) == (2, 1, 1, b"\x01\x02")


def test_parse_errors():
    with pytest.raises(BadMagicError):
        io.parse_ppm(b"P3\n1 1\n255\n1 2 3")
    with pytest.raises(BadMaxvalError):
        io.parse_ppm(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(TruncatedError):
        io.parse_ppm(b"P6\n2 2\n255\n" + bytes(9))
    with pytest.raises(TruncatedError):
        io.parse_ppm(b"P6\n2 2")
    with pytest.raises(ParseError):
        io.parse_ppm(b"P6\n1 1\n255\n" + bytes(4))
    with pytest.raises(ParseError):
        io.parse_ppm(b"P6\nx 1\n255\n" + bytes(3))


def test_parse_error_classes_are_distinct():
    kinds = {BadMagicError, BadMaxvalError, TruncatedError}
    assert len(kinds) == 3 and all(issubclass(k, ParseError) for k in kinds)


@settings(max_examples=50, deadline=None)
@given(w=st.integers(1, 6), h=st.integers(1, 6), c=st.sampled_from([1, 3]), data=st.data())
def test_file_roundtrip_is_byte_identical(tmp_path_factory, w, h, c, data):
    pixels = data.draw(st.binary(min_size=w * h * c, max_size=w * h * c))
    raw = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode() + pixels
    path = tmp_path_factory.mktemp("ppm") / "a.ppm"
    path.write_bytes(raw)
    img = io.read_ppm(path)
    io.write_ppm(img, path)
    assert path.read_bytes() == raw


def test_tensor_mapping_endpoints():
    t = io.to_tensor(io.ImageFile(2, 1, 1, bytes([0, 255])))
    assert t.shape == (1, 1, 1, 2)
    assert t.data[0, 0, 0].tolist() == [-1.0, 1.0]


def test_all_levels_roundtrip():
    img = io.ImageFile(256, 1, 1, bytes(range(256)))
    assert io.from_tensor(io.to_tensor(img)) == img
    rgb = io.ImageFile(16, 16, 3, (np.arange(768) % 256).astype(np.uint8).tobytes())
    assert io.from_tensor(io.to_tensor(rgb)) == rgb


def test_layout_is_interleaved(rng):
    arr = rng.uniform(-1, 1, (1, 3, 2, 3))
    img = io.from_tensor(Tensor(arr))
    px = np.frombuffer(img.pixels, np.uint8).reshape(2, 3, 3)
    assert px[1, 2, 0] == np.rint(255 * (arr[0, 0, 1, 2] + 1) / 2)
    assert px[0, 1, 2] == np.rint(255 * (arr[0, 2, 0, 1] + 1) / 2)


def test_clamp():
    img = io.from_tensor(Tensor(np.array([1.7, -3.0, 0.0]).reshape(1, 1, 1, 3)))
    assert list(img.pixels) == [255, 0, 128]


def test_from_tensor_shape_error():
    with pytest.raises(ShapeError):
        io.from_tensor(Tensor(np.zeros((1, 2, 4, 4))))


def test_image_file_validation():
    with pytest.raises(ShapeError):
        io.ImageFile(2, 2, 3, bytes(5))
    with pytest.raises(ContractError):
        io.ImageFile(1, 1, 2, bytes(2))


def clean(rng):
    return Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)))


def test_degrade_center_crop(rng):
    x = clean(rng)
    ref, mask = io.degrade(x, "center_crop_mask", size=16)
    assert mask.data.sum() == 1024 - 256
    assert np.all(mask.data[0, 0, 8:24, 8:24] == 0)
    assert np.all(ref.data[:, :, 8:24, 8:24] == 0)
    assert np.array_equal(ref.data[:, :, :8], x.data[:, :, :8])
    _, whole = io.degrade(x, "center_crop_mask", size=32)
    assert not whole.data.any()
    with pytest.raises(ContractError):
        io.degrade(x, "center_crop_mask", size=33)


def test_degrade_random_crop(rng):
    x = clean(rng)
    _, m = io.degrade(x, "random_crop_mask", p=0.8, seed=3)
    assert int(m.data.sum()) == 205
    _, m2 = io.degrade(x, "random_crop_mask", p=0.8, seed=3)
    _, m3 = io.degrade(x, "random_crop_mask", p=0.8, seed=4)
    assert np.array_equal(m.data, m2.data) and not np.array_equal(m.data, m3.data)


def test_degrade_noise(rng):
    x = clean(rng)
    same, _ = io.degrade(x, "gaussian_noise", sigma=0.0)
    assert np.array_equal(same.data, x.data)
    a, _ = io.degrade(x, "gaussian_noise", sigma=0.1, seed=1)
    b, _ = io.degrade(x, "gaussian_noise", sigma=0.1, seed=1)
    assert np.array_equal(a.data, b.data)
    assert 0.08 < np.std(a.data - x.data) < 0.12


def test_degrade_gray_and_down(rng):
    x = clean(rng)
    g, m = io.degrade(x, "grayscale")
    assert g.shape == (1, 1, 32, 32) and m is None
    d, _ = io.degrade(x, "downsample", factor=4)
    assert d.shape == (1, 3, 8, 8)
    assert d.data[0, 1, 0, 0] == pytest.approx(x.data[0, 1, :4, :4].mean(), abs=1e-15)
    with pytest.raises(ContractError):
        io.degrade(x, "blur")


def test_mask_image():
    img = io.mask_image(Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2)))
    assert img.channels == 1 and list(img.pixels) == [0, 255]
