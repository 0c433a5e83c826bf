import numpy as np
import pytest

from voxvid.codec import (
    IdentityCodec,
    SpaceToDepthCodec,
    export_png_frames,
    import_png_frames,
    load_tensor,
    make_codec,
    save_tensor,
)
from voxvid.tensor import ShapeError


def test_space_to_depth_shapes(rng):
    codec = SpaceToDepthCodec()
    x = rng.standard_normal((16, 256, 256, 3)).astype(np.float32)
    z = codec.encode(x)
    assert z.shape == (16, 32, 32, 192)
    np.testing.assert_array_equal(codec.decode(z), x)


def test_space_to_depth_matches_reshape_oracle(rng):
    # Independent oracle: per-pixel gather with explicit index arithmetic.
    codec = SpaceToDepthCodec()
    x = rng.standard_normal((1, 16, 24, 3))
    z = codec.encode(x)
    for i in range(2):
        for j in range(3):
            block = x[0, i * 8 : (i + 1) * 8, j * 8 : (j + 1) * 8, :]
            np.testing.assert_array_equal(z[0, i, j], block.reshape(-1))


def test_constant_image_constant_latent():
    codec = SpaceToDepthCodec()
    x = np.full((2, 8, 8, 3), 0.25, dtype=np.float32)
    z = codec.encode(x)
    assert np.all(z == 0.25)


def test_space_to_depth_rejects_bad_shapes(rng):
    codec = SpaceToDepthCodec()
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((2, 10, 16, 3)))
    with pytest.raises(ShapeError):
        codec.decode(np.zeros((2, 4, 4, 100)))


def test_identity_codec(rng):
    codec = IdentityCodec(expected_shape=(4, 4, 2))
    x = rng.standard_normal((3, 4, 4, 2))
    np.testing.assert_array_equal(codec.encode(x), x)
    np.testing.assert_array_equal(codec.decode(x), x)
    with pytest.raises(ShapeError):
        codec.decode(rng.standard_normal((3, 4, 4, 5)))


def test_make_codec():
    assert isinstance(make_codec("identity", (4, 4, 2)), IdentityCodec)
    assert isinstance(make_codec("space_to_depth", (32, 32, 192)), SpaceToDepthCodec)
    with pytest.raises(ValueError):
        make_codec("vae", (4, 4, 2))


def test_tensor_file_roundtrip(tmp_path, rng):
    for arr in (
        rng.standard_normal((3, 4, 5)).astype(np.float32),
        rng.standard_normal((7,)).astype(np.float64),
        np.float32(3.5).reshape(()),
    ):
        path = tmp_path / "t.vtf"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.dtype == arr.dtype
        np.testing.assert_array_equal(back, arr)


def test_tensor_file_deterministic_bytes(tmp_path, rng):
    arr = rng.standard_normal((2, 3)).astype(np.float32)
    a, b = tmp_path / "a.vtf", tmp_path / "b.vtf"
    save_tensor(a, arr)
    save_tensor(b, arr)
    assert a.read_bytes() == b.read_bytes()


def test_tensor_file_rejects_garbage(tmp_path):
    p = tmp_path / "x.vtf"
    p.write_bytes(b"nope" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_tensor(p)


def test_png_roundtrip(tmp_path, rng):
    video = rng.uniform(-1, 1, (3, 8, 8, 3)).astype(np.float32)
    paths = export_png_frames(video, tmp_path / "frames")
    assert len(paths) == 3
    back = import_png_frames(paths)
    assert back.shape == video.shape
    # PNG quantizes to 8 bits: half a bin of the [-1, 1] range.
    assert np.max(np.abs(back - video)) <= 1.0 / 255.0 + 1e-7
