import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kanrecon import phantom
from kanrecon.phantom import (
    BadMagicError,
    PhantomSpec,
    ShapeOverflowError,
    SplitMix64,
    TruncatedFileError,
    generate_phantom,
)


def test_splitmix_reference_vector():
    g = SplitMix64(1234567)
    assert [g.next_u64() for _ in range(5)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423,
        4593380528125082431, 16408922859458223821,
    ]


def test_phantom_errors():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(32, n_ellipses=0))
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(24))
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(8))


def test_phantom_deterministic():
    a = generate_phantom(PhantomSpec(32, seed=9))
    b = generate_phantom(PhantomSpec(32, seed=9))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_phantom(PhantomSpec(32, seed=10)))


def test_phantom_pinned_values():
    img = generate_phantom(PhantomSpec(32, seed=0))
    assert img.max() == 1.0
    assert np.percentile(img, 99) == 1.0


def test_nonzero_fraction_and_range():
    for seed in range(100):
        img = generate_phantom(PhantomSpec(32, seed=seed))
        frac = np.count_nonzero(img) / img.size
        assert 0.1 <= frac <= 0.9
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_generate_dataset_seeds():
    ds = phantom.generate_dataset(3, 16, 5)
    assert np.array_equal(ds[2], generate_phantom(PhantomSpec(16, seed=7)))


def test_dataset_roundtrip(tmp_path, rng):
    imgs = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    phantom.write_dataset(imgs, tmp_path / "d.krec")
    raw = (tmp_path / "d.krec").read_bytes()
    assert len(raw) == phantom.dataset_file_length(3, 32, 32) == 17 + 4 * 3 * 32 * 32
    assert raw[:4] == b"KREC" and raw[4] == 1
    assert struct.unpack("<III", raw[5:17]) == (3, 32, 32)
    back = phantom.read_dataset(tmp_path / "d.krec")
    assert back.dtype == np.float32 and back.tobytes() == imgs.tobytes()


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                  elements=st.floats(width=32, allow_nan=False)))
def test_dataset_roundtrip_property(arr):
    assert phantom.decode_dataset(phantom.encode_dataset(arr)).tobytes() == arr.tobytes()


def test_bad_magic(rng):
    buf = bytearray(phantom.encode_dataset(rng.uniform(size=(1, 4, 4))))
    buf[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        phantom.decode_dataset(bytes(buf))


def test_truncated_names_lengths(rng):
    buf = phantom.encode_dataset(rng.uniform(size=(2, 4, 4)))
    cut = buf[:-10]
    with pytest.raises(TruncatedFileError) as exc:
        phantom.decode_dataset(cut)
    expected = 17 + 4 * 2 * 4 * 4
    assert str(expected) in str(exc.value) and str(len(cut)) in str(exc.value)
    with pytest.raises(TruncatedFileError):
        phantom.decode_dataset(buf[:9])


def test_shape_overflow():
    huge = np.lib.stride_tricks.as_strided(np.zeros(1), shape=(2 ** 32, 1, 1), strides=(0, 0, 0))
    with pytest.raises(ShapeOverflowError):
        phantom.encode_dataset(huge)


def test_pgm(tmp_path):
    img = np.linspace(0, 1, 16 * 16).reshape(16, 16)
    phantom.write_pgm(img, tmp_path / "x.pgm")
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n")
    back = phantom.read_pgm(tmp_path / "x.pgm")
    assert np.array_equal(np.round(back * 255), np.round(img * 255))
