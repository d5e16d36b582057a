import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cs2.errors import DataError, HURangeError, MalformedHeaderError, ShapeError, SizeMismatchError
from cs2.volumes import (
    HUVolume,
    Slab,
    denormalize_hu,
    load_volume,
    min_slices,
    normalize_hu,
    save_volume,
    select_2_5d,
    selection_indices,
    window_hu,
)


def test_constant_volume_loads(tmp_path):
    path = tmp_path / "v.cs2"
    save_volume(path, HUVolume(np.full((2, 2, 2), -1024, dtype=np.int16)))
    vol = load_volume(path)
    assert vol.voxels.size == 8 and (vol.voxels == -1024).all()


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(5):
        vox = rng.integers(-1024, 3072, size=(3, 5, 7)).astype(np.int16)
        path = tmp_path / f"v{i}.cs2"
        save_volume(path, HUVolume(vox, (2.5, 0.7, 0.7)))
        back = load_volume(path)
        assert back.voxels.tobytes() == vox.tobytes()
        assert back.spacing == (2.5, 0.7, 0.7)


def test_header_slice_count_larger_than_payload(tmp_path):
    path = tmp_path / "v.cs2"
    save_volume(path, HUVolume(np.zeros((9, 2, 2), dtype=np.int16)))
    blob = path.read_bytes().replace(b"n_slices=9", b"n_slices=10")
    path.write_bytes(blob)
    with pytest.raises(SizeMismatchError):
        load_volume(path)


def test_header_errors_are_distinct(tmp_path):
    bad = tmp_path / "bad.cs2"
    bad.write_bytes(b"magic=CS2VOL1\nn_slices\n\n\x00\x00")
    with pytest.raises(MalformedHeaderError):
        load_volume(bad)
    unterminated = tmp_path / "u.cs2"
    unterminated.write_bytes(b"magic=CS2VOL1\n")
    with pytest.raises(MalformedHeaderError):
        load_volume(unterminated)
    path = tmp_path / "hot.cs2"
    save_volume(path, HUVolume(np.zeros((1, 1, 2), dtype=np.int16)))
    blob = bytearray(path.read_bytes())
    blob[-2:] = np.array([4000], dtype="<i2").tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(HURangeError):
        load_volume(path)


def test_volume_rejects_out_of_range():
    with pytest.raises(HURangeError):
        HUVolume(np.full((1, 2, 2), -2000))
    with pytest.raises(ShapeError):
        HUVolume(np.zeros((2, 2)))


def test_selection_matches_worked_example():
    assert selection_indices(31) == [7, 11, 15, 19]


def test_selection_small_stack():
    assert selection_indices(9) == [2, 3, 4, 5]


def test_selection_too_thin():
    with pytest.raises(DataError, match=str(min_slices())):
        selection_indices(5)
    assert min_slices() == 7
    selection_indices(7)


@given(st.integers(min_value=1, max_value=2000))
def test_selection_properties(n):
    if n < min_slices():
        with pytest.raises(DataError):
            selection_indices(n)
        return
    idx = selection_indices(n)
    assert len(idx) == 4
    assert all(0 <= i <= n - 1 for i in idx)
    assert all(b > a for a, b in zip(idx, idx[1:]))


def test_select_2_5d_stacks_chosen_slices():
    vox = np.arange(31)[:, None, None] * np.ones((1, 3, 3), dtype=np.int16)
    slab = select_2_5d(HUVolume(vox))
    assert slab.source_slices == (7, 11, 15, 19)
    assert slab.values[:, 0, 0].tolist() == [7, 11, 15, 19]


def test_slab_invariants():
    with pytest.raises(ShapeError):
        Slab(np.zeros((3, 2, 2)), (0, 1, 2))
    with pytest.raises(ShapeError):
        Slab(np.zeros((4, 2, 2)), (0, 2, 2, 3))


def test_window_endpoints_and_clamp():
    assert window_hu(np.array([-1024.0, 600.0, 2000.0, -3000.0])).tolist() == [0.0, 1.0, 1.0, 0.0]
    with pytest.raises(DataError):
        window_hu(np.zeros(1), (5, 5))


def test_normalize_round_trip():
    rng = np.random.default_rng(1)
    vals = rng.uniform(-1024, 600, size=(4, 6, 6))
    slab = Slab(vals, (0, 1, 2, 3))
    back = denormalize_hu(normalize_hu(slab))
    assert np.max(np.abs(back.values - vals)) < 1e-9
    with pytest.raises(DataError):
        normalize_hu(normalize_hu(slab))
