import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renalverdict.acquisition import kidney_protocol
from renalverdict.fitting import FitResult
from renalverdict.volume_io import (VolumeContainer, VolumeError, mask_indices, read_volume,
                                    table_to_maps, table_to_volume, volume_to_table, write_volume)

KIDNEY = kidney_protocol()


def test_roundtrip_is_byte_exact(tmp_path):
    data = np.random.default_rng(0).random((4, 4, 2, 18)).astype(np.float32)
    vol = VolumeContainer(data, "signal", (1.5, 1.5, 6.0), "scheme.csv")
    side = write_volume(vol, tmp_path / "dwi")
    raw = tmp_path / "dwi.raw"
    assert side.name == "dwi.json" and raw.stat().st_size == 4 * 4 * 2 * 18 * 4
    desc = json.loads(side.read_text())
    assert desc == {"shape": [4, 4, 2, 18], "voxel_size_mm": [1.5, 1.5, 6.0], "kind": "signal",
                    "scheme": "scheme.csv", "dtype": "float32", "byte_order": "little"}
    back = read_volume(side)
    np.testing.assert_array_equal(back.data, data)
    write_volume(back, tmp_path / "again")
    assert (tmp_path / "again.raw").read_bytes() == raw.read_bytes()
    assert (tmp_path / "again.json").read_text() == side.read_text()


def test_x_fastest_layout(tmp_path):
    data = np.arange(2 * 3 * 1 * 1, dtype=np.float32).reshape(2, 3, 1, 1)
    write_volume(VolumeContainer(data), tmp_path / "v")
    flat = np.frombuffer((tmp_path / "v.raw").read_bytes(), "<f4")
    assert flat.tolist() == [data[0, 0, 0, 0], data[1, 0, 0, 0], data[0, 1, 0, 0],
                             data[1, 1, 0, 0], data[0, 2, 0, 0], data[1, 2, 0, 0]]


def test_truncated_payload(tmp_path):
    write_volume(VolumeContainer(np.ones((2, 2, 2, 3))), tmp_path / "v")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(VolumeError, match="expected 96 bytes, got 92"):
        read_volume(tmp_path / "v.json")


def test_descriptor_validation(tmp_path):
    write_volume(VolumeContainer(np.ones((2, 2, 2))), tmp_path / "v")
    side = tmp_path / "v.json"
    desc = json.loads(side.read_text())
    for key, value, msg in [("kind", "label", "unknown kind"), ("dtype", "uint8", "requires dtype"),
                            ("byte_order", "big", "byte_order"), ("shape", [2, 2], "shape")]:
        bad = dict(desc, **{key: value})
        side.write_text(json.dumps(bad))
        with pytest.raises(VolumeError, match=msg):
            read_volume(side)
    del desc["scheme"]
    side.write_text(json.dumps(desc))
    with pytest.raises(VolumeError, match="missing"):
        read_volume(side)
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "absent")


def test_mask_values_and_kind():
    with pytest.raises(VolumeError, match="other than 0 and 1"):
        VolumeContainer(np.full((2, 2, 2), 2), "mask")
    with pytest.raises(VolumeError, match="unknown kind"):
        VolumeContainer(np.ones((2, 2, 2)), "label")
    m = VolumeContainer(np.ones((2, 2, 2)), "mask")
    assert m.data.dtype == np.uint8 and m.shape == (2, 2, 2, 1)


def test_all_ones_mask_keeps_every_voxel():
    data = np.ones((3, 2, 2, 36))
    table = volume_to_table(VolumeContainer(data), np.ones((3, 2, 2)), KIDNEY)
    assert table.n_voxels == 12 and table.signals.shape == (12, 18)
    np.testing.assert_array_equal(table.voxel_indices, np.arange(12))
    np.testing.assert_array_equal(table.signals, 1.0)


def test_empty_mask_and_mismatches():
    vol = VolumeContainer(np.ones((2, 2, 1, 36)))
    with pytest.raises(VolumeError, match="no voxels selected"):
        volume_to_table(vol, np.zeros((2, 2, 1)), KIDNEY)
    with pytest.raises(VolumeError, match="mask shape"):
        volume_to_table(vol, np.ones((3, 2, 1)), KIDNEY)
    with pytest.raises(VolumeError, match="entries"):
        volume_to_table(VolumeContainer(np.ones((2, 2, 1, 5))), np.ones((2, 2, 1)), KIDNEY)


def test_nonpositive_b0_voxels_dropped():
    data = np.ones((2, 1, 1, 36))
    data[1, 0, 0, 0] = 0.0
    table = volume_to_table(VolumeContainer(data), np.ones((2, 1, 1)), KIDNEY)
    assert table.voxel_indices.tolist() == [0]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.data())
def test_maps_invert_table(X, Y, Z, data):
    n = X * Y * Z
    idx = np.array(sorted(data.draw(st.sets(st.integers(0, n - 1), min_size=1))))
    values = data.draw(st.lists(st.floats(0, 1, width=32), min_size=len(idx), max_size=len(idx)))
    fit = FitResult("verdict", {"f_ic": np.array(values)}, voxel_indices=idx)
    maps = table_to_maps(fit, (X, Y, Z))
    flat = maps["f_ic"].data[..., 0].ravel(order="F")
    np.testing.assert_array_equal(flat[idx], np.float32(values))
    rest = np.setdiff1d(np.arange(n), idx)
    assert np.isnan(flat[rest]).all()
    assert mask_indices((~np.isnan(maps["f_ic"].data[..., 0])).astype(np.uint8)).tolist() == idx.tolist()


def test_table_to_volume_scatter():
    vol = table_to_volume(np.array([[1.0, 2.0]]), (2, 2, 1), [3])
    assert vol.shape == (2, 2, 1, 2)
    assert vol.data[1, 1, 0].tolist() == [1.0, 2.0]
    assert vol.data.sum() == 3.0
