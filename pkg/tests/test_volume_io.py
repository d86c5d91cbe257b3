import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from radq.volume_io import (CaseInvariantError, CohortManifest, Volume, VolumeFormatError, load_case,
                            load_cohort, load_manifest, read_volume, save_case, save_cohort, save_manifest,
                            tree_sha256, write_volume)


def test_one_encodes_as_ieee_single(tmp_path):
    v = Volume.from_array("t", np.ones((1, 1, 1)))
    write_volume(v, tmp_path / "a.vol")
    raw = (tmp_path / "a.vol").read_bytes()
    header, payload = raw.split(b"\n", 1)
    assert payload == bytes([0x00, 0x00, 0x80, 0x3F])
    assert json.loads(header)["count"] == 1


def test_payload_is_x_fastest(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(1, 2, 3)  # (nz, ny, nx)
    v = Volume.from_array("t", arr)
    assert v.dims == (3, 2, 1)
    write_volume(v, tmp_path / "a.vol")
    payload = (tmp_path / "a.vol").read_bytes().split(b"\n", 1)[1]
    assert np.frombuffer(payload, "<f4").tolist() == [0, 1, 2, 3, 4, 5]


finite_f32 = st.floats(allow_nan=False, allow_infinity=False, width=32, allow_subnormal=True)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5), elements=finite_f32))
def test_round_trip_bit_exact(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "v.vol"
    v = Volume.from_array("m", arr, (0.5, 0.5, 2.0), meta={"k": 1})
    write_volume(v, p)
    back = read_volume(p)
    assert back == v
    assert back.data.tobytes() == arr.tobytes()


def test_subnormal_round_trip(tmp_path):
    tiny = np.array([[[1e-45, -1e-45, 1.1754942e-38]]], dtype=np.float32)
    v = Volume.from_array("s", tiny)
    write_volume(v, tmp_path / "s.vol")
    assert read_volume(tmp_path / "s.vol").data.tobytes() == tiny.tobytes()


def _hand_written(path, dims, values):
    header = {"format": "radq-vol-1", "modality_id": "x", "dims": list(dims), "voxel_size_mm": [1, 1, 1],
              "count": int(np.prod(dims)), "mask": False, "meta": {}}
    path.write_bytes(json.dumps(header).encode() + b"\n" + np.asarray(values, "<f4").tobytes())


def test_short_payload_rejected(tmp_path):
    _hand_written(tmp_path / "a.vol", (2, 2, 1), [1, 2, 3])
    with pytest.raises(VolumeFormatError, match="payload length"):
        read_volume(tmp_path / "a.vol")


def test_truncated_file_rejected(tmp_path):
    v = Volume.from_array("t", np.ones((2, 2, 2)))
    write_volume(v, tmp_path / "a.vol")
    raw = (tmp_path / "a.vol").read_bytes()
    (tmp_path / "a.vol").write_bytes(raw[:-2])
    with pytest.raises(VolumeFormatError, match="payload length"):
        read_volume(tmp_path / "a.vol")


def test_nan_names_voxel_index(tmp_path):
    vals = np.zeros(8)
    vals[5] = np.nan
    _hand_written(tmp_path / "a.vol", (2, 2, 2), vals)
    with pytest.raises(VolumeFormatError, match="index 5"):
        read_volume(tmp_path / "a.vol")


def test_malformed_header(tmp_path):
    (tmp_path / "a.vol").write_bytes(b"not json\n\x00\x00\x00\x00")
    with pytest.raises(VolumeFormatError, match="malformed header"):
        read_volume(tmp_path / "a.vol")


def test_mask_values_restricted():
    with pytest.raises(VolumeFormatError, match="mask value"):
        Volume.from_array("m", np.full((1, 1, 2), 0.5), is_mask=True)


def test_nonpositive_voxel_size_rejected():
    with pytest.raises(VolumeFormatError):
        Volume.from_array("m", np.ones((1, 1, 1)), (1.0, 0.0, 1.0))


def test_case_round_trip(tmp_path, noiseless_cases):
    case = noiseless_cases[0][0]
    save_case(case, tmp_path / "c")
    back = load_case(tmp_path / "c")
    assert back.tumour_mask == case.tumour_mask
    assert back.prostate_mask == case.prostate_mask
    assert all(back.volumes()[k] == v for k, v in case.volumes().items())
    assert back.age_years == case.age_years


def test_case_dims_mismatch(noiseless_cases):
    case = noiseless_cases[0][0]
    small = Volume.from_array("adc", np.zeros((1, 2, 2)))
    with pytest.raises(CaseInvariantError, match="dims mismatch"):
        type(case)(**{**case.__dict__, "adc": small})


def test_tumour_outside_prostate(noiseless_cases):
    case = noiseless_cases[0][0]
    t = case.tumour_mask.data.copy()
    outside = np.argwhere(case.prostate_mask.data == 0)[0]
    t[tuple(outside)] = 1.0
    with pytest.raises(CaseInvariantError, match="not within prostate_mask"):
        type(case)(**{**case.__dict__, "tumour_mask": case.tumour_mask.with_data(t, is_mask=True)})


def test_bvalues_must_start_at_zero(noiseless_cases):
    case = noiseless_cases[0][0]
    dwi = {b + 10: v for b, v in case.dwi_by_b.items()}
    with pytest.raises(CaseInvariantError, match="start at 0"):
        type(case)(**{**case.__dict__, "dwi_by_b": dwi})


def test_manifest_checks(tmp_path, noiseless_cases):
    with pytest.raises(CaseInvariantError, match="duplicate"):
        CohortManifest((("P1", "a"), ("P1", "b")), 1)
    save_manifest(CohortManifest((("P1", "nowhere"),), 1), tmp_path / "cohort.json")
    with pytest.raises(CaseInvariantError, match="missing"):
        load_manifest(tmp_path / "cohort.json")


def test_cohort_round_trip_and_tree_hash(tmp_path, noiseless_cases):
    cases = [c for c, _ in noiseless_cases]
    m = save_cohort(cases, 7, tmp_path / "a")
    save_cohort(cases, 7, tmp_path / "b")
    m2, back = load_cohort(tmp_path / "a" / "cohort.json")
    assert m2 == m and [c.patient_id for c in back] == m.patient_ids
    assert tree_sha256(tmp_path / "a") == tree_sha256(tmp_path / "b")
