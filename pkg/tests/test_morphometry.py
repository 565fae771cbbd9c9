import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cordseg.errors import ValidationError
from cordseg.morphometry import (LabelVolume, SliceMetrics, csa_per_slice, per_level_aggregate, sac_csa_ratio,
                                 sac_per_slice, slice_levels, slice_metrics)
from cordseg.synth import ellipse_mask


def ellipse_perimeter(a, b):
    """Ramanujan's second approximation."""
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))


def box_phantom(ny=20, nx=24, cord=(6, 5), canal=(10, 9), nz=2):
    lab = np.zeros((nz, ny, nx), np.uint8)
    cy, cx = ny // 2, nx // 2
    lab[:, cy - canal[0] // 2:cy - canal[0] // 2 + canal[0], cx - canal[1] // 2:cx - canal[1] // 2 + canal[1]] = 2
    lab[:, cy - cord[0] // 2:cy - cord[0] // 2 + cord[0], cx - cord[1] // 2:cx - cord[1] // 2 + cord[1]] = 1
    return lab


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 6), st.integers(0, 6),
       st.sampled_from([0.25, 0.5, 1.0, 0.8]), st.sampled_from([0.5, 1.0, 0.3]))
def test_box_phantom_exact(ch, cw, mh, mw, dy, dx):
    lab = box_phantom(cord=(ch, cw), canal=(ch + 2 * mh, cw + 2 * mw))
    vol = LabelVolume(lab, (3.0, dy, dx))
    # exact = integer voxel count times the pixel area
    csa = (ch * cw) * (dy * dx)
    sac = ((ch + 2 * mh) * (cw + 2 * mw) - ch * cw) * (dy * dx)
    assert csa_per_slice(vol, 0) == csa
    assert sac_per_slice(vol, 1) == sac
    m = slice_metrics(vol)[0]
    assert m.ratio == sac / csa


@settings(max_examples=40, deadline=None)
@given(st.floats(4, 20), st.floats(4, 20), st.floats(1, 10), st.floats(1, 10),
       st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.sampled_from([0.5, 1.0]))
def test_concentric_ellipse_sac_within_perimeter_band(a, b, ma, mb, ox, oy, px):
    A, B = a + ma, b + mb
    n = int(2 * max(A, B) + 6)
    c = n / 2 + ox, n / 2 + oy
    canal = ellipse_mask((n, n), c[0], c[1], A, B)
    cord = ellipse_mask((n, n), c[0], c[1], a, b)
    lab = np.where(cord, 1, np.where(canal, 2, 0)).astype(np.uint8)[None]
    vol = LabelVolume(lab, (1.0, px, px))
    analytic = math.pi * (A * B - a * b) * px * px
    band = (ellipse_perimeter(A, B) + ellipse_perimeter(a, b)) * px * px
    assert abs(sac_per_slice(vol, 0) - analytic) <= band
    assert abs(csa_per_slice(vol, 0) - math.pi * a * b * px * px) <= ellipse_perimeter(a, b) * px * px


def test_ratio_undefined_when_cord_absent():
    vol = LabelVolume(np.full((1, 4, 4), 2, np.uint8), (1, 1, 1))
    m = slice_metrics(vol)[0]
    assert m.csa == 0 and m.sac == 16 and m.ratio is None
    assert sac_csa_ratio((4.0, 2.0)) == 2.0
    assert sac_csa_ratio(SliceMetrics(0, 0.0, 3.0, None)) is None


def test_explicit_canal_mask_and_stray_cord_warning():
    lab = np.zeros((1, 6, 6), np.uint8)
    lab[0, 2:4, 2:4] = 1
    lab[0, 0, 0] = 1  # cord voxel outside the canal
    canal = np.zeros((1, 6, 6), bool)
    canal[0, 1:5, 1:5] = True
    vol = LabelVolume(lab, (1, 1, 1), canal_mask=canal)
    with pytest.warns(UserWarning, match="outside the canal"):
        assert sac_per_slice(vol, 0) == 16 - 4  # stray voxel counts as canal and cord
    assert vol.validate() == ["slice 0: 1 cord voxel(s) outside the canal"]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        lab[0, 0, 0] = 0
        assert sac_per_slice(LabelVolume(lab, (1, 1, 1), canal_mask=canal), 0) == 16 - 4


def test_csf_labels_configurable():
    lab = box_phantom()
    lab[lab == 2] = 7
    vol = LabelVolume(lab, (1, 1, 1), legend={0: "bg", 1: "cord", 7: "csf"}, csf_labels=(7,))
    assert sac_per_slice(vol, 0) == 10 * 9 - 6 * 5


def test_validation_errors():
    with pytest.raises(ValidationError, match="legend"):
        LabelVolume(np.full((1, 2, 2), 9, np.uint8), (1, 1, 1))
    with pytest.raises(ValidationError):
        LabelVolume(np.zeros((2, 2), np.uint8), (1, 1, 1))
    with pytest.raises(ValidationError):
        LabelVolume(np.zeros((1, 2, 2), np.uint8), (1, 0, 1))
    with pytest.raises(ValidationError):
        csa_per_slice(LabelVolume(np.zeros((1, 2, 2), np.uint8), (1, 1, 1)), 3)


def test_slice_levels_majority_with_ties_to_lowest():
    lv = np.zeros((4, 3, 3), np.uint8)
    lv[0, 0, :2] = 3
    lv[0, 1, 0] = 4
    lv[1, 0, 0], lv[1, 0, 1] = 5, 2  # tie -> 2
    lv[3] = 7
    assert slice_levels(lv).tolist() == [3, 2, 0, 7]


def test_per_level_aggregate_means_and_missing():
    ms = [SliceMetrics(0, 10.0, 5.0, 0.5, 1), SliceMetrics(1, 20.0, 10.0, 0.5, 1),
          SliceMetrics(2, 0.0, 8.0, None, 2), SliceMetrics(3, 4.0, 4.0, 1.0, 0)]
    agg = per_level_aggregate(ms)
    assert agg[1].n_slices == 2 and agg[1].csa == 15.0 and agg[1].sac == 7.5 and agg[1].ratio == 0.5
    assert agg[2].csa == 0.0 and agg[2].ratio is None
    assert agg[3].n_slices == 0 and agg[3].csa is None
    assert set(agg) == set(range(1, 8))


def test_slice_metrics_accepts_level_volume_or_array():
    lab = box_phantom(nz=3)
    lv = np.zeros_like(lab)
    lv[lab == 1] = np.broadcast_to(np.array([2, 2, 5])[:, None, None], lab.shape)[lab == 1]
    vol = LabelVolume(lab, (1, 1, 1))
    assert [m.level for m in slice_metrics(vol, lv)] == [2, 2, 5]
    assert [m.level for m in slice_metrics(vol, np.array([1, 1, 1]))] == [1, 1, 1]
    with pytest.raises(ValidationError):
        slice_metrics(vol, np.array([1, 2]))
