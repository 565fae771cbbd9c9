import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cordseg.dti import (DiffusionSample, DiffusionTensor, design_matrix, design_row, eig3_symmetric,
                         eigvals3_symmetric, fa, fit_volume, fit_voxels, gradient_scheme, icosahedron_directions,
                         md, metrics_from_eigenvalues, params_to_matrices, per_level_metrics, rd,
                         simulate_signals, tensor_from_eigen, voxel_metrics, wls_fit, wls_fit_signals)
from cordseg.errors import ValidationError
from cordseg.rng import make_rng
from oracles import fa_definition, jacobi_eigvals

LAM = (1.7e-3, 0.3e-3, 0.3e-3)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def rician(S, sigma, rng, n):
    return np.hypot(S + rng.normal(0, sigma, (n, len(S))), rng.normal(0, sigma, (n, len(S))))


# --- frozen values ----------------------------------------------------------------
def test_fa_of_prolate_tensor():
    # for eigenvalues (a, b, b) the definition reduces to (a - b) / ||lambda||
    assert fa(*LAM) == pytest.approx(1.4 / math.sqrt(1.7 ** 2 + 2 * 0.3 ** 2), rel=1e-14)
    assert fa(*LAM) == pytest.approx(0.7990222037494894, abs=1e-12)
    assert fa(*LAM) == pytest.approx(fa_definition(*LAM), rel=1e-14)


def test_md_rd_and_degenerate_fa():
    assert md(*LAM) == pytest.approx(7.6666666e-4)
    assert rd(*LAM) == pytest.approx(0.3e-3)
    assert fa(1e-3, 1e-3, 1e-3) == pytest.approx(0.0, abs=1e-12)
    assert fa(1e-3, 0, 0) == pytest.approx(1.0)
    assert fa(0, 0, 0) == 0.0


def test_icosahedron_scheme():
    d = icosahedron_directions()
    assert d.shape == (12, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    # antipodal pairs, all other angles equal: each vertex has 5 neighbours at cos = 1/sqrt(5)
    g = d @ d.T
    assert np.all(np.isclose(g, -1).sum(1) == 1)
    assert np.all(np.isclose(g, 1 / math.sqrt(5)).sum(1) == 5)
    bvals, bvecs = gradient_scheme()
    assert bvals.tolist() == [0.0] + [1000.0] * 12 and not bvecs[0].any()


def test_design_row_layout():
    g = np.array([1.0, 2.0, 2.0]) / 3.0
    row = design_row(DiffusionSample(1000.0, tuple(g), 1.0))
    gx, gy, gz = g
    np.testing.assert_allclose(row, [-1000 * gx * gx, -1000 * gy * gy, -1000 * gz * gz,
                                     -2000 * gx * gy, -2000 * gx * gz, -2000 * gy * gz, 1.0])


# --- fitting --------------------------------------------------------------------------
def test_noiseless_roundtrip_recovers_planted_fa():
    bvals, bvecs = gradient_scheme()
    samples = [DiffusionSample(b, tuple(g), s)
               for b, g, s in zip(bvals, bvecs, simulate_signals(np.diag(LAM), bvals, bvecs, 1000.0))]
    t = wls_fit(samples)
    np.testing.assert_allclose(t.matrix, np.diag(LAM), atol=1e-15)
    assert t.log_s0 == pytest.approx(math.log(1000.0), rel=1e-12)
    assert voxel_metrics(t).fa == pytest.approx(fa(*LAM), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_noiseless_roundtrip_random_orientation(seed):
    rng = make_rng(seed)
    lam = np.sort(rng.uniform(0.1e-3, 2.5e-3, 3))[::-1]
    D = tensor_from_eigen(lam, random_rotation(rng))
    bvals, bvecs = gradient_scheme()
    theta = wls_fit_signals(simulate_signals(D, bvals, bvecs, 500.0), bvals, bvecs)
    np.testing.assert_allclose(params_to_matrices(theta), D, atol=1e-12)
    assert fit_voxels(simulate_signals(D, bvals, bvecs, 500.0)[None], bvals, bvecs).fa[0] == \
        pytest.approx(fa(*lam), abs=1e-6)


def test_wls_matches_weighted_lstsq_oracle():
    rng = make_rng(3)
    bvals, bvecs = gradient_scheme()
    S = rician(simulate_signals(np.diag(LAM), bvals, bvecs, 1000.0), 20.0, rng, 1)[0]
    theta, ols = wls_fit_signals(S, bvals, bvecs, return_ols=True)
    X = design_matrix(bvals, bvecs)
    y = np.log(S)
    ols_ref = np.linalg.lstsq(X, y, rcond=None)[0]
    sw = np.exp(X @ ols_ref)  # sqrt of the weights exp(2 X theta)
    wls_ref = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
    np.testing.assert_allclose(ols, ols_ref, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(theta, wls_ref, rtol=1e-7, atol=1e-12)


def test_noisy_fit_within_tolerance():
    rng = make_rng(11)
    bvals, bvecs = gradient_scheme()
    S = simulate_signals(np.diag(LAM), bvals, bvecs, 1000.0)
    res = fit_voxels(rician(S, 1000.0 / 50, rng, 1000), bvals, bvecs)
    assert np.mean(np.abs(res.fa - fa(*LAM))) < 0.05


def test_rejects_nonpositive_signal_and_rank_deficient_design():
    bvals, bvecs = gradient_scheme()
    S = simulate_signals(np.diag(LAM), bvals, bvecs, 1000.0)
    S[4] = 0.0
    with pytest.raises(ValidationError, match="non-positive signal"):
        wls_fit_signals(S, bvals, bvecs)
    few_b = np.array([0, 1000, 1000, 1000.0])
    few_g = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [-1, 0, 0.0]])
    with pytest.raises(ValidationError, match="2 non-collinear"):
        wls_fit_signals(np.ones(4), few_b, few_g)
    with pytest.raises(ValidationError):
        DiffusionSample(1000.0, (1.0, 1.0, 0.0), 1.0)


# --- eigen-decomposition ---------------------------------------------------------
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["distinct", "double", "triple"]))
def test_eigen_against_jacobi_oracle(seed, kind):
    rng = make_rng(seed)
    lam = rng.uniform(-1, 3, 3)
    if kind == "double":
        lam[1] = lam[2]
    elif kind == "triple":
        lam[:] = lam[0]
    A = tensor_from_eigen(lam, random_rotation(rng))
    ref = jacobi_eigvals(A)
    # closed form: ~sqrt(eps) relative accuracy at repeated roots
    np.testing.assert_allclose(eigvals3_symmetric(A), ref, rtol=0, atol=1e-7 * np.abs(lam).max())
    es = eig3_symmetric(A)
    np.testing.assert_allclose(es.values, ref, rtol=0, atol=1e-12 * np.abs(lam).max())
    V = es.vectors
    np.testing.assert_allclose(V.T @ V, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(A @ V, V * es.values, atol=1e-9)


def test_eigvals_batched_and_sorted():
    rng = make_rng(0)
    A = np.stack([tensor_from_eigen(rng.uniform(0, 1, 3), random_rotation(rng)) for _ in range(50)])
    lam = eigvals3_symmetric(A)
    assert lam.shape == (50, 3) and np.all(np.diff(lam, axis=1) <= 0)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(A)[:, ::-1], atol=1e-12)


def test_negative_eigenvalues_clamped_only_in_metrics():
    lam = np.array([1.5e-3, 0.2e-3, -0.1e-3])
    es = eig3_symmetric(np.diag(lam))
    assert es.negative and es.values[-1] < 0
    f, m, r = metrics_from_eigenvalues(lam)
    assert float(f) == pytest.approx(fa(1.5e-3, 0.2e-3, 0.0)) and float(r) == pytest.approx(0.1e-3)


def test_eig_accepts_tensor_object():
    t = DiffusionTensor(1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0)
    np.testing.assert_allclose(eig3_symmetric(t).values, [3, 2, 1])


# --- volumes and levels ------------------------------------------------------------
def test_fit_volume_and_per_level_means():
    bvals, bvecs = gradient_scheme()
    S = simulate_signals(np.diag(LAM), bvals, bvecs, 800.0)
    mask = np.zeros((3, 4, 4), bool)
    mask[0, 1:3, 1:3] = mask[2, 0, 0] = True
    dwi = np.ones((len(bvals), 3, 4, 4)) * S[:, None, None, None]
    vols, neg = fit_volume(dwi, bvals, bvecs, mask)
    assert neg == 0 and np.isnan(vols["fa"][1]).all()
    np.testing.assert_allclose(vols["fa"][mask], fa(*LAM), atol=1e-9)
    out = per_level_metrics(vols, np.array([3, 4, 3]), mask)
    assert out[3].n_voxels == 5 and out[3].fa == pytest.approx(fa(*LAM), abs=1e-9)
    assert out[4].n_voxels == 0 and out[4].fa is None and out[1].md is None
    with pytest.raises(ValidationError):
        per_level_metrics(vols, np.array([1, 2]), mask)
