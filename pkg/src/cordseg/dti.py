"""Diffusion tensor fitting (log-linear weighted least squares) and the
scalar metrics FA, MD and RD."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class DiffusionSample:
    b_value: float
    gradient_dir: tuple[float, float, float]
    signal: float

    def __post_init__(self):
        if self.b_value < 0:
            raise ValidationError(f"negative b-value {self.b_value}")
        if self.b_value > 0 and abs(np.linalg.norm(self.gradient_dir) - 1.0) > 1e-6:
            raise ValidationError(f"gradient direction {self.gradient_dir} is not a unit vector")


@dataclass
class DiffusionTensor:
    Dxx: float
    Dyy: float
    Dzz: float
    Dxy: float
    Dxz: float
    Dyz: float
    log_s0: float

    @classmethod
    def from_params(cls, theta) -> "DiffusionTensor":
        return cls(*(float(v) for v in theta))

    @property
    def params(self) -> np.ndarray:
        return np.array([self.Dxx, self.Dyy, self.Dzz, self.Dxy, self.Dxz, self.Dyz, self.log_s0])

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.Dxx, self.Dxy, self.Dxz],
                         [self.Dxy, self.Dyy, self.Dyz],
                         [self.Dxz, self.Dyz, self.Dzz]])


@dataclass
class EigenSystem:
    values: np.ndarray  # descending
    vectors: np.ndarray  # columns are eigenvectors

    @property
    def negative(self) -> bool:
        return bool(self.values[-1] < 0)


@dataclass
class VoxelMetrics:
    fa: float
    md: float
    rd: float


# ---------------------------------------------------------------------------
# Acquisition schemes and forward model
# ---------------------------------------------------------------------------
def icosahedron_directions() -> np.ndarray:
    """The 12 unit vertices of a regular icosahedron."""
    phi = (1 + 5 ** 0.5) / 2
    v = []
    for a in (-1, 1):
        for b in (-phi, phi):
            v += [(0, a, b), (a, b, 0), (b, 0, a)]
    v = np.array(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gradient_scheme(b_value: float = 1000.0, n_b0: int = 1) -> tuple[np.ndarray, np.ndarray]:
    dirs = icosahedron_directions()
    bvals = np.concatenate([np.zeros(n_b0), np.full(len(dirs), float(b_value))])
    bvecs = np.concatenate([np.zeros((n_b0, 3)), dirs])
    return bvals, bvecs


def tensor_from_eigen(values: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    return vectors @ np.diag(values) @ vectors.T


def simulate_signals(D: np.ndarray, bvals: np.ndarray, bvecs: np.ndarray, s0: float) -> np.ndarray:
    return s0 * np.exp(-bvals * np.einsum("ni,ij,nj->n", bvecs, D, bvecs))


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------
def design_row(sample: DiffusionSample) -> np.ndarray:
    """Row such that row . [Dxx, Dyy, Dzz, Dxy, Dxz, Dyz, ln S0] = ln S."""
    return design_matrix(np.array([sample.b_value]), np.array([sample.gradient_dir], dtype=float))[0]


def design_matrix(bvals: np.ndarray, bvecs: np.ndarray) -> np.ndarray:
    b = np.asarray(bvals, dtype=np.float64)
    g = np.asarray(bvecs, dtype=np.float64)
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    return np.stack([-b * gx * gx, -b * gy * gy, -b * gz * gz,
                     -2 * b * gx * gy, -2 * b * gx * gz, -2 * b * gy * gz,
                     np.ones_like(b)], axis=1)


def _rank_error(bvals: np.ndarray, bvecs: np.ndarray) -> ValidationError:
    axes = []
    for b, g in zip(bvals, bvecs):
        if b <= 0:
            continue
        g = np.asarray(g, dtype=float)
        if not any(abs(abs(float(np.dot(g, a))) - 1.0) < 1e-6 for a in axes):
            axes.append(g)
    has_b0 = bool(np.any(np.asarray(bvals) == 0))
    listed = ", ".join("(" + ", ".join(f"{c:.3f}" for c in a) + ")" for a in axes)
    return ValidationError(
        f"design matrix is rank deficient: {len(axes)} non-collinear direction(s) [{listed}]"
        f"{'' if has_b0 else ' and no b=0 sample'}; need at least 6 non-collinear directions plus b=0 "
        f"(or directions that jointly span all six tensor components)")


def check_design(bvals: np.ndarray, bvecs: np.ndarray) -> np.ndarray:
    X = design_matrix(bvals, bvecs)
    colmax = np.abs(X).max(axis=0)
    if np.any(colmax == 0) or np.linalg.matrix_rank(X / colmax) < 7:
        raise _rank_error(bvals, bvecs)
    return X


def wls_fit_signals(signals: np.ndarray, bvals: np.ndarray, bvecs: np.ndarray,
                    return_ols: bool = False):
    """Fit many voxels at once. ``signals`` is [V, n] (or [n]).

    Pass 1: ordinary least squares on ln S.
    Pass 2: weighted least squares with weights exp(2 * X theta_ols), the
    squared predicted signals. Returns parameters [V, 7].
    """
    sig = np.asarray(signals, dtype=np.float64)
    single = sig.ndim == 1
    sig = np.atleast_2d(sig)
    if sig.shape[1] != len(bvals):
        raise ValidationError(f"{sig.shape[1]} signals per voxel but {len(bvals)} gradient entries")
    if np.any(~(sig > 0)):
        v, k = np.argwhere(~(sig > 0))[0]
        raise ValidationError(f"non-positive signal {sig[v, k]} at voxel {v}, sample {k}; the log-linear fit needs S > 0")
    X = check_design(bvals, bvecs)
    y = np.log(sig)
    theta_ols = np.linalg.lstsq(X, y.T, rcond=None)[0].T  # [V, 7]
    w = np.exp(2.0 * theta_ols @ X.T)  # [V, n]
    # normal equations per voxel, with columns rescaled for conditioning
    colscale = np.abs(X).max(axis=0)
    Xs = X / colscale
    XtWX = np.einsum("ni,vn,nj->vij", Xs, w, Xs)
    XtWy = np.einsum("ni,vn,vn->vi", Xs, w, y)
    theta = np.linalg.solve(XtWX, XtWy[..., None])[..., 0] / colscale
    if single:
        theta, theta_ols = theta[0], theta_ols[0]
    return (theta, theta_ols) if return_ols else theta


def wls_fit(samples: list[DiffusionSample]) -> DiffusionTensor:
    if len(samples) < 7:
        raise ValidationError(f"need at least 7 samples, got {len(samples)}")
    bvals = np.array([s.b_value for s in samples], dtype=float)
    bvecs = np.array([s.gradient_dir for s in samples], dtype=float)
    sig = np.array([s.signal for s in samples], dtype=float)
    return DiffusionTensor.from_params(wls_fit_signals(sig, bvals, bvecs))


def params_to_matrices(theta: np.ndarray) -> np.ndarray:
    t = np.asarray(theta)
    D = np.empty(t.shape[:-1] + (3, 3))
    D[..., 0, 0], D[..., 1, 1], D[..., 2, 2] = t[..., 0], t[..., 1], t[..., 2]
    D[..., 0, 1] = D[..., 1, 0] = t[..., 3]
    D[..., 0, 2] = D[..., 2, 0] = t[..., 4]
    D[..., 1, 2] = D[..., 2, 1] = t[..., 5]
    return D


# ---------------------------------------------------------------------------
# Eigen-decomposition of symmetric 3x3 matrices
# ---------------------------------------------------------------------------
def eigvals3_symmetric(D: np.ndarray) -> np.ndarray:
    """Trigonometric closed form for [..., 3, 3]; eigenvalues sorted descending.

    Near a repeated eigenvalue the arccos step limits accuracy to about
    sqrt(machine eps) relative to the matrix scale (~1e-8); ``eig3_symmetric``
    refines to full precision.
    """
    A = np.asarray(D, dtype=np.float64)
    scale = np.abs(A).max(axis=(-2, -1))
    scale = np.where(scale > 0, scale, 1.0)
    A = A / scale[..., None, None]
    q = np.trace(A, axis1=-2, axis2=-1) / 3.0
    off = A[..., 0, 1] ** 2 + A[..., 0, 2] ** 2 + A[..., 1, 2] ** 2
    p2 = (A[..., 0, 0] - q) ** 2 + (A[..., 1, 1] - q) ** 2 + (A[..., 2, 2] - q) ** 2 + 2.0 * off
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0, p, 1.0)
    B = (A - q[..., None, None] * np.eye(3)) / safe[..., None, None]
    r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    out = np.stack([l1, l2, l3], axis=-1)
    out = np.where((p > 0)[..., None], out, q[..., None])
    return np.sort(out, axis=-1)[..., ::-1] * scale[..., None]


def _eigvec_for(A: np.ndarray, lam: float) -> np.ndarray:
    M = A - lam * np.eye(3)
    r0, r1, r2 = M
    cands = [np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2)]
    norms = [float(c @ c) for c in cands]
    i = int(np.argmax(norms))
    if norms[i] == 0.0:
        return np.array([1.0, 0.0, 0.0])
    return cands[i] / math.sqrt(norms[i])


def _orthogonal_complement(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if abs(w[0]) > abs(w[1]):
        inv = 1.0 / math.hypot(w[0], w[2])
        u = np.array([-w[2] * inv, 0.0, w[0] * inv])
    else:
        inv = 1.0 / math.hypot(w[1], w[2])
        u = np.array([0.0, w[2] * inv, -w[1] * inv])
    return u, np.cross(w, u)


def _second_eigvec(A: np.ndarray, v0: np.ndarray, lam: float) -> np.ndarray:
    # restrict A - lam I to the plane orthogonal to v0 and take its null direction
    u, v = _orthogonal_complement(v0)
    Au, Av = A @ u, A @ v
    m00 = u @ Au - lam
    m01 = u @ Av
    m11 = v @ Av - lam
    a00, a01, a11 = abs(m00), abs(m01), abs(m11)
    if a00 >= a11:
        big = max(a00, a01)
        if big > 0:
            if a00 >= a01:
                m01 /= m00
                m00 = 1.0 / math.sqrt(1.0 + m01 * m01)
                m01 *= m00
            else:
                m00 /= m01
                m01 = 1.0 / math.sqrt(1.0 + m00 * m00)
                m00 *= m01
            return m01 * u - m00 * v
        return u
    big = max(a11, a01)
    if big > 0:
        if a11 >= a01:
            m01 /= m11
            m11 = 1.0 / math.sqrt(1.0 + m01 * m01)
            m01 *= m11
        else:
            m11 /= m01
            m01 = 1.0 / math.sqrt(1.0 + m11 * m11)
            m11 *= m01
        return m11 * u - m01 * v
    return u


def eig3_symmetric(D) -> EigenSystem:
    """Eigenvalues (descending) and orthonormal eigenvectors of a symmetric 3x3.

    The eigenvector of the best-separated eigenvalue comes from cross
    products of rows of (A - lambda I); the second is solved in its
    orthogonal complement, the third is their cross product.
    """
    if isinstance(D, DiffusionTensor):
        D = D.matrix
    A = np.asarray(D, dtype=np.float64)
    if A.shape != (3, 3):
        raise ValidationError(f"expected a 3x3 matrix, got {A.shape}")
    A = 0.5 * (A + A.T)
    scale = float(np.abs(A).max())
    if scale == 0.0:
        return EigenSystem(np.zeros(3), np.eye(3))
    As = A / scale
    lam = eigvals3_symmetric(As)  # descending
    if lam[0] - lam[1] >= lam[1] - lam[2]:
        v0 = _eigvec_for(As, lam[0])
        v1 = _second_eigvec(As, v0, lam[1])
        v2 = np.cross(v0, v1)
    else:
        v2 = _eigvec_for(As, lam[2])
        v1 = _second_eigvec(As, v2, lam[1])
        v0 = np.cross(v1, v2)
    V = np.stack([v0, v1, v2], axis=1)
    # Rayleigh quotients: second-order accurate in the eigenvector error, so they
    # repair the closed form's loss of precision near repeated eigenvalues
    lam = np.einsum("ij,ik,kj->j", V, As, V)
    order = np.argsort(lam)[::-1]
    return EigenSystem(lam[order] * scale, V[:, order])


# ---------------------------------------------------------------------------
# Scalar metrics
# ---------------------------------------------------------------------------
def fa(l1, l2, l3):
    """Fractional anisotropy; 0 when the eigenvalues are (numerically) all zero."""
    l1, l2, l3 = (np.asarray(v, dtype=np.float64) for v in (l1, l2, l3))
    m = (l1 + l2 + l3) / 3.0
    num = (l1 - m) ** 2 + (l2 - m) ** 2 + (l3 - m) ** 2
    den = l1 * l1 + l2 * l2 + l3 * l3
    out = np.where(den < 1e-20, 0.0, np.sqrt(1.5 * num / np.where(den < 1e-20, 1.0, den)))
    return float(out) if out.ndim == 0 else out


def md(l1, l2, l3):
    out = (np.asarray(l1, dtype=np.float64) + l2 + l3) / 3.0
    return float(out) if out.ndim == 0 else out


def rd(l1, l2, l3):
    out = (np.asarray(l2, dtype=np.float64) + l3) / 2.0
    return float(out) if out.ndim == 0 else out


def metrics_from_eigenvalues(evals: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FA/MD/RD from descending eigenvalues [..., 3]; negatives are clamped to 0 here only."""
    lam = np.clip(np.asarray(evals, dtype=np.float64), 0.0, None)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    return np.asarray(fa(l1, l2, l3)), np.asarray(md(l1, l2, l3)), np.asarray(rd(l1, l2, l3))


def voxel_metrics(tensor: DiffusionTensor) -> VoxelMetrics:
    lam = eigvals3_symmetric(tensor.matrix)
    f, m, r = metrics_from_eigenvalues(lam)
    return VoxelMetrics(float(f), float(m), float(r))


@dataclass
class FitResult:
    fa: np.ndarray
    md: np.ndarray
    rd: np.ndarray
    eigenvalues: np.ndarray
    n_negative: int  # voxels with a negative fitted eigenvalue (clamped in metrics)


def fit_voxels(signals: np.ndarray, bvals: np.ndarray, bvecs: np.ndarray) -> FitResult:
    theta = wls_fit_signals(signals, bvals, bvecs)
    lam = eigvals3_symmetric(params_to_matrices(np.atleast_2d(theta)))
    f, m, r = metrics_from_eigenvalues(lam)
    return FitResult(f, m, r, lam, int(np.sum(lam[:, -1] < 0)))


def fit_volume(dwi: np.ndarray, bvals: np.ndarray, bvecs: np.ndarray, mask: np.ndarray) -> tuple[dict, int]:
    """Fit every masked voxel of ``dwi`` [n, Z, Y, X]. Returns metric volumes
    (NaN outside the mask) and the count of voxels with negative eigenvalues."""
    mask = np.asarray(mask, dtype=bool)
    if dwi.shape[1:] != mask.shape:
        raise ValidationError(f"DWI grid {dwi.shape[1:]} differs from mask grid {mask.shape}")
    vols = {k: np.full(mask.shape, np.nan) for k in ("fa", "md", "rd")}
    if not mask.any():
        return vols, 0
    res = fit_voxels(dwi[:, mask].T, bvals, bvecs)
    vols["fa"][mask], vols["md"][mask], vols["rd"][mask] = res.fa, res.md, res.rd
    return vols, res.n_negative


@dataclass
class LevelDTI:
    level: int
    n_voxels: int
    fa: float | None
    md: float | None
    rd: float | None


def per_level_metrics(metric_volumes: Mapping[str, np.ndarray], slice_levels: np.ndarray,
                      cord_mask: np.ndarray, levels: range | list[int] = range(1, 8)) -> dict[int, LevelDTI]:
    """Mean FA/MD/RD over cord-mask voxels of each vertebral level.

    ``slice_levels`` gives the level of each axial (Z) slice (0 = none).
    Levels without voxels have ``None`` metrics (missing, never 0).
    """
    mask = np.asarray(cord_mask, dtype=bool)
    sl = np.asarray(slice_levels)
    if sl.shape != (mask.shape[0],):
        raise ValidationError(f"need one level per slice ({mask.shape[0]}), got shape {sl.shape}")
    out = {}
    for lvl in levels:
        sel = mask & (sl == lvl)[:, None, None]
        n = int(sel.sum())
        if n == 0:
            out[lvl] = LevelDTI(lvl, 0, None, None, None)
            continue
        vals = {k: float(np.mean(metric_volumes[k][sel])) for k in ("fa", "md", "rd")}
        out[lvl] = LevelDTI(lvl, n, **vals)
    return out
