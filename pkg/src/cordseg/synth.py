"""Synthetic cervical-cord phantoms: axial label slices with elliptical cord
and canal, intensity images, vertebral level bands and DWI signals with a
planted FA <-> SAC/CSA correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .dti import gradient_scheme, tensor_from_eigen
from .errors import ValidationError
from .rng import make_rng

BACKGROUND, CORD, CSF, BONE, SOFT_TISSUE = 0, 1, 2, 3, 4
TISSUE_LEGEND = {0: "background", 1: "cord", 2: "csf", 3: "bone", 4: "soft_tissue"}
LEVEL_LEGEND = {0: "none", **{i: f"C{i}" for i in range(1, 8)}}
NUM_CLASSES = 5

INTENSITY = {BACKGROUND: 0.05, SOFT_TISSUE: 0.35, BONE: 0.15, CSF: 0.90, CORD: 0.55}

# cord semi-axes (x, y) in pixels at zero stenosis and CSF margins around it
CORD_AXES = (9.0, 6.0)
CORD_SHRINK = 0.2
CANAL_MARGIN = (6.0, 5.0)
LEVEL_JITTER = 0.15


@dataclass(frozen=True)
class SliceGeometry:
    cx: float
    cy: float
    cord_a: float
    cord_b: float
    canal_a: float
    canal_b: float
    ring: float = 4.0
    body_a: float = 28.0
    body_b: float = 24.0

    @property
    def analytic_csa_px(self) -> float:
        return math.pi * self.cord_a * self.cord_b

    @property
    def analytic_sac_px(self) -> float:
        return math.pi * (self.canal_a * self.canal_b - self.cord_a * self.cord_b)

    @property
    def analytic_ratio(self) -> float:
        return self.analytic_sac_px / self.analytic_csa_px


def geometry_for_stenosis(theta: float, cx: float = 31.5, cy: float = 31.5, scale: float = 1.0) -> SliceGeometry:
    """theta=0: widest canal; theta=1: canal collapses onto the cord (SAC = 0)."""
    if not 0.0 <= theta <= 1.0:
        raise ValidationError(f"stenosis level must lie in [0, 1], got {theta}")
    shrink = 1.0 - CORD_SHRINK * theta
    ca, cb = CORD_AXES[0] * shrink * scale, CORD_AXES[1] * shrink * scale
    ma, mb = CANAL_MARGIN[0] * (1.0 - theta) * scale, CANAL_MARGIN[1] * (1.0 - theta) * scale
    return SliceGeometry(cx, cy, ca, cb, ca + ma, cb + mb, ring=4.0 * scale,
                         body_a=28.0 * scale, body_b=24.0 * scale)


def ratio_for_stenosis(theta: np.ndarray) -> np.ndarray:
    """Analytic SAC/CSA of ``geometry_for_stenosis`` (scale-free)."""
    theta = np.asarray(theta, dtype=np.float64)
    shrink = 1.0 - CORD_SHRINK * theta
    ca, cb = CORD_AXES[0] * shrink, CORD_AXES[1] * shrink
    a = ca + CANAL_MARGIN[0] * (1.0 - theta)
    b = cb + CANAL_MARGIN[1] * (1.0 - theta)
    return (a * b - ca * cb) / (ca * cb)


def ellipse_mask(shape: tuple[int, int], cx: float, cy: float, a: float, b: float) -> np.ndarray:
    """Pixels whose centres satisfy ((x-cx)/a)^2 + ((y-cy)/b)^2 <= 1 (x = column)."""
    if a <= 0 or b <= 0:
        return np.zeros(shape, dtype=bool)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def render_labels(geom: SliceGeometry, size: int = 64) -> np.ndarray:
    shape = (size, size)
    lab = np.zeros(shape, dtype=np.uint8)
    lab[ellipse_mask(shape, geom.cx, geom.cy + 6.0, geom.body_a, geom.body_b)] = SOFT_TISSUE
    # vertebral arch ring around the canal and the vertebral body anterior to it
    lab[ellipse_mask(shape, geom.cx, geom.cy, geom.canal_a + geom.ring, geom.canal_b + geom.ring)] = BONE
    lab[ellipse_mask(shape, geom.cx, geom.cy + geom.canal_b + geom.ring + 4.0, 11.0, 5.5)] = BONE
    lab[ellipse_mask(shape, geom.cx, geom.cy, geom.canal_a, geom.canal_b)] = CSF
    lab[ellipse_mask(shape, geom.cx, geom.cy, geom.cord_a, geom.cord_b)] = CORD
    return lab


def render_image(labels: np.ndarray, rng: np.random.Generator, noise: float = 0.06,
                 gain: float = 1.0) -> np.ndarray:
    lut = np.array([INTENSITY[i] for i in range(NUM_CLASSES)])
    img = lut[labels] * gain
    ny, nx = labels.shape[-2:]
    # smooth multiplicative bias field
    gy, gx = rng.normal(0, 0.08, 2)
    yy, xx = np.mgrid[0:ny, 0:nx] / max(ny, nx) - 0.5
    img = img * (1.0 + gy * yy + gx * xx)
    return (img + rng.normal(0.0, noise, img.shape)).astype(np.float32)


def random_slice_geometry(rng: np.random.Generator, size: int = 64) -> SliceGeometry:
    theta = float(rng.uniform(0.0, 1.0))
    scale = float(rng.uniform(0.85, 1.15)) * size / 64
    c = (size - 1) / 2
    cx = c + float(rng.uniform(-4, 4)) * size / 64
    cy = c - 4 * size / 64 + float(rng.uniform(-3, 3)) * size / 64
    return geometry_for_stenosis(theta, cx, cy, scale)


def toy_segmentation_set(n: int, seed: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """``n`` independent axial slices: images [n, size, size] float32, labels uint8 (5 classes)."""
    rng = make_rng(seed, 17)
    images = np.empty((n, size, size), dtype=np.float32)
    labels = np.empty((n, size, size), dtype=np.uint8)
    for i in range(n):
        lab = render_labels(random_slice_geometry(rng, size), size)
        labels[i] = lab
        images[i] = render_image(lab, rng)
    return images, labels


# ---------------------------------------------------------------------------
# Planted correlation model
# ---------------------------------------------------------------------------
@dataclass
class CorrelationPlan:
    """FA = fa_mean + offsets + fa_sd * (rho * z(ratio) + sqrt(1 - rho^2) * eps),
    with rho = base_rho + rho_delta[gender] + rho_delta[machine]."""

    fa_mean: float = 0.70
    fa_sd: float = 0.04
    base_rho: float = 0.5
    rho_delta: dict = field(default_factory=lambda: {"F": 0.1, "M": -0.1, "A": 0.0, "B": 0.15, "C": -0.2})
    fa_offset: dict = field(default_factory=lambda: {"F": 0.01, "M": -0.01, "A": 0.0, "B": 0.02, "C": -0.02})
    md: float = 1.0e-3

    def rho(self, gender: str, machine: str) -> float:
        r = self.base_rho + self.rho_delta.get(gender, 0.0) + self.rho_delta.get(machine, 0.0)
        return float(np.clip(r, -0.99, 0.99))

    def offset(self, gender: str, machine: str) -> float:
        return self.fa_offset.get(gender, 0.0) + self.fa_offset.get(machine, 0.0)

    @classmethod
    def uniform(cls, rho: float, **kw) -> "CorrelationPlan":
        return cls(base_rho=rho, rho_delta={}, fa_offset={}, **kw)


@lru_cache(maxsize=1)
def ratio_moments() -> tuple[float, float]:
    """Mean and sd of the per-level analytic ratio when subject stenosis is
    U(0, 1) and levels jitter by U(-j, j) (clipped), via midpoint quadrature."""
    n = 2001
    t = (np.arange(n) + 0.5) / n
    u = (np.arange(n) + 0.5) / n * 2 * LEVEL_JITTER - LEVEL_JITTER
    th = np.clip(t[:, None] + u[None, :], 0.0, 1.0)
    r = ratio_for_stenosis(th)
    return float(r.mean()), float(r.std())


def planted_fa(ratio: np.ndarray, plan: CorrelationPlan, gender: str, machine: str,
               rng: np.random.Generator) -> np.ndarray:
    mu, sd = ratio_moments()
    z = (np.asarray(ratio, dtype=np.float64) - mu) / sd
    rho = plan.rho(gender, machine)
    eps = rng.standard_normal(z.shape)
    fa = plan.fa_mean + plan.offset(gender, machine) + plan.fa_sd * (rho * z + math.sqrt(1 - rho * rho) * eps)
    return np.clip(fa, 0.05, 0.95)


def cylindrical_eigenvalues(fa: float, md: float) -> tuple[float, float, float]:
    """Eigenvalues (l1, lp, lp) with the given FA and mean diffusivity."""
    if not 0.0 <= fa < 1.0:
        raise ValidationError(f"FA must lie in [0, 1), got {fa}")
    k = fa * math.sqrt(3.0 / (9.0 - 6.0 * fa * fa))
    return md * (1 + 2 * k), md * (1 - k), md * (1 - k)


def paired_samples(n: int, rho: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Bivariate normal pairs with correlation ``rho``."""
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    return x, y


# ---------------------------------------------------------------------------
# Subject volumes
# ---------------------------------------------------------------------------
@dataclass
class SyntheticSubject:
    image: np.ndarray  # [Z, Y, X] float32
    labels: np.ndarray  # [Z, Y, X] uint8 tissue labels
    levels: np.ndarray  # [Z, Y, X] uint8 vertebral level on cord voxels
    dwi: np.ndarray  # [n_samples, Z, Y, X] float32
    bvals: np.ndarray
    bvecs: np.ndarray
    spacing: tuple[float, float, float]
    truth: list[dict]  # per level: level, theta, ratio (analytic), fa (planted)


def synthesize_subject(seed: int, gender: str, machine: str, stenosis: float,
                       plan: CorrelationPlan | None = None, size: int = 64, slices_per_level: int = 2,
                       spacing: tuple[float, float, float] = (3.0, 0.5, 0.5), b_value: float = 1000.0,
                       s0: float = 1000.0, dwi_noise: float = 1 / 100, image_noise: float = 0.06,
                       machine_gain: dict | None = None) -> SyntheticSubject:
    """Axial stack of 7 level bands; stenosis varies slightly per level.

    DWI: cord voxels carry a cylindrical tensor (principal axis along z)
    with the level's planted FA; CSF is isotropic free water; other
    tissue is isotropic and dim. Rician noise with sd ``dwi_noise * s0``.
    """
    if not 0.0 <= stenosis <= 1.0:
        raise ValidationError(f"stenosis level must lie in [0, 1], got {stenosis}")
    if gender not in ("F", "M"):
        raise ValidationError(f"gender must be F or M, got {gender!r}")
    plan = plan or CorrelationPlan()
    gains = machine_gain or {"A": 1.0, "B": 1.1, "C": 0.9}
    rng = make_rng(seed, 3)
    nz = 7 * slices_per_level
    image = np.empty((nz, size, size), dtype=np.float32)
    labels = np.empty((nz, size, size), dtype=np.uint8)
    levels = np.zeros((nz, size, size), dtype=np.uint8)
    bvals, bvecs = gradient_scheme(b_value)
    dwi = np.empty((len(bvals), nz, size, size), dtype=np.float32)
    truth = []
    c = (size - 1) / 2
    cx = c + rng.uniform(-2, 2) * size / 64
    cy = c - 4 * size / 64
    scale = size / 64 * float(rng.uniform(0.95, 1.05))
    thetas = np.clip(stenosis + rng.uniform(-LEVEL_JITTER, LEVEL_JITTER, 7), 0.0, 1.0)
    ratios = ratio_for_stenosis(thetas)
    fas = planted_fa(ratios, plan, gender, machine, rng)
    iso = {CSF: 3.0e-3, SOFT_TISSUE: 1.2e-3, BONE: 0.3e-3, BACKGROUND: 0.0}
    s0_tissue = {CORD: s0, CSF: 1.5 * s0, SOFT_TISSUE: 0.6 * s0, BONE: 0.2 * s0, BACKGROUND: 0.02 * s0}
    for lvl in range(7):
        geom = geometry_for_stenosis(float(thetas[lvl]), cx, cy, scale)
        lab = render_labels(geom, size)
        l1, l2, l3 = cylindrical_eigenvalues(float(fas[lvl]), plan.md)
        D_cord = tensor_from_eigen(np.array([l1, l2, l3]), np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], float).T)
        atten_cord = np.exp(-bvals * np.einsum("ni,ij,nj->n", bvecs, D_cord, bvecs))
        truth.append({"level": lvl + 1, "theta": float(thetas[lvl]), "ratio": float(geom.analytic_ratio),
                      "fa": float(fas[lvl]), "csa_mm2": geom.analytic_csa_px * spacing[1] * spacing[2],
                      "sac_mm2": geom.analytic_sac_px * spacing[1] * spacing[2]})
        for k in range(slices_per_level):
            z = lvl * slices_per_level + k
            labels[z] = lab
            levels[z][lab == CORD] = lvl + 1
            image[z] = render_image(lab, rng, image_noise, gains.get(machine, 1.0))
            sig = np.zeros((len(bvals), size, size))
            for tissue, d in iso.items():
                m = lab == tissue
                sig[:, m] = (s0_tissue[tissue] * np.exp(-bvals * d))[:, None]
            sig[:, lab == CORD] = (s0 * atten_cord)[:, None]
            sigma = dwi_noise * s0
            noisy = np.hypot(sig + rng.normal(0, sigma, sig.shape), rng.normal(0, sigma, sig.shape))
            dwi[:, z] = noisy
    return SyntheticSubject(image, labels, levels, dwi, bvals, bvecs, spacing, truth)


def cohort(n: int | None = None, females: int = 125, males: int = 142, machines: int = 3,
           seed: int = 0) -> list[dict]:
    """Subject roster (id, gender, machine, stenosis, seed).

    With ``n`` given, the roster keeps the female/male proportion of the
    full cohort; machines are assigned round-robin.
    """
    if machines < 1 or machines > 26:
        raise ValidationError("machines must lie in [1, 26]")
    total = females + males
    if n is None:
        n = total
    if n < 1 or total < 1:
        raise ValidationError("need at least one subject")
    nf = int(round(n * females / total))
    genders = ["F"] * nf + ["M"] * (n - nf)
    rng = make_rng(seed, 5)
    order = rng.permutation(n)
    tags = [chr(ord("A") + i) for i in range(machines)]
    roster = []
    for i, j in enumerate(order):
        roster.append({
            "id": f"sub-{i:03d}",
            "gender": genders[j],
            "machine": tags[i % machines],
            "stenosis": float(rng.uniform(0.0, 1.0)),
            "seed": int(seed * 100003 + i),
        })
    return roster
