"""Cord cross-sectional area (CSA), space available for the cord (SAC) and
their ratio, per axial slice and per vertebral level, by voxel counting."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_LEGEND = {0: "background", 1: "cord", 2: "csf", 3: "bone", 4: "soft_tissue"}


@dataclass
class LabelVolume:
    """Integer label grid [Z, Y, X] with voxel spacing (dz, dy, dx) in mm.

    Axial slices are the Z planes. ``cord_labels`` and ``csf_labels`` name
    which legend values make up the cord and the CSF; the canal is their
    union unless an explicit ``canal_mask`` is given.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    legend: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_LEGEND))
    cord_labels: tuple[int, ...] = (1,)
    csf_labels: tuple[int, ...] = (2,)
    canal_mask: np.ndarray | None = None
    orientation: str = "RPI"

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValidationError(f"label volume must be [Z, Y, X], got shape {self.labels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing}")
        present = set(np.unique(self.labels).tolist())
        missing = present - set(self.legend)
        if missing:
            raise ValidationError(f"labels {sorted(missing)} are not in the legend {self.legend}")
        if self.canal_mask is not None:
            self.canal_mask = np.asarray(self.canal_mask, dtype=bool)
            if self.canal_mask.shape != self.labels.shape:
                raise ValidationError("canal mask grid differs from the label grid")

    @property
    def pixel_area(self) -> float:
        return self.spacing[1] * self.spacing[2]

    @property
    def cord(self) -> np.ndarray:
        return np.isin(self.labels, self.cord_labels)

    @property
    def canal(self) -> np.ndarray:
        if self.canal_mask is not None:
            return self.canal_mask | self.cord
        return np.isin(self.labels, self.cord_labels + self.csf_labels)

    def validate(self) -> list[str]:
        """Slices where cord voxels lie outside an explicit canal mask."""
        if self.canal_mask is None:
            return []
        outside = self.cord & ~self.canal_mask
        return [f"slice {z}: {int(n)} cord voxel(s) outside the canal"
                for z, n in enumerate(outside.sum(axis=(1, 2))) if n]


@dataclass
class SliceMetrics:
    slice_index: int
    csa: float
    sac: float
    ratio: float | None
    level: int = 0


@dataclass
class LevelMetrics:
    level: int
    n_slices: int
    csa: float | None
    sac: float | None
    ratio: float | None


def _check_slice(vol: LabelVolume, z: int) -> None:
    if not 0 <= z < vol.labels.shape[0]:
        raise ValidationError(f"slice {z} outside [0, {vol.labels.shape[0]})")


def csa_per_slice(vol: LabelVolume, z: int) -> float:
    _check_slice(vol, z)
    return int(np.isin(vol.labels[z], vol.cord_labels).sum()) * vol.pixel_area


def sac_per_slice(vol: LabelVolume, z: int) -> float:
    """(canal voxels - cord voxels) x pixel area; cord voxels outside an
    explicit canal mask trigger a warning and count towards both."""
    _check_slice(vol, z)
    cord = np.isin(vol.labels[z], vol.cord_labels)
    if vol.canal_mask is not None:
        stray = int((cord & ~vol.canal_mask[z]).sum())
        if stray:
            warnings.warn(f"slice {z}: {stray} cord voxel(s) outside the canal", stacklevel=2)
        canal = vol.canal_mask[z] | cord
    else:
        canal = np.isin(vol.labels[z], vol.cord_labels + vol.csf_labels)
    return (int(canal.sum()) - int(cord.sum())) * vol.pixel_area


def sac_csa_ratio(m: SliceMetrics | tuple[float, float]) -> float | None:
    """SAC / CSA, or ``None`` (undefined) when CSA is 0."""
    sac, csa = (m.sac, m.csa) if isinstance(m, SliceMetrics) else m
    if csa <= 0:
        return None
    return sac / csa


def slice_levels(levels: np.ndarray) -> np.ndarray:
    """Level of each Z slice: the most frequent non-zero label in the slice
    (ties to the lowest level), 0 when the slice carries no level label."""
    levels = np.asarray(levels)
    out = np.zeros(levels.shape[0], dtype=np.int64)
    for z in range(levels.shape[0]):
        vals = levels[z][levels[z] > 0]
        if vals.size:
            counts = np.bincount(vals.astype(np.int64))
            out[z] = int(np.argmax(counts))
    return out


def slice_metrics(vol: LabelVolume, levels: np.ndarray | None = None) -> list[SliceMetrics]:
    """Per-slice CSA/SAC/ratio. ``levels`` is a per-slice level array or a
    level-label volume on the same grid."""
    nz = vol.labels.shape[0]
    if levels is None:
        sl = np.zeros(nz, dtype=np.int64)
    else:
        levels = np.asarray(levels)
        sl = slice_levels(levels) if levels.ndim == 3 else levels.astype(np.int64)
        if sl.shape != (nz,):
            raise ValidationError(f"level labels cover {sl.shape[0]} slices, volume has {nz}")
    out = []
    for z in range(nz):
        csa = csa_per_slice(vol, z)
        sac = sac_per_slice(vol, z)
        out.append(SliceMetrics(z, csa, sac, sac_csa_ratio((sac, csa)), int(sl[z])))
    return out


def _mean(values: Sequence[float]) -> float | None:
    return float(np.mean(values)) if len(values) else None


def per_level_aggregate(metrics: Iterable[SliceMetrics], levels: Iterable[int] = range(1, 8)) -> dict[int, LevelMetrics]:
    """Mean CSA, SAC and ratio over the slices of each level.

    Empty levels are reported with ``None`` values. The ratio mean uses only
    slices where the ratio is defined (CSA > 0).
    """
    metrics = list(metrics)
    out = {}
    for lvl in levels:
        rows = [m for m in metrics if m.level == lvl]
        ratios = [m.ratio for m in rows if m.ratio is not None]
        out[lvl] = LevelMetrics(lvl, len(rows), _mean([m.csa for m in rows]), _mean([m.sac for m in rows]),
                                _mean(ratios))
    return out
