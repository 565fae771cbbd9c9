"""Dataset-level steps behind the CLI: synth, train, segment, quantify, dti, correlate."""
from __future__ import annotations

import json
import logging
import os
import shutil
from pathlib import Path

import numpy as np

from . import dti as dtimod
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ValidationError
from .io import (DatasetManifest, MetricsRow, ScalarVolume, SubjectEntry, comparisons_to_csv, load_gradient_table,
                 load_manifest, load_volume, merge_metrics, read_metrics, save_gradient_table, save_volume,
                 write_metrics)
from .model import ModelConfig, SAttisUNet, TrainConfig, normalize_image, segment_volume, train
from .morphometry import LabelVolume, per_level_aggregate, slice_levels, slice_metrics
from .stats import PairedSamples, stratified_analysis
from .synth import LEVEL_LEGEND, TISSUE_LEGEND, CorrelationPlan, cohort, synthesize_subject

log = logging.getLogger(__name__)


def synth_dataset(out: str | os.PathLike, subjects: int | None = None, females: int = 125, males: int = 142,
                  machines: int = 3, seed: int = 0, plan: CorrelationPlan | None = None,
                  slices_per_level: int = 2) -> DatasetManifest:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    roster = cohort(subjects, females, males, machines, seed)
    table = out / "gradients.txt"
    entries = []
    for r in roster:
        s = synthesize_subject(r["seed"], r["gender"], r["machine"], r["stenosis"], plan=plan,
                               slices_per_level=slices_per_level)
        d = out / r["id"]
        save_volume(ScalarVolume(s.image, s.spacing), d / "image.vol")
        save_volume(LabelVolume(s.labels, s.spacing, dict(TISSUE_LEGEND)), d / "labels.vol")
        save_volume(LabelVolume(s.levels, s.spacing, dict(LEVEL_LEGEND)), d / "levels.vol")
        dwi = []
        for k in range(len(s.bvals)):
            rel = f"{r['id']}/dwi/dwi_{k:03d}.vol"
            save_volume(ScalarVolume(s.dwi[k], s.spacing), out / rel)
            dwi.append(rel)
        (d / "truth.json").write_text(json.dumps({"stenosis": r["stenosis"], "levels": s.truth}, indent=1) + "\n")
        if not table.exists():
            save_gradient_table(table, s.bvals, s.bvecs)
        entries.append(SubjectEntry(r["id"], r["gender"], r["machine"], f"{r['id']}/image.vol",
                                    f"{r['id']}/labels.vol", f"{r['id']}/levels.vol", dwi, "gradients.txt"))
    manifest = DatasetManifest(entries, out)
    manifest.save(out / "manifest.json")
    return manifest


def load_configs(path: str | os.PathLike | None, **model_overrides) -> tuple[ModelConfig, TrainConfig]:
    """JSON file ``{"model": {...}, "train": {...}}``; both sections optional."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ValidationError(f"{path}: config file not found") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed config at byte {exc.pos}: {exc.msg}") from exc
        extra = set(doc) - {"model", "train"}
        if extra:
            raise ValidationError(f"{path}: unknown config sections {sorted(extra)}")
    mdict = {**doc.get("model", {}), **{k: v for k, v in model_overrides.items() if v is not None}}
    return ModelConfig.from_dict(mdict), TrainConfig.from_dict(doc.get("train", {}))


def training_slices(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for s in manifest.subjects:
        img = load_volume(manifest.resolve(s.image))
        lab = load_volume(manifest.resolve(s.label))
        if not isinstance(img, ScalarVolume) or not isinstance(lab, LabelVolume):
            raise ValidationError(f"subject {s.id}: image must be f32 and labels u8")
        if img.data.shape != lab.labels.shape:
            raise ValidationError(f"subject {s.id}: image {img.data.shape} and labels {lab.labels.shape} differ")
        images.append(normalize_image(img.data))
        labels.append(lab.labels)
    return np.concatenate(images), np.concatenate(labels)


def train_from_manifest(manifest_path, ckpt_path, config_path=None, skip_mode=None, seed=None) -> SAttisUNet:
    manifest = load_manifest(manifest_path)
    mcfg, tcfg = load_configs(config_path, skip_mode=skip_mode, seed=seed)
    if seed is not None:
        tcfg.seed = seed
    images, labels = training_slices(manifest)
    if labels.max() >= mcfg.num_classes:
        raise ValidationError(f"labels reach {labels.max()} but the model has {mcfg.num_classes} classes")
    model = SAttisUNet(mcfg)
    train(model, images, labels, tcfg)
    save_checkpoint(model, ckpt_path)
    return model


def segment(ckpt_path, in_path, out_path) -> list[Path]:
    """Segment one image volume, or every subject of a dataset directory.

    For a dataset the output directory mirrors the subjects and carries a
    manifest whose label paths point at the predicted labels.
    """
    model = load_checkpoint(ckpt_path)
    in_path, out_path = Path(in_path), Path(out_path)
    if in_path.is_dir():
        manifest = load_manifest(in_path)
        out_path.mkdir(parents=True, exist_ok=True)
        written, entries = [], []
        for s in manifest.subjects:
            img = load_volume(manifest.resolve(s.image))
            lab = LabelVolume(segment_volume(model, img.data), img.spacing, dict(TISSUE_LEGEND),
                              orientation=img.orientation)
            dst = out_path / s.id / "labels.vol"
            save_volume(lab, dst)
            written.append(dst)
            levels = None
            if s.levels:
                levels = f"{s.id}/levels.vol"
                for suffix in ("", ".json"):
                    shutil.copyfile(str(manifest.resolve(s.levels)) + suffix, str(out_path / levels) + suffix)
            image_rel = os.path.relpath(manifest.resolve(s.image).resolve(), out_path.resolve())
            entries.append(SubjectEntry(s.id, s.gender, s.machine, image_rel,
                                        f"{s.id}/labels.vol", levels))
        DatasetManifest(entries, out_path).save(out_path / "manifest.json")
        return written
    img = load_volume(in_path)
    if not isinstance(img, ScalarVolume):
        raise ValidationError(f"{in_path}: expected an f32 image volume")
    save_volume(LabelVolume(segment_volume(model, img.data), img.spacing, dict(TISSUE_LEGEND),
                            orientation=img.orientation), out_path)
    return [out_path]


def _levels_for(manifest: DatasetManifest, s: SubjectEntry, nz: int) -> np.ndarray:
    if not s.levels:
        raise ValidationError(f"subject {s.id}: no level labels; per-level metrics need them")
    lv = load_volume(manifest.resolve(s.levels))
    if not isinstance(lv, LabelVolume) or lv.labels.shape[0] != nz:
        raise ValidationError(f"subject {s.id}: level volume does not match the label grid")
    return slice_levels(lv.labels)


def quantify(labels_dir) -> list[MetricsRow]:
    manifest = load_manifest(labels_dir)
    rows = []
    for s in manifest.subjects:
        vol = load_volume(manifest.resolve(s.label))
        if not isinstance(vol, LabelVolume):
            raise ValidationError(f"subject {s.id}: labels must be a u8 volume")
        sl = _levels_for(manifest, s, vol.labels.shape[0])
        for lvl, m in per_level_aggregate(slice_metrics(vol, sl)).items():
            rows.append(MetricsRow(s.id, s.gender, s.machine, lvl, m.csa, m.sac, m.ratio))
    return rows


def dti_metrics(dwi_dir, labels_dir, bvecs_path=None) -> list[MetricsRow]:
    dwi_manifest = load_manifest(dwi_dir)
    lab_manifest = load_manifest(labels_dir)
    by_id = {s.id: s for s in lab_manifest.subjects}
    table = load_gradient_table(bvecs_path) if bvecs_path else None
    rows = []
    for s in dwi_manifest.subjects:
        if not s.dwi:
            raise ValidationError(f"subject {s.id}: no DWI volumes listed")
        ls = by_id.get(s.id)
        if ls is None:
            raise ValidationError(f"subject {s.id}: not found in {labels_dir}")
        bvals, bvecs = table if table is not None else load_gradient_table(dwi_manifest.resolve(s.bvecs))
        if len(bvals) != len(s.dwi):
            raise ValidationError(f"subject {s.id}: {len(s.dwi)} DWI volumes but {len(bvals)} gradient entries")
        dwi = np.stack([load_volume(dwi_manifest.resolve(p)).data for p in s.dwi])
        vol = load_volume(lab_manifest.resolve(ls.label))
        sl = _levels_for(lab_manifest, ls, vol.labels.shape[0])
        metrics, n_neg = dtimod.fit_volume(dwi, bvals, bvecs, vol.cord)
        if n_neg:
            log.warning("subject %s: %d voxel(s) with negative eigenvalues (clamped for metrics)", s.id, n_neg)
        for lvl, m in dtimod.per_level_metrics(metrics, sl, vol.cord).items():
            rows.append(MetricsRow(s.id, s.gender, s.machine, lvl, fa=m.fa, md=m.md, rd=m.rd))
    return rows


def merge_into(out_path, rows: list[MetricsRow], columns: list[str]) -> list[MetricsRow]:
    out_path = Path(out_path)
    merged = merge_metrics(read_metrics(out_path), rows, columns) if out_path.exists() else rows
    write_metrics(out_path, merged)
    return merged


def correlate(metrics_path, group_by: str, out_path, bonferroni: bool = False):
    """Pearson r between SAC/CSA (x) and FA (y) per stratum, plus Fisher z-tests."""
    rows = read_metrics(metrics_path)
    samples = PairedSamples([r.sac_csa_ratio for r in rows], [r.fa for r in rows],
                            [{"gender": r.gender, "machine": r.machine, "level": f"C{r.level}"} for r in rows])
    result = stratified_analysis(samples, group_by, bonferroni=bonferroni)
    Path(out_path).write_text(comparisons_to_csv(result.comparisons, with_adjusted=bonferroni))
    return result
