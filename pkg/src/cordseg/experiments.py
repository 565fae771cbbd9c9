"""Reusable experiment drivers: toy segmentation runs and the full CLI pipeline."""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig, SAttisUNet, TrainConfig, evaluate, normalize_image, train
from .synth import toy_segmentation_set

TEST_SEED_OFFSET = 1000


@dataclass
class ToyRun:
    skip_mode: str
    seed: int
    mean_fg_dice: float
    pixel_accuracy: float
    seconds: float
    losses: list[float] = field(default_factory=list)


def toy_segmentation_run(skip_mode: str = "attentive", seed: int = 0, n_train: int = 200, n_test: int = 50,
                         epochs: int = 20, model_overrides: dict | None = None, verbose: bool = False) -> ToyRun:
    """Train on ``n_train`` synthetic slices and score on a held-out set drawn
    from a different seed."""
    images, labels = toy_segmentation_set(n_train, seed)
    test_images, test_labels = toy_segmentation_set(n_test, TEST_SEED_OFFSET + seed)
    model = SAttisUNet(ModelConfig(skip_mode=skip_mode, seed=seed, **(model_overrides or {})))
    cb = (lambda e, loss: print(f"  {skip_mode} seed {seed} epoch {e + 1}: loss {loss:.4f}", flush=True)) \
        if verbose else None
    t0 = time.perf_counter()
    history = train(model, normalize_image(images), labels, TrainConfig(epochs=epochs, seed=seed), callback=cb)
    scores = evaluate(model, normalize_image(test_images), test_labels)
    return ToyRun(skip_mode, seed, scores["mean_fg_dice"], scores["pixel_accuracy"],
                  time.perf_counter() - t0, list(history.epoch_loss))


def run_pipeline(workdir: str | os.PathLike, subjects: int = 10, seed: int = 0,
                 config: dict | None = None, strict: bool = True) -> Path:
    """synth -> train -> segment -> quantify -> dti -> correlate through the CLI.

    Returns the work directory; raises RuntimeError if any step fails.
    """
    from .cli import main

    w = Path(workdir)
    w.mkdir(parents=True, exist_ok=True)
    data, seg, metrics = w / "data", w / "seg", w / "metrics.csv"
    flag = ["--strict"] if strict else []
    train_args = []
    if config is not None:
        (w / "config.json").write_text(json.dumps(config, indent=1) + "\n")
        train_args = ["--config", str(w / "config.json")]
    steps = [
        ["synth", "--subjects", str(subjects), "--seed", str(seed), "--out", str(data)],
        ["train", "--manifest", str(data), "--out", str(w / "model.ckpt"), "--seed", str(seed)] + train_args,
        ["segment", "--ckpt", str(w / "model.ckpt"), "--in", str(data), "--out", str(seg)],
        ["quantify", "--labels", str(seg), "--out", str(metrics)],
        ["dti", "--dwi", str(data), "--labels", str(seg), "--out", str(metrics)],
    ] + [["correlate", "--metrics", str(metrics), "--group-by", g, "--out", str(w / f"corr_{g}.csv")]
         for g in ("gender", "machine", "level")]
    for argv in steps:
        code = main(flag + argv)
        if code != 0:
            raise RuntimeError(f"step {argv[0]} exited with {code}")
    return w


def tree_digest(root: str | os.PathLike) -> dict[str, str]:
    """SHA-256 of every file under ``root``, keyed by relative path."""
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}
