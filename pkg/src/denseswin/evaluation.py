"""Eval-mode inference over a manifest split and report files."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ImageSet, load_split, read_manifest, stratified_split
from .errors import DimensionError
from .metrics import ConfusionMatrix, CurveSet, MetricsReport, PCAProjection, confusion, metrics_from_cm, pca_2d, roc_pr_curves, softmax_np
from .train import Checkpoint, load_checkpoint, model_from_checkpoint, predict_logits


@dataclass
class EvalResult:
    report: MetricsReport
    confusion: ConfusionMatrix
    curves: CurveSet | None
    features: np.ndarray
    probabilities: np.ndarray
    pca: PCAProjection | None
    sample_ids: list[str]


def split_data(ck: Checkpoint, manifest_path, split: str) -> ImageSet:
    """Re-derive the run's stratified split and decode ``split``."""
    cfg = ck.config
    manifest = stratified_split(read_manifest(manifest_path), cfg.data.test_fraction, ck.seed).split(split)
    return load_split(manifest, cfg.model.image_size)


def evaluate(ck: Checkpoint | str | Path, data: ImageSet, out_dir=None, batch_size: int = 16) -> EvalResult:
    """Forward ``data`` in eval mode; write report files when ``out_dir`` is given."""
    ck = ck if isinstance(ck, Checkpoint) else load_checkpoint(ck)
    size = ck.config.model.image_size
    if data.images.shape[1:] != (3, size, size):
        raise DimensionError(f"checkpoint expects 3x{size}x{size} images, data has {data.images.shape[1:]}")
    model = model_from_checkpoint(ck)
    logits, feats = predict_logits(model, data.images[data.sources], batch_size, with_features=True)
    probs = softmax_np(logits.astype(np.float64))
    k = len(ck.labels)
    cm = confusion(logits.argmax(axis=1), data.labels, k, ck.labels.names)
    report = metrics_from_cm(cm)
    curves = None
    if len(np.unique(data.labels)) > 1:
        curves = roc_pr_curves(probs, data.labels, k)
        report.roc_auc, report.pr_auc, report.skipped_classes = curves.roc_auc, curves.pr_auc, curves.skipped
    pca = pca_2d(feats, data.labels) if len(feats) >= 3 else None
    ids = [f"{p}#{c}" if c else p for p, c in zip(data.paths, data.copies)]
    result = EvalResult(report, cm, curves, feats, probs, pca, ids)
    if out_dir is not None:
        write_reports(result, out_dir)
    return result


def _writer(path: Path):
    f = path.open("w", encoding="utf-8", newline="")
    return f, csv.writer(f, lineterminator="\n")


def write_reports(res: EvalResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = res.confusion.class_names
    labels = res.pca.labels if res.pca is not None and res.pca.labels is not None else None

    f, w = _writer(out / "metrics.csv")
    with f:
        w.writerow(["metric", "class", "value"])
        for metric, cls, value in res.report.rows():
            w.writerow([metric, cls, repr(float(value))])

    f, w = _writer(out / "confusion.csv")
    with f:
        w.writerow(["target\\predicted", *names])
        for name, row in zip(names, res.confusion.counts):
            w.writerow([name, *map(int, row)])

    for kind in ("roc", "pr"):
        f, w = _writer(out / f"{kind}.csv")
        with f:
            w.writerow(["class", "x", "y"])
            if res.curves is not None:
                for c, curve in getattr(res.curves, kind).items():
                    for x, y in zip(curve.x, curve.y):
                        w.writerow([names[c], repr(float(x)), repr(float(y))])

    d = res.features.shape[1]
    label_col = labels if labels is not None else np.full(len(res.sample_ids), -1)
    f, w = _writer(out / "features.csv")
    with f:
        w.writerow(["sample_id", "label", *[f"f{i}" for i in range(d)]])
        for sid, lab, row in zip(res.sample_ids, label_col, res.features):
            w.writerow([sid, int(lab), *[repr(float(v)) for v in row]])

    f, w = _writer(out / "pca.csv")
    with f:
        w.writerow(["sample_id", "label", "pc1", "pc2"])
        if res.pca is not None:
            for sid, lab, (a, b) in zip(res.sample_ids, label_col, res.pca.coords):
                w.writerow([sid, int(lab), repr(float(a)), repr(float(b))])
