"""Frozen-feature evaluation: linear probe top-1 and retrieval Rank-k / mAP."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, center_view
from .encoder import encode_crops, instance_px_of
from .errors import ConfigError, UsageError
from .optim import AdamW
from .trainer import tensors_bytes


@dataclass
class FeatureTable:
    features: np.ndarray  # N x D
    labels: np.ndarray
    split: np.ndarray  # "train" / "test" per row

    def rows(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.split == tag
        return self.features[m], self.labels[m]


def extract_features(data: Dataset, params: dict[str, np.ndarray], crop_px: int, chunk: int = 256) -> FeatureTable:
    """Mean patch embedding of the whole image resized to ``crop_px`` (no augmentation)."""
    s = instance_px_of(params)
    if crop_px % s:
        raise ConfigError(f"checkpoint instance size {s} does not divide the evaluation crop size {crop_px}")
    out = []
    with ad.no_grad():
        for lo in range(0, len(data), chunk):
            view = center_view(data.images[lo : lo + chunk], crop_px)
            out.append(encode_crops(view, params).data.mean(axis=-2))
    feats = np.concatenate(out) if out else np.zeros((0, params["head.w"].shape[0]))
    if not np.isfinite(feats).all():
        raise UsageError("extracted features contain non-finite values")
    return FeatureTable(feats, np.asarray(data.fine), data.split())


def stratified_sample(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Indices keeping ``round(fraction * n_c)`` examples of every class ``c``."""
    if not 0 < fraction <= 1:
        raise UsageError(f"label_fraction must lie in (0, 1], got {fraction}")
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = int(round(fraction * len(idx)))
        if n == 0:
            raise UsageError(f"label_fraction={fraction} leaves class {c} with no training examples")
        keep.append(np.sort(rng.permutation(idx)[:n]))
    return np.concatenate(keep)


def linear_probe(
    table: FeatureTable,
    label_fraction: float = 1.0,
    seed: int = 0,
    epochs: int = 100,
    lr: float = 1e-3,
    batch_size: int = 64,
    weight_decay: float = 1e-4,
) -> float:
    """Train a softmax-regression classifier on the (sampled) train rows; return test top-1 in percent."""
    x_tr, y_tr = table.rows("train")
    x_te, y_te = table.rows("test")
    if len(x_tr) == 0 or len(x_te) == 0:
        raise UsageError("linear probe needs both train and test rows")
    rng = np.random.default_rng(seed)
    sel = stratified_sample(y_tr, label_fraction, rng)
    x_tr, y_tr = x_tr[sel], y_tr[sel]
    classes = np.unique(np.concatenate([y_tr, y_te]))
    yi = np.searchsorted(classes, y_tr)
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-8
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd

    d, k = x_tr.shape[1], len(classes)
    params = {"w": np.zeros((d, k)), "b": np.zeros(k)}
    opt = AdamW(["w", "b"], [(d, k), (k,)], exempt=lambda n: n == "b")
    for _ in range(epochs):
        order = rng.permutation(len(x_tr))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            xb = x_tr[idx]
            p = ad.softmax_np(xb @ params["w"] + params["b"])
            p[np.arange(len(idx)), yi[idx]] -= 1.0
            p /= len(idx)
            opt.step(params, {"w": xb.T @ p, "b": p.sum(axis=0)}, lr, weight_decay)
    pred = classes[np.argmax(x_te @ params["w"] + params["b"], axis=1)]
    return 100.0 * float(np.mean(pred == y_te))


def _similarity_row(f: np.ndarray, q: int, metric: str) -> np.ndarray:
    # elementwise product then row sum: identical rows always give identical scores
    if metric == "cosine":
        return (f * f[q]).sum(axis=1)
    return -((f - f[q]) ** 2).sum(axis=1)


def retrieval_eval(features: np.ndarray, labels: np.ndarray, metric: str = "cosine") -> tuple[float, float, float]:
    """(Rank-1, Rank-5, mAP) in percent; every sample queries all the others.

    Ties in similarity are broken by the lower gallery index. A query with no
    same-label item scores 0 on every metric.
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(f)
    if n < 2:
        raise UsageError(f"retrieval needs at least 2 samples, got {n}")
    if metric not in ("cosine", "euclidean"):
        raise UsageError(f"unknown retrieval metric {metric!r}")
    if metric == "cosine":
        norm = np.sqrt((f * f).sum(axis=1, keepdims=True))
        f = f / np.maximum(norm, 1e-12)
    r1 = r5 = ap_sum = 0.0
    for q in range(n):
        others = np.delete(np.arange(n), q)
        sim = _similarity_row(f, q, metric)[others]
        ranked = others[np.argsort(-sim, kind="stable")]
        hits = labels[ranked] == labels[q]
        if not hits.any():
            continue
        r1 += hits[0]
        r5 += hits[:5].any()
        pos = np.flatnonzero(hits) + 1
        ap_sum += float(np.mean(np.arange(1, len(pos) + 1) / pos))
    return float(100.0 * r1 / n), float(100.0 * r5 / n), float(100.0 * ap_sum / n)


def metrics_csv(metrics: dict[str, float]) -> str:
    return "metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in metrics.items())


def export_features(table: FeatureTable, path: str | Path) -> None:
    """Write features and labels in the checkpoint tensor container."""
    tensors = {
        "features": table.features,
        "labels": table.labels.astype(np.float64),
        "is_test": (table.split == "test").astype(np.float64),
    }
    Path(path).write_bytes(tensors_bytes(tensors))
