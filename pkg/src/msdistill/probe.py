"""Linear probing of frozen student features."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .model import MS, OPTICAL, StudentModel, load_model
from .raster import DatasetManifest
from .views import CropParams, apply_geometry

BRANCH_ALIASES = {"ms": MS, "multispectral": MS, "opt": OPTICAL, "optical": OPTICAL}


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    branch: str


@dataclass
class ProbeReport:
    accuracy: float
    train_accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted class
    n_train: int
    n_test: int

    def to_text(self) -> str:
        lines = [
            f"test_accuracy {self.accuracy:.6f}",
            f"train_accuracy {self.train_accuracy:.6f}",
            f"n_train {self.n_train}",
            f"n_test {self.n_test}",
            "confusion (rows true, columns predicted)",
        ]
        lines += [" ".join(str(int(v)) for v in row) for row in self.confusion]
        return "\n".join(lines) + "\n"


def _resolve_branch(branch: str) -> str:
    try:
        return BRANCH_ALIASES[branch]
    except KeyError:
        raise ValidationError(f"unknown branch {branch!r}; use 'ms' or 'optical'") from None


def prepare_inputs(data: DatasetManifest, branch: str, image_size: int) -> np.ndarray:
    """Standardized, center-cropped and resized inputs for a branch (no augmentation)."""
    x = data.stack(normalized=True)
    if branch == OPTICAL:
        x = x[:, :3]
    _, _, h, w = x.shape
    if (h, w) != (image_size, image_size):
        s = min(h, w)
        p = CropParams((h - s) // 2, (w - s) // 2, s, s, False, False, image_size)
        x = np.stack([apply_geometry(im, p) for im in x])
    return np.ascontiguousarray(x, dtype=np.float32)


def extract_features(model, data: DatasetManifest, branch: str = MS, use_cls: bool = False, batch: int = 64) -> FeatureMatrix:
    """Mean-pooled final patch tokens (or the class token) of the frozen student."""
    if isinstance(model, (str, Path)):
        model, _, _ = load_model(model)
    branch = _resolve_branch(branch)
    enc = model.encoder
    expected = enc.ms_channels if branch == MS else enc.optical_channels
    have = data.channels if branch == MS else min(data.channels, 3)
    if have != expected:
        raise ValidationError(f"{branch} branch expects {expected} channels, data provides {have}")
    x = prepare_inputs(data, branch, enc.image_size)
    rows = []
    with ad.no_record():
        for lo in range(0, len(x), batch):
            out = model.forward(x[lo:lo + batch], branch)
            f = out.cls_F.data if use_cls else out.p_F.data.mean(axis=1)
            rows.append(f.astype(np.float64))
    return FeatureMatrix(np.concatenate(rows), data.labels.copy(), branch)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(features, labels=None, train_idx=None, test_idx=None, epochs: int = 200, lr: float = 0.1, n_classes: int | None = None) -> ProbeReport:
    """Softmax regression by full-batch gradient descent from zero weights.

    Features are centered with the training mean and divided by one global
    scale (root mean square entry), which keeps the whole procedure
    equivariant under orthogonal rotations of the feature space.
    """
    if isinstance(features, FeatureMatrix):
        labels = features.labels if labels is None else labels
        features = features.features
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    tr = np.asarray(train_idx, dtype=np.int64)
    te = np.asarray(test_idx, dtype=np.int64)
    if np.intersect1d(tr, te).size:
        raise ValidationError("train and test splits overlap")
    if len(tr) == 0 or len(te) == 0:
        raise ValidationError("train and test splits must be non-empty")
    if np.unique(y[tr]).size < 2:
        raise ValidationError("the training split contains a single class")
    k = int(n_classes or (y.max() + 1))
    mu = x[tr].mean(axis=0)
    xc = x - mu
    scale = np.sqrt(np.mean(xc[tr] ** 2))
    if scale > 0:
        xc = xc / scale
    xt, yt = xc[tr], y[tr]
    onehot = np.eye(k)[yt]
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    for _ in range(epochs):
        p = _softmax(xt @ w + b)
        g = (p - onehot) / len(tr)
        w -= lr * (xt.T @ g)
        b -= lr * g.sum(axis=0)
    pred_tr = np.argmax(xt @ w + b, axis=1)
    pred = np.argmax(xc[te] @ w + b, axis=1)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y[te], pred), 1)
    return ProbeReport(
        accuracy=float(np.mean(pred == y[te])),
        train_accuracy=float(np.mean(pred_tr == yt)),
        confusion=conf,
        n_train=len(tr),
        n_test=len(te),
    )


def stratified_split(labels, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class keeps at least one item on each side when possible."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        k = int(round(train_fraction * len(idx)))
        k = min(max(k, 1), max(len(idx) - 1, 1))
        tr.extend(idx[:k])
        te.extend(idx[k:])
    return np.sort(np.asarray(tr)), np.sort(np.asarray(te))


def probe_model(model: StudentModel, data: DatasetManifest, branch: str = MS, train_fraction: float = 0.5, seed: int = 0,
                use_cls: bool = False, epochs: int = 200, lr: float = 0.1) -> ProbeReport:
    fm = extract_features(model, data, branch, use_cls)
    tr, te = stratified_split(fm.labels, train_fraction, seed)
    return linear_probe(fm, None, tr, te, epochs, lr, n_classes=data.n_classes)
