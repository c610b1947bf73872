"""Adaptive filtering defense: enumerate candidate filter parameters, label
which candidates recover each adversarial example, train the predictor, and
apply the predicted filter at test time.

Labels are multi-label: candidate j is positive for an image when filtering
with grid[j] restores the source model's prediction on the clean original.
At most 10 positives are kept per image (first-come in grid order), and
samples with no recovering candidate are dropped from training (counted).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bilateral import FilterParams, bilateral_filter, sobel_gradients
from .data import Dataset
from .errors import ConfigError
from .networks import Network
from .training import TrainConfig, train_natural

__all__ = [
    "default_grid",
    "ParamGrid",
    "adaptive_features",
    "label_recovery",
    "build_adaptive_training_set",
    "train_adaptive",
    "defend",
]

MAX_POSITIVE_LABELS = 10

# luminance weights for RGB inputs (ITU-R 601)
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class ParamGrid:
    """Ordered, distinct filter-parameter candidates; order is the label space."""

    candidates: tuple

    def __post_init__(self):
        cands = tuple(c if isinstance(c, FilterParams) else FilterParams(*c) for c in self.candidates)
        if len(set(c.as_tuple() for c in cands)) != len(cands):
            raise ConfigError("grid candidates must be distinct")
        if not cands:
            raise ConfigError("grid must not be empty")
        object.__setattr__(self, "candidates", cands)

    def __len__(self):
        return len(self.candidates)

    def __getitem__(self, i) -> FilterParams:
        return self.candidates[i]

    def as_lists(self):
        return [list(c.as_tuple()) for c in self.candidates]


def default_grid() -> ParamGrid:
    """K in {1,3,5,7} x sigma_s in {0.5,1,3} x sigma_r in {0.5,1}: 24 candidates."""
    return ParamGrid(
        tuple(
            FilterParams(k, ss, sr)
            for k in (1, 3, 5, 7)
            for ss in (0.5, 1.0, 3.0)
            for sr in (0.5, 1.0)
        )
    )


def luminance(images: np.ndarray) -> np.ndarray:
    """(...,C) -> (...,1) luma; grayscale passes through."""
    x = np.asarray(images)
    if x.shape[-1] == 1:
        return x
    if x.shape[-1] == 3:
        return (x * _LUMA).sum(axis=-1, keepdims=True).astype(x.dtype)
    raise ConfigError(f"expected 1 or 3 channels, got {x.shape[-1]}")


def adaptive_features(images: np.ndarray) -> np.ndarray:
    """Predictor input: the image with its luminance Sobel x/y maps appended (C+2 deep)."""
    x = np.asarray(images, dtype=np.float32)
    grad = sobel_gradients(luminance(x))
    return np.concatenate([x, grad.astype(np.float32)], axis=-1)


def label_recovery(net: Network, clean, adversarial, grid: ParamGrid, batch: int = 512) -> np.ndarray:
    """Per-candidate recovery flags, (N, len(grid)) uint8, truncated to 10 positives.

    Candidate j is positive iff net(filter(adversarial, grid[j])) equals the
    model's prediction on the clean original. Deterministic and idempotent.
    """
    clean = np.asarray(clean, dtype=np.float32)
    adv = np.asarray(adversarial, dtype=np.float32)
    single = clean.ndim == 3
    if single:
        clean, adv = clean[None], adv[None]
    n = len(clean)
    flags = np.zeros((n, len(grid)), dtype=np.uint8)
    for start in range(0, n, batch):
        cb = clean[start : start + batch]
        ab = adv[start : start + batch]
        ref = net.predict(cb)
        for j, cand in enumerate(grid.candidates):
            filt = bilateral_filter(ab, cand).astype(np.float32)
            flags[start : start + len(cb), j] = (net.predict(filt) == ref).astype(np.uint8)
    # keep at most the first 10 positives per image, in grid order
    overflow = flags.cumsum(axis=1) > MAX_POSITIVE_LABELS
    flags[overflow] = 0
    return flags[0] if single else flags


def train_adaptive(net: Network, images, recovery_labels, cfg: TrainConfig | None = None):
    """Fit the predictor with elementwise binary cross-entropy (SGD + Nesterov).

    Images with an all-negative label row are rejected at ingestion, counted
    in the returned history as `dropped`.
    """
    if net.head != "sigmoid":
        raise ConfigError("train_adaptive expects a sigmoid-head predictor network")
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(recovery_labels, dtype=np.float32)
    if labels.ndim != 2 or len(labels) != len(images):
        raise ConfigError(f"labels must be (N,{net.n_classes}), got {labels.shape}")
    keep = labels.sum(axis=1) > 0
    dropped = int((~keep).sum())
    if not keep.any():
        raise ConfigError("every sample has an all-negative recovery label")
    images, labels = images[keep], labels[keep]
    cfg = cfg or TrainConfig(epochs=25, batch_size=32, optimizer="nesterov", lr=0.01)
    feats = adaptive_features(images)
    data = Dataset(feats, np.zeros(len(feats), dtype=np.int64))
    history = train_natural(net, data, cfg, targets=labels)
    history["dropped"] = dropped
    return history


def build_adaptive_training_set(net: Network, clean: Dataset, adversarial_sets, grid: ParamGrid, include_clean: bool = True):
    """Assemble the predictor's training set from one or more adversarial sets.

    Each adversarial set must align index-wise with `clean`. With
    `include_clean`, the clean images are appended with labels marking the
    candidates that preserve the clean prediction, so the predictor does not
    learn to over-filter unperturbed inputs. Returns (images, flags, stats).
    """
    images, flags, per_source = [], [], {}
    for ds in adversarial_sets:
        if len(ds) != len(clean):
            raise ConfigError(f"adversarial set ({len(ds)}) misaligned with clean set ({len(clean)})")
        f = label_recovery(net, clean.images, ds.images, grid)
        images.append(ds.images)
        flags.append(f)
        per_source[ds.provenance.get("attack", "unknown")] = float(f.sum(axis=1).mean())
    if include_clean:
        f = label_recovery(net, clean.images, clean.images, grid)
        images.append(clean.images)
        flags.append(f)
        per_source["clean"] = float(f.sum(axis=1).mean())
    images = np.concatenate(images)
    flags = np.concatenate(flags)
    stats = {
        "positives_per_image": per_source,
        "all_negative": int((flags.sum(axis=1) == 0).sum()),
        "include_clean": include_clean,
        "grid": grid.as_lists(),
    }
    return images, flags, stats


def defend(predictor: Network, net: Network, image, grid: ParamGrid):
    """Filter with the argmax candidate; ties break to the lowest grid index.

    Returns (filtered image(s), chosen FilterParams or list of them). The
    output equals bilateral_filter(image, chosen) exactly.
    """
    x = np.asarray(image, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    scores = predictor.logits(adaptive_features(x))
    if scores.shape[1] != len(grid):
        raise ConfigError(f"predictor emits {scores.shape[1]} candidates, grid has {len(grid)}")
    choice = scores.argmax(axis=1)
    out = np.empty_like(x)
    for j in np.unique(choice):
        rows = np.flatnonzero(choice == j)
        out[rows] = bilateral_filter(x[rows], grid[int(j)]).astype(np.float32)
    chosen = [grid[int(j)] for j in choice]
    return (out[0], chosen[0]) if single else (out, chosen)
