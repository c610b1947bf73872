"""Natural training, saddle-point adversarial training, and evaluation metrics.

Adversarial training replaces every minibatch with adversarial examples
generated against the current network (the inner maximization), then takes
one descent step on the parameters — including the filter's log-sigmas when
the BFNet layer is trainable. Evaluation reports are plain dataclasses that
serialize to JSON/CSV and are exactly recomputable from persisted
per-sample records.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, run_attack
from .bilateral import FilterParams, bilateral_filter
from .data import Dataset
from .errors import ConfigError, NonFiniteError
from .networks import Network

__all__ = [
    "TrainConfig",
    "EvalReport",
    "SGD",
    "Adam",
    "make_optimizer",
    "train_natural",
    "train_adversarial",
    "accuracy",
    "evaluate_attack",
    "evaluate_recovery",
]


@dataclass
class TrainConfig:
    epochs: int = 2
    batch_size: int = 64
    optimizer: str = "adam"  # adam | sgd | nesterov
    lr: float = 1e-3
    momentum: float = 0.9
    adversary: str | None = None  # None | fgsm | pgd
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.3, steps=7))
    seed: int = 0
    max_batches_per_epoch: int | None = None
    log_every: int = 100

    def __post_init__(self):
        if self.adversary not in (None, "fgsm", "pgd"):
            raise ConfigError(f"adversary must be None, 'fgsm' or 'pgd', got {self.adversary!r}")


class SGD:
    """Plain or Nesterov-momentum SGD."""

    def __init__(self, lr=0.01, momentum=0.0, nesterov=False):
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self._vel = {}

    def step(self, grads: dict) -> None:
        for store, g in grads.items():
            g = np.asarray(g, dtype=np.float32)
            if self.momentum:
                v = self._vel.get(store)
                if v is None:
                    v = np.zeros_like(store.value, dtype=np.float32)
                v = self.momentum * v - self.lr * g
                self._vel[store] = v
                update = self.momentum * v - self.lr * g if self.nesterov else v
            else:
                update = -self.lr * g
            store.value = (store.value + update).astype(np.float32)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m, self._v, self._t = {}, {}, 0

    def step(self, grads: dict) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for store, g in grads.items():
            g = np.asarray(g, dtype=np.float32)
            m = self._m.get(store, 0.0)
            v = self._v.get(store, 0.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self._m[store], self._v[store] = m, v
            mhat = m / (1 - b1**self._t)
            vhat = v / (1 - b2**self._t)
            store.value = (store.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(lr=cfg.lr)
    if cfg.optimizer == "sgd":
        return SGD(lr=cfg.lr)
    if cfg.optimizer == "nesterov":
        return SGD(lr=cfg.lr, momentum=cfg.momentum, nesterov=True)
    raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")


def _snapshot(net: Network):
    return [s.value.copy() for s in net.param_stores]


def _restore(net: Network, snap):
    for s, v in zip(net.param_stores, snap):
        s.value = v.copy()


def _adversarial_batch(net: Network, xb, yb, cfg: TrainConfig, rng):
    acfg = replace(cfg.attack, seed=int(rng.integers(2**31)))
    if cfg.adversary == "fgsm":
        res = run_attack("fgsm", net, xb, yb, acfg)
    else:
        res = run_attack("pgd", net, xb, yb, acfg)
    return np.stack([r.adversarial for r in res])


def _train(net: Network, data: Dataset, cfg: TrainConfig, adversarial: bool, targets=None):
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    history = {"loss": [], "epoch_loss": [], "aborted": False}
    n = len(data)
    targets = data.labels if targets is None else np.asarray(targets)
    good = _snapshot(net)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        nb = 0
        try:
            for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb = data.images[idx]
                if adversarial:
                    clean = xb
                    xb = _adversarial_batch(net, xb, data.labels[idx], cfg, rng)
                    if nb == 0:  # spot-check the adversary's constraint once per epoch
                        worst = float(np.abs(xb - clean).max())
                        if worst > cfg.attack.epsilon + 1e-6:
                            raise ConfigError(f"inner adversary violated its epsilon: {worst} > {cfg.attack.epsilon}")
                loss, grads = net.param_gradients(xb, targets[idx])
                if not math.isfinite(loss):
                    raise NonFiniteError(f"loss diverged at epoch {epoch}")
                opt.step(grads)
                losses.append(loss)
                nb += 1
                if cfg.max_batches_per_epoch and nb >= cfg.max_batches_per_epoch:
                    break
        except NonFiniteError:
            _restore(net, good)
            history["aborted"] = True
            return history
        history["loss"].extend(losses)
        history["epoch_loss"].append(float(np.mean(losses)))
        good = _snapshot(net)
    return history


def train_natural(net: Network, data: Dataset, cfg: TrainConfig, targets=None):
    """Minibatch training; aborts back to the last good state if the loss diverges.

    `targets` overrides the dataset's integer labels (e.g. multi-label float
    targets for a sigmoid-head network).
    """
    if cfg.adversary is not None:
        raise ConfigError("train_natural requires cfg.adversary = None")
    return _train(net, data, cfg, adversarial=False, targets=targets)


def train_adversarial(net: Network, data: Dataset, cfg: TrainConfig):
    """Saddle-point training: each minibatch is attacked in full before the descent step."""
    if cfg.adversary not in ("fgsm", "pgd"):
        raise ConfigError("train_adversarial requires cfg.adversary in {'fgsm','pgd'}")
    return _train(net, data, cfg, adversarial=True)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    kind: str
    sample_count: int
    clean_accuracy: float | None = None
    attack: str | None = None
    attack_config: dict | None = None
    accuracy_under_attack: float | None = None
    success_rate: float | None = None
    recovery_rate: float | None = None
    mean_l2: float | None = None
    median_l2: float | None = None
    mean_linf: float | None = None
    median_linf: float | None = None
    per_sample: list = field(default_factory=list)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.__dict__, indent=2)
        if path:
            Path(path).write_text(text)
        return text

    def to_csv(self, path) -> None:
        rows = self.per_sample or [{}]
        keys = sorted({k for r in rows for k in r})
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow(r)


def accuracy(net: Network, data: Dataset, batch: int = 256) -> float:
    return float((net.predict(data.images, batch) == data.labels).mean())


def _attack_config_dict(cfg: AttackConfig) -> dict:
    d = dict(cfg.__dict__)
    d["pixel_bounds"] = list(d["pixel_bounds"])
    return d


def evaluate_attack(net: Network, attack: str, data: Dataset, cfg: AttackConfig, batch: int = 128) -> EvalReport:
    """Run an attack over a dataset; aggregate success, accuracy, and distances.

    Success means the prediction moved away from the model's source
    prediction (or onto the target for targeted modes); accuracy under
    attack is measured against the true labels.
    """
    records = []
    correct = 0
    clean_correct = 0
    for start in range(0, len(data), batch):
        xb = data.images[start : start + batch]
        yb = data.labels[start : start + batch]
        res = run_attack(attack, net, xb, yb, cfg)
        res = res if isinstance(res, list) else [res]
        preds = np.array([r.final_prediction for r in res])
        correct += int((preds == yb).sum())
        clean_correct += int((np.array([r.source_prediction for r in res]) == yb).sum())
        for i, r in enumerate(res):
            records.append(
                {
                    "index": start + i,
                    "label": int(yb[i]),
                    "source_prediction": r.source_prediction,
                    "final_prediction": r.final_prediction,
                    "success": int(r.success),
                    "iterations": r.iterations_used,
                    "l2": r.l2_distance,
                    "linf": r.linf_distance,
                }
            )
    n = len(data)
    l2 = np.array([r["l2"] for r in records])
    linf = np.array([r["linf"] for r in records])
    succ = np.array([r["success"] for r in records])
    return EvalReport(
        kind="attack",
        sample_count=n,
        clean_accuracy=clean_correct / n,
        attack=attack,
        attack_config=_attack_config_dict(cfg),
        accuracy_under_attack=correct / n,
        success_rate=float(succ.mean()),
        mean_l2=float(l2.mean()),
        median_l2=float(np.median(l2)),
        mean_linf=float(linf.mean()),
        median_linf=float(np.median(linf)),
        per_sample=records,
    )


def evaluate_recovery(net: Network, clean_set: Dataset, adv_set: Dataset, filter_params: FilterParams, batch: int = 256) -> EvalReport:
    """Fraction of adversarial examples whose filtered version regains the
    model's prediction on the corresponding clean image (not necessarily the
    true label)."""
    if len(clean_set) != len(adv_set):
        raise ConfigError(f"misaligned sets: {len(clean_set)} clean vs {len(adv_set)} adversarial")
    if adv_set.alignment is not None and not np.array_equal(adv_set.alignment, np.arange(len(clean_set))):
        raise ConfigError("adversarial set alignment does not match the clean set order")
    records = []
    recovered = 0
    for start in range(0, len(clean_set), batch):
        cb = clean_set.images[start : start + batch]
        ab = adv_set.images[start : start + batch]
        ref = net.predict(cb)
        filt = bilateral_filter(ab, filter_params)
        got = net.predict(filt.astype(np.float32))
        recovered += int((got == ref).sum())
        for i in range(len(cb)):
            records.append({"index": start + i, "reference": int(ref[i]), "filtered_prediction": int(got[i]), "recovered": int(got[i] == ref[i])})
    n = len(clean_set)
    return EvalReport(
        kind="recovery",
        sample_count=n,
        attack=adv_set.provenance.get("attack"),
        recovery_rate=recovered / n,
        per_sample=records,
    )
