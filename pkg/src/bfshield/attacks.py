"""White-box attacks: FGSM, PGD, MI-FGSM, box-constrained L-BFGS, CW-L2, DeepFool.

Every attack takes any Network — including a BFNet, in which case gradients
flow through the filter layer (counter-attack) — and reports results against
the model's prediction on the unmodified source image. Bounded attacks never
leave the epsilon ball or the pixel box; unbounded attacks are clamped to
the pixel box only. All attacks are deterministic under a fixed config seed.

Functions accept a single (H,W,C) image or an (N,H,W,C) batch; batched calls
share graph evaluations across the batch and return a list of results.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError
from .networks import Network

__all__ = ["AttackConfig", "AdversarialResult", "fgsm", "pgd", "mi_fgsm", "lbfgs_attack", "cw_l2", "deepfool", "run_attack", "ATTACKS"]


@dataclass(frozen=True)
class AttackConfig:
    """Shared attack hyperparameters (protocol defaults: eps 0.3, PGD-40, mu 1.0/10 iters)."""

    epsilon: float = 0.3
    steps: int = 40
    step_size: float | None = None  # None: 2.5*eps/steps (pgd), eps/steps (mi-fgsm)
    momentum_decay: float = 1.0
    tradeoff_c: float = 1e-2
    confidence_kappa: float = 0.0
    target_label: int | None = None
    pixel_bounds: tuple = (-1.0, 1.0)
    random_start: bool = True
    raw_momentum_step: bool = False
    loss: str = "ce"  # "ce" or "cw" (margin loss inside pgd)
    seed: int = 0
    # CW
    binary_search_steps: int = 5
    cw_steps: int = 200
    cw_lr: float = 0.01
    untargeted_targets: int | None = None  # sample k non-source classes in untargeted wrappers
    # L-BFGS
    lbfgs_c_low: float = 1e-2
    lbfgs_c_high: float = 1e2
    lbfgs_bisection_steps: int = 10
    lbfgs_max_iter: int = 200
    lbfgs_memory: int = 10
    # DeepFool
    overshoot: float = 0.02
    max_iter: int = 50
    top_k: int = 10

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not self.pixel_bounds[0] < self.pixel_bounds[1]:
            raise ConfigError(f"pixel_bounds must be ordered, got {self.pixel_bounds}")
        if self.loss not in ("ce", "cw"):
            raise ConfigError(f"unknown attack loss {self.loss!r}")


@dataclass
class AdversarialResult:
    adversarial: np.ndarray
    success: bool
    iterations_used: int
    linf_distance: float
    l2_distance: float
    source_prediction: int
    final_prediction: int


def _as_batch(image, labels):
    x = np.asarray(image, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    if labels is None:
        lab = None
    else:
        lab = np.atleast_1d(np.asarray(labels)).astype(np.int64)
        if len(lab) != len(x):
            raise ConfigError(f"{len(lab)} labels for {len(x)} images")
    return x, lab, single


def _finish(source, adv, net, src_pred, iterations, target=None, single=False, bounds=(-1.0, 1.0)):
    adv = np.clip(adv, bounds[0], bounds[1]).astype(np.float32)
    final_pred = net.predict(adv)
    delta = (adv.astype(np.float64) - source.astype(np.float64)).reshape(len(adv), -1)
    linf = np.abs(delta).max(axis=1)
    l2 = np.sqrt((delta**2).sum(axis=1))
    out = []
    its = np.broadcast_to(np.asarray(iterations), (len(adv),))
    for i in range(len(adv)):
        ok = (final_pred[i] == target) if target is not None else (final_pred[i] != src_pred[i])
        out.append(
            AdversarialResult(
                adversarial=adv[i],
                success=bool(ok),
                iterations_used=int(its[i]),
                linf_distance=float(linf[i]),
                l2_distance=float(l2[i]),
                source_prediction=int(src_pred[i]),
                final_prediction=int(final_pred[i]),
            )
        )
    return out[0] if single else out


def _coeff(n_classes, rows, plus=None, minus=None):
    c = np.zeros((len(rows), n_classes), dtype=np.float64)
    if plus is not None:
        c[np.arange(len(rows)), plus] = 1.0
    if minus is not None:
        c[np.arange(len(rows)), minus] -= 1.0
    return c


def _margin_gradient(net, x, labels):
    """Input gradient of sum_i (max_{k != y} Z_k - Z_y), the CW margin ascent direction."""
    z = net.logits(x, batch=len(x))
    masked = z.copy()
    masked[np.arange(len(x)), labels] = -np.inf
    best_other = masked.argmax(axis=1)
    coeff = _coeff(z.shape[1], np.arange(len(x)), plus=best_other, minus=labels)
    _, grad = net.logit_combination_gradient(x, coeff)
    return grad


def _ascent_gradient(net, x, labels, cfg):
    if cfg.loss == "cw":
        return _margin_gradient(net, x, labels)
    return net.input_gradient(x, labels)[1]


# ---------------------------------------------------------------------------
# Gradient-sign family
# ---------------------------------------------------------------------------


def fgsm(net: Network, image, label, cfg: AttackConfig) -> AdversarialResult | list:
    """One-step sign attack: clamp(x + eps * sign(grad_x loss))."""
    x, labels, single = _as_batch(image, label)
    src_pred = net.predict(x)
    lo, hi = cfg.pixel_bounds
    grad = _ascent_gradient(net, x, labels, cfg)
    adv = np.clip(x + np.float32(cfg.epsilon) * np.sign(grad), lo, hi)
    return _finish(x, adv, net, src_pred, 1, single=single, bounds=cfg.pixel_bounds)


def pgd(net: Network, image, label, cfg: AttackConfig) -> AdversarialResult | list:
    """Iterated projected ascent inside the L-inf ball, with seeded random start."""
    x0, labels, single = _as_batch(image, label)
    src_pred = net.predict(x0)
    lo, hi = cfg.pixel_bounds
    eps = np.float32(cfg.epsilon)
    alpha = np.float32(cfg.step_size if cfg.step_size is not None else 2.5 * cfg.epsilon / cfg.steps)
    x = x0
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(cfg.seed)
        x = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, x0.shape).astype(np.float32), lo, hi)
    for _ in range(cfg.steps):
        grad = _ascent_gradient(net, x, labels, cfg)
        x = x + alpha * np.sign(grad)
        x = np.clip(x, x0 - eps, x0 + eps)
        x = np.clip(x, lo, hi)
    return _finish(x0, x, net, src_pred, cfg.steps, single=single, bounds=cfg.pixel_bounds)


def momentum_accumulate(g_prev: np.ndarray, grad: np.ndarray, mu) -> np.ndarray:
    """One momentum update g <- mu*g + grad/||grad||_1 (L1 norm per sample).

    A zero gradient is degenerate: the normalized term vanishes and the
    momentum term alone carries the direction.
    """
    l1 = np.abs(grad).reshape(len(grad), -1).sum(axis=1).reshape((-1,) + (1,) * (grad.ndim - 1))
    normed = np.divide(grad, l1, out=np.zeros_like(grad), where=l1 > 0)
    return mu * g_prev + normed


def mi_fgsm(net: Network, image, label, cfg: AttackConfig) -> AdversarialResult | list:
    """Momentum iterative method: g <- mu*g + grad/||grad||_1, step by sign(g)."""
    x0, labels, single = _as_batch(image, label)
    src_pred = net.predict(x0)
    lo, hi = cfg.pixel_bounds
    eps = np.float32(cfg.epsilon)
    alpha = np.float32(cfg.step_size if cfg.step_size is not None else cfg.epsilon / cfg.steps)
    mu = np.float32(cfg.momentum_decay)
    x = x0
    g = np.zeros_like(x0)
    for _ in range(cfg.steps):
        grad = _ascent_gradient(net, x, labels, cfg)
        g = momentum_accumulate(g, grad, mu)
        step = g if cfg.raw_momentum_step else np.sign(g)
        x = x + alpha * step
        x = np.clip(x, x0 - eps, x0 + eps)
        x = np.clip(x, lo, hi)
    return _finish(x0, x, net, src_pred, cfg.steps, single=single, bounds=cfg.pixel_bounds)


# ---------------------------------------------------------------------------
# Box-constrained L-BFGS (minimal-distortion targeted attack)
# ---------------------------------------------------------------------------


def _lbfgs_single(net, x0, target, cfg):
    shape = x0.shape
    flat0 = x0.reshape(-1).astype(np.float64)
    bounds = [(cfg.pixel_bounds[0], cfg.pixel_bounds[1])] * flat0.size
    onehot = np.zeros((1, net.n_classes))
    onehot[0, target] = 1.0

    def objective(flat, c):
        x = flat.reshape(1, *shape).astype(np.float32)
        g = net.graph(1)
        from . import autodiff as ad

        ctx = ad.evaluate(g["loss"], {"x": x, "y": onehot})
        ce = float(ctx.value(g["loss"]))
        gx = ad.backward(g["loss"], ctx, [g["x"]])[g["x"]].reshape(-1).astype(np.float64)
        delta = flat - flat0
        return c * float(delta @ delta) + ce, 2.0 * c * delta + gx

    c_lo, c_hi = cfg.lbfgs_c_low, cfg.lbfgs_c_high
    best = None  # (l2, adv)
    fallback = (np.inf, x0)
    total_iters = 0
    for _ in range(cfg.lbfgs_bisection_steps):
        c = float(np.sqrt(c_lo * c_hi))
        res = minimize(
            objective,
            flat0,
            args=(c,),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": cfg.lbfgs_max_iter, "maxcor": cfg.lbfgs_memory},
        )
        total_iters += int(res.nit)
        adv = res.x.reshape(shape).astype(np.float32)
        pred = int(net.predict(adv[None])[0])
        ce = float(net.loss(adv[None], np.array([target])))
        if ce < fallback[0]:
            fallback = (ce, adv)
        if pred == target:
            l2 = float(np.linalg.norm(res.x - flat0))
            if best is None or l2 < best[0]:
                best = (l2, adv)
            c_lo = c  # success: push the distortion penalty up
        else:
            c_hi = c
    adv = best[1] if best else fallback[1]
    return adv, total_iters


def lbfgs_attack(net: Network, image, target, cfg: AttackConfig) -> AdversarialResult | list:
    """Minimize c*||delta||_2^2 + loss(x+delta, target) with box constraints.

    Bisects c over [c_low, c_high] (success raises c, failure lowers it) and
    returns the minimal-distortion success found. With target=None runs the
    untargeted wrapper: minimum distortion over all non-source classes.
    """
    x, _, single = _as_batch(image, None)
    src_pred = net.predict(x)
    outs = []
    for i in range(len(x)):
        if target is None:
            best = None
            iters = 0
            for t in range(net.n_classes):
                if t == src_pred[i]:
                    continue
                adv_t, it = _lbfgs_single(net, x[i], t, cfg)
                iters += it
                r = _finish(x[i : i + 1], adv_t[None], net, src_pred[i : i + 1], iters, target=t, bounds=cfg.pixel_bounds)[0]
                if r.success and (best is None or r.l2_distance < best.l2_distance):
                    best = r
            outs.append(best if best else _finish(x[i : i + 1], x[i : i + 1].copy(), net, src_pred[i : i + 1], iters, bounds=cfg.pixel_bounds)[0])
        else:
            # an already-target-classified input minimizes the objective at
            # delta ~ 0 and comes back essentially unchanged
            t = int(target if np.isscalar(target) else np.atleast_1d(target)[i])
            adv_t, iters = _lbfgs_single(net, x[i], t, cfg)
            outs.append(_finish(x[i : i + 1], adv_t[None], net, src_pred[i : i + 1], iters, target=t, bounds=cfg.pixel_bounds)[0])
    return outs[0] if single else outs


# ---------------------------------------------------------------------------
# Carlini & Wagner L2
# ---------------------------------------------------------------------------


def _atanh(x):
    return 0.5 * np.log((1.0 + x) / (1.0 - x))


def cw_l2(net: Network, image, target, cfg: AttackConfig) -> AdversarialResult | list:
    """Tanh-reparameterized L2 attack with binary search over the trade-off c.

    The pixel box maps onto tanh space, so iterates are strictly inside the
    bounds by construction. target=None runs the untargeted wrapper
    (min-distortion over all non-source classes).
    """
    x0, _, single = _as_batch(image, None)
    src_pred = net.predict(x0)
    if target is None:
        per_target = []
        targets = range(net.n_classes)
        chosen_rows = None
        if cfg.untargeted_targets is not None and cfg.untargeted_targets < net.n_classes - 1:
            rng = np.random.default_rng(cfg.seed)
            chosen_rows = np.stack([
                rng.choice([t for t in range(net.n_classes) if t != sp], size=cfg.untargeted_targets, replace=False)
                for sp in src_pred
            ])
        for t in targets:
            rows = np.flatnonzero((src_pred != t) if chosen_rows is None else np.any(chosen_rows == t, axis=1))
            if len(rows) == 0:
                continue
            sub = cw_l2(net, x0[rows], t, replace(cfg))
            per_target.append((t, rows, sub if isinstance(sub, list) else [sub]))
        best = [None] * len(x0)
        iters = np.zeros(len(x0), dtype=int)
        for t, rows, res in per_target:
            for r, row in zip(res, rows):
                iters[row] += r.iterations_used
                if r.success and (best[row] is None or r.l2_distance < best[row].l2_distance):
                    best[row] = r
        outs = []
        for i in range(len(x0)):
            if best[i] is None:
                outs.append(_finish(x0[i : i + 1], x0[i : i + 1].copy(), net, src_pred[i : i + 1], int(iters[i]), bounds=cfg.pixel_bounds)[0])
            else:
                r = best[i]
                r.iterations_used = int(iters[i])
                outs.append(r)
        return outs[0] if single else outs

    t = int(target)
    n = len(x0)
    lo, hi = cfg.pixel_bounds
    mid, half = (hi + lo) / 2.0, (hi - lo) / 2.0
    # map the pixel box onto tanh space: x = mid + half*tanh(w). The clip
    # controls how deep into tanh saturation box-face pixels start; 1e-3
    # keeps them reachable by the inner optimizer at a ~0.03 L2 pull-in cost.
    u0 = np.clip((x0.astype(np.float64) - mid) / half, -1 + 1e-3, 1 - 1e-3)
    w0 = _atanh(u0)

    c = np.full(n, cfg.tradeoff_c)
    c_lo = np.zeros(n)
    c_hi = np.full(n, np.inf)
    best_adv = x0.copy()
    best_l2 = np.full(n, np.inf)
    ever = np.zeros(n, dtype=bool)
    total_steps = 0
    kappa = cfg.confidence_kappa

    for _ in range(cfg.binary_search_steps):
        w = w0.copy()
        round_success = np.zeros(n, dtype=bool)
        # Adam on w: the tanh map saturates at the pixel-box faces (most MNIST
        # pixels), so a fixed-step update cannot move them; the per-coordinate
        # scaling is what makes the attack effective there.
        m1 = np.zeros_like(w)
        m2 = np.zeros_like(w)
        for step_i in range(cfg.cw_steps):
            xw = (mid + half * np.tanh(w)).astype(np.float32)
            z, grad_margin = _cw_margin_grad(net, xw, t)
            margin = z[np.arange(n), _best_other(z, t)] - z[:, t]
            active = margin > -kappa
            delta = xw.astype(np.float64) - x0.astype(np.float64)
            gx = 2.0 * delta + (c[:, None, None, None] * active[:, None, None, None]) * grad_margin
            gw = gx * half * (1.0 - np.tanh(w) ** 2)
            m1 = 0.9 * m1 + 0.1 * gw
            m2 = 0.999 * m2 + 0.001 * gw * gw
            mhat = m1 / (1 - 0.9 ** (step_i + 1))
            vhat = m2 / (1 - 0.999 ** (step_i + 1))
            w = w - cfg.cw_lr * mhat / (np.sqrt(vhat) + 1e-8)
            total_steps += 1
            satisfied = (margin <= -kappa) if kappa > 0 else (z.argmax(axis=1) == t)
            round_success |= satisfied
            l2 = np.sqrt((delta.reshape(n, -1) ** 2).sum(axis=1))
            hit = satisfied & (l2 < best_l2)
            best_l2[hit] = l2[hit]
            best_adv[hit] = xw[hit]
            ever |= hit
        # per-sample binary search on c: success lowers it, failure raises it
        c_hi = np.where(round_success, np.minimum(c_hi, c), c_hi)
        c_lo = np.where(round_success, c_lo, np.maximum(c_lo, c))
        c = np.where(np.isinf(c_hi), c * 10.0, (c_lo + c_hi) / 2.0)

    return _finish(x0, best_adv, net, src_pred, total_steps, target=t, single=single, bounds=cfg.pixel_bounds)


def _best_other(z, t):
    masked = z.copy()
    masked[:, t] = -np.inf
    return masked.argmax(axis=1)


def _cw_margin_grad(net, x, t):
    z = net.logits(x, batch=len(x))
    other = _best_other(z, t)
    coeff = _coeff(z.shape[1], np.arange(len(x)), plus=other)
    coeff[:, t] -= 1.0
    _, grad = net.logit_combination_gradient(x, coeff)
    return z, grad


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------


def deepfool(net: Network, image, cfg: AttackConfig) -> AdversarialResult | list:
    """Iterative minimal-L2 push past the nearest linearized decision boundary.

    Runs against the model's own prediction on the source image (prediction
    change, not label change), considering the top-k competing classes, with
    multiplicative overshoot.
    """
    x0, _, single = _as_batch(image, None)
    n = len(x0)
    src_pred = net.predict(x0)
    lo, hi = cfg.pixel_bounds
    k = min(cfg.top_k, net.n_classes - 1)

    z0 = net.logits(x0, batch=n)
    order = np.argsort(-z0, axis=1)
    candidates = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        others = [c for c in order[i] if c != src_pred[i]]
        candidates[i] = others[:k]

    r_tot = np.zeros_like(x0, dtype=np.float64)
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    x = x0.copy()
    for _ in range(cfg.max_iter):
        if not active.any():
            break
        rows = np.flatnonzero(active)
        xa = x[rows]
        # gradient of (Z_cand - Z_src) per candidate column, batched over rows
        best_ratio = np.full(len(rows), np.inf)
        best_dir = np.zeros((len(rows),) + x0.shape[1:], dtype=np.float64)
        best_fk = np.zeros(len(rows))
        for col in range(k):
            cand = candidates[rows, col]
            coeff = _coeff(net.n_classes, rows, plus=cand, minus=src_pred[rows])
            z, grad = net.logit_combination_gradient(xa, coeff)
            fk = z[np.arange(len(rows)), cand] - z[np.arange(len(rows)), src_pred[rows]]
            wnorm = np.sqrt((grad.reshape(len(rows), -1) ** 2).sum(axis=1)) + 1e-12
            ratio = np.abs(fk) / wnorm
            better = ratio < best_ratio
            best_ratio[better] = ratio[better]
            best_dir[better] = grad[better]
            best_fk[better] = fk[better]
        wsq = (best_dir.reshape(len(rows), -1) ** 2).sum(axis=1) + 1e-12
        step = ((np.abs(best_fk) + 1e-4) / wsq)[:, None, None, None] * best_dir
        r_tot[rows] += step
        iters[rows] += 1
        x = np.clip(x0 + (1.0 + cfg.overshoot) * r_tot, lo, hi).astype(np.float32)
        pred = net.predict(x[rows])
        done = pred != src_pred[rows]
        active[rows[done]] = False
    return _finish(x0, x, net, src_pred, iters, single=single, bounds=cfg.pixel_bounds)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

ATTACKS = ("fgsm", "pgd", "mifgsm", "lbfgs", "cw", "deepfool", "pgd-cw")


def run_attack(name: str, net: Network, image, label, cfg: AttackConfig):
    """Uniform entry point; label is the loss label for label-driven attacks."""
    if name == "fgsm":
        return fgsm(net, image, label, cfg)
    if name == "pgd":
        return pgd(net, image, label, cfg)
    if name == "pgd-cw":
        return pgd(net, image, label, replace(cfg, loss="cw"))
    if name == "mifgsm":
        return mi_fgsm(net, image, label, cfg)
    if name == "lbfgs":
        return lbfgs_attack(net, image, cfg.target_label, cfg)
    if name == "cw":
        return cw_l2(net, image, cfg.target_label, cfg)
    if name == "deepfool":
        return deepfool(net, image, cfg)
    raise ConfigError(f"unknown attack {name!r}; expected one of {ATTACKS}")
