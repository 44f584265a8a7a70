"""Training objectives and the optimizer step.

Three loss groups drive training: plain supervised risk on one crop
(MSE on confidence + L1 on the soft binary map), a consistency term tying
a second crop's prediction to the momentum twin, and the proxy-domain
term (soft Dice + L1) tying the main prediction to the independent
threshold generator's output. The proxy term deliberately carries more
gradient than the plain L1 of the supervised part.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from . import locator as loc
from .locator import LocatorOutput, LocatorParams
from .scenegen import Scene, random_crop
from .tensorcore import Param, Tensor

log = logging.getLogger(__name__)

EPS_DIV = 1e-8


@dataclass
class LossBreakdown:
    erm_l2: float
    erm_l1: float
    consistency: float
    dpd_dice: float
    dpd_l1: float
    total: float
    weights: tuple[float, float, float]

    @staticmethod
    def combine(erm_l2, erm_l1, consistency, dpd_dice, dpd_l1, weights) -> "LossBreakdown":
        w_erm, w_cons, w_dpd = weights
        total = w_erm * (erm_l2 + erm_l1) + w_cons * consistency + w_dpd * (dpd_dice + dpd_l1)
        return LossBreakdown(erm_l2, erm_l1, consistency, dpd_dice, dpd_l1, total, tuple(weights))


# ---------------------------------------------------------------------------
# loss values with analytic gradients


def _mse_with_grad(a: np.ndarray, b: np.ndarray):
    diff = a - b
    n = diff.size
    return float(np.mean(diff * diff)), 2.0 * diff / n


def _mae_with_grad(a: np.ndarray, b: np.ndarray):
    diff = a - b
    n = diff.size
    return float(np.mean(np.abs(diff))), np.sign(diff) / n


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {a.shape} vs {b.shape}")


def erm_grads(out: LocatorOutput, gt: Tensor):
    """Supervised term: (l2, l1, d_confidence, d_soft)."""
    _check_same_shape(out.confidence, gt, "erm_loss")
    l2, d_conf = _mse_with_grad(out.confidence.data, gt.data)
    l1, d_soft = _mae_with_grad(out.binary_soft.data, gt.data)
    return l2, l1, d_conf, d_soft


def erm_loss(out: LocatorOutput, gt: Tensor):
    l2, l1, _, _ = erm_grads(out, gt)
    return l2, l1


def consistency_grads(main_out: LocatorOutput, momentum_out: LocatorOutput):
    """Consistency term and its gradients w.r.t. the main branch only.

    The momentum branch is a detached target: its parameters follow the
    exponential-average update, never this gradient.
    """
    _check_same_shape(main_out.confidence, momentum_out.confidence, "consistency_loss")
    l2, d_conf = _mse_with_grad(main_out.confidence.data, momentum_out.confidence.data)
    l1, d_soft = _mae_with_grad(main_out.binary_soft.data, momentum_out.binary_soft.data)
    return l2 + l1, d_conf, d_soft


def consistency_loss(main_out: LocatorOutput, momentum_out: LocatorOutput) -> float:
    return consistency_grads(main_out, momentum_out)[0]


def dpd_grads(a: Tensor, b: Tensor):
    """Soft Dice + L1 between two soft binary maps, with grads for both sides.

    Dice uses squared-norm denominators so the loss vanishes exactly when
    the maps agree pointwise (on soft maps the linear-denominator form never
    reaches zero); an all-zero pair is defined as dice 0 via the guard.
    """
    _check_same_shape(a, b, "dpd_loss")
    av, bv = a.data, b.data
    s_ab = float(np.sum(av * bv))
    denom_raw = float(np.sum(av * av) + np.sum(bv * bv))
    if denom_raw == 0.0:
        dice = 0.0
        d_dice_a = np.zeros_like(av)
        d_dice_b = np.zeros_like(bv)
    else:
        d = denom_raw + EPS_DIV
        dice = 1.0 - 2.0 * s_ab / d
        d_dice_a = -2.0 * bv / d + 4.0 * av * s_ab / (d * d)
        d_dice_b = -2.0 * av / d + 4.0 * bv * s_ab / (d * d)
    l1, d_l1_a = _mae_with_grad(av, bv)
    return dice, l1, d_dice_a, d_dice_b, d_l1_a, -d_l1_a


def dpd_loss(main_binary_soft: Tensor, dpd_binary_soft: Tensor):
    dice, l1, *_ = dpd_grads(main_binary_soft, dpd_binary_soft)
    return dice, l1


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard bias-corrected adaptive step with a non-finite-gradient guard."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self.m = [np.zeros_like(p.value.data) for p in self.params]
        self.v = [np.zeros_like(p.value.data) for p in self.params]

    def step(self) -> bool:
        """Apply one update from accumulated grads. Returns False when skipped."""
        for p in self.params:
            if not np.all(np.isfinite(p.grad.data)):
                self.skipped += 1
                log.warning("non-finite gradient in %s; step %d skipped", p.name, self.t + 1)
                return False
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state_entries(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)]),
               f"{prefix}.skipped": np.array([float(self.skipped)])}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"{prefix}.m.{p.name}"] = m
            out[f"{prefix}.v.{p.name}"] = v
        return out

    def load_state_entries(self, prefix: str, entries: dict[str, np.ndarray]):
        self.t = int(entries[f"{prefix}.t"][0])
        self.skipped = int(entries[f"{prefix}.skipped"][0])
        for i, p in enumerate(self.params):
            self.m[i][...] = entries[f"{prefix}.m.{p.name}"]
            self.v[i][...] = entries[f"{prefix}.v.{p.name}"]


# ---------------------------------------------------------------------------
# the full training step


@dataclass(frozen=True)
class ProxyMode:
    """How the proxy-domain prediction is generated inside a train step.

    kind None keeps the learned independent threshold head; other kinds
    replace it with a perturbation of the momentum model. l1_only=True
    drops the Dice term (the weaker-loss training variant).
    """

    kind: str | None = None
    sigma: float = 0.1
    l1_only: bool = False


def train_step(params: LocatorParams, pairs: Sequence[tuple[Scene, Scene]],
               opt_main: Adam, opt_dpd: Adam,
               weights: tuple[float, float, float] = (1.0, 0.5, 0.5),
               mu: float = 0.99, tau: float = loc.DEFAULT_TAU,
               rng: np.random.Generator | None = None, crop: int = 32,
               fixed_threshold: float | None = None,
               proxy: ProxyMode = ProxyMode()) -> LossBreakdown:
    """One optimization step over a batch of scene pairs.

    Per pair: supervised loss on the first crop; main + momentum forward on
    the second crop with the consistency term; proxy-domain term between the
    main soft map and the generated proxy map on the same crop. Then one
    step for the main params, one for the independent head, and the
    momentum update.
    """
    rng = np.random.default_rng() if rng is None else rng
    w_erm, w_cons, w_dpd = weights
    n = len(pairs)
    for p in params.main.all() + params.dpd_threshold:
        p.zero_grad()

    sums = np.zeros(5)  # erm_l2, erm_l1, consistency, dpd_dice, dpd_l1
    for scene_a, scene_b in pairs:
        x1, gt1 = random_crop(scene_a, crop, rng)
        out1, cache1 = loc.forward_bundle(params.main, x1, tau, fixed_threshold)
        l2, l1, d_conf1, d_soft1 = erm_grads(out1, gt1)
        loc.backward_bundle(cache1, d_conf=(w_erm / n) * d_conf1,
                            d_soft=(w_erm / n) * d_soft1)
        sums[0] += l2
        sums[1] += l1

        if w_cons == 0.0 and w_dpd == 0.0:
            continue

        x2, _ = random_crop(scene_b, crop, rng)
        out2, cache2 = loc.forward_bundle(params.main, x2, tau, fixed_threshold)
        d_conf2 = np.zeros_like(out2.confidence.data)
        d_soft2 = np.zeros_like(d_conf2)

        dpd_fwd = None
        if w_dpd > 0.0 and proxy.kind is None:
            mo_out, dpd_fwd = loc.forward_momentum_shared(params, x2, tau)
        else:
            mo_out = loc.forward_bundle(params.momentum, x2, tau)[0]

        if w_cons > 0.0:
            cons, dc, ds = consistency_grads(out2, mo_out)
            d_conf2 += (w_cons / n) * dc
            d_soft2 += (w_cons / n) * ds
            sums[2] += cons

        if w_dpd > 0.0:
            if proxy.kind is None:
                proxy_soft = dpd_fwd.binary_soft
            else:
                proxy_soft = loc.perturbed_proxy_soft(params, x2, proxy.kind,
                                                      proxy.sigma, rng, tau)
            dice, dl1, dd_a, dd_b, dl_a, dl_b = dpd_grads(out2.binary_soft, proxy_soft)
            if proxy.l1_only:
                da, db = dl_a, dl_b
            else:
                da, db = dd_a + dl_a, dd_b + dl_b
                sums[3] += dice
            d_soft2 += (w_dpd / n) * da
            sums[4] += dl1
            if dpd_fwd is not None:
                loc.backward_dpd(dpd_fwd, d_soft=(w_dpd / n) * db)

        loc.backward_bundle(cache2, d_conf=d_conf2, d_soft=d_soft2)

    opt_main.step()
    if w_dpd > 0.0 and proxy.kind is None:
        opt_dpd.step()
    loc.momentum_update(params, mu)

    avg = sums / n
    return LossBreakdown.combine(avg[0], avg[1], avg[2], avg[3], avg[4], weights)
