"""Executable generalization-bound machinery.

Estimates the hypothesis-class divergence between two domains with a
proxy discriminator (linear probe on pooled conv embeddings), evaluates
the single-domain and two-domain risk-bound right-hand sides exactly, and
checks the mixture-divergence inequality and the tighter-bound condition
empirically on synthetic domains.

Convention: natural logarithm throughout; the VC dimension is a declared
configuration constant (bounds are evaluated as reported arithmetic, not
as certified guarantees); ideal joint risks are empirical upper estimates
from joint training and labeled as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, SamplingError, UndefinedMetricError
from . import locator as loc
from . import losses as lo
from .scenegen import DomainSpec, Scene, generate_set, sample_scene
from .tensorcore import Tensor, _sigmoid, init_conv

MIN_SAMPLES_PER_SIDE = 100
_PROBE_SEED = 2024
_probe_cache: dict = {}


# ---------------------------------------------------------------------------
# embeddings


def probe_encoder(seed: int = _PROBE_SEED):
    """Frozen randomly-initialized encoder used as the domain embedding probe."""
    enc = _probe_cache.get(seed)
    if enc is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        ek1, eb1 = init_conv("probe.enc1", loc.ENC_WIDTHS[0], 3, 3, rng)
        ek2, eb2 = init_conv("probe.enc2", loc.ENC_WIDTHS[1], loc.ENC_WIDTHS[0], 3, rng)
        enc = [ek1, eb1, ek2, eb2]
        _probe_cache[seed] = enc
    return enc


def scene_embeddings(scenes: list[Scene], encoder=None) -> np.ndarray:
    """Pool encoder features to a fixed 32-dim vector per scene (mean+std per channel)."""
    enc = probe_encoder() if encoder is None else encoder
    rows = []
    for sc in scenes:
        f = loc.encode_features(enc, sc.image).data
        rows.append(np.concatenate([f.mean(axis=(1, 2)), f.std(axis=(1, 2))]))
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# proxy A-distance


@dataclass
class DivergenceEstimate:
    value: float             # in [0, 2]
    classifier_error: float  # held-out error of the domain discriminator
    n_samples_per_domain: int
    seed: int


def _logistic_fit(x: np.ndarray, y: np.ndarray, steps: int = 500, lr: float = 0.5):
    n, dim = x.shape
    w = np.zeros(dim)
    b = 0.0
    for _ in range(steps):
        p = _sigmoid(x @ w + b)
        err = p - y
        w -= lr * (x.T @ err) / n
        b -= lr * float(err.mean())
    return w, b


def proxy_a_distance(samples_a: np.ndarray, samples_b: np.ndarray, seed: int = 0) -> DivergenceEstimate:
    """Domain divergence proxy: 2*(1 - 2*err) of a held-out discriminator.

    A linear probe (logistic regression, 500 full-batch steps) is trained to
    tell the two feature sets apart on a 70% split; the held-out error on
    the remaining 30% gives the estimate, clipped into [0, 2].
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError(f"feature sets must be 2-d with equal width, got {a.shape} vs {b.shape}")
    if len(a) < MIN_SAMPLES_PER_SIDE or len(b) < MIN_SAMPLES_PER_SIDE:
        raise SamplingError(
            f"need >= {MIN_SAMPLES_PER_SIDE} samples per side, got {len(a)}/{len(b)}")
    x = np.vstack([a, b])
    y = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4242]))
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    n_hold = int(round(0.3 * len(x)))
    x_tr, y_tr = x[n_hold:], y[n_hold:]
    x_ho, y_ho = x[:n_hold], y[:n_hold]
    if len(np.unique(y_tr)) < 2 or len(np.unique(y_ho)) < 2:
        raise SamplingError("degenerate single-class split in divergence probe")
    mean = x_tr.mean(axis=0)
    std = np.maximum(x_tr.std(axis=0), 1e-12)
    w, bias = _logistic_fit((x_tr - mean) / std, y_tr)
    pred = (_sigmoid(((x_ho - mean) / std) @ w + bias) >= 0.5).astype(np.float64)
    eps_p = float(np.mean(pred != y_ho))
    value = min(max(2.0 * (1.0 - 2.0 * eps_p), 0.0), 2.0)
    return DivergenceEstimate(value=value, classifier_error=eps_p,
                              n_samples_per_domain=min(len(a), len(b)), seed=seed)


_ROLE_OFFSETS = {"a": 11, "b": 12, "target": 13, "mixture": 14, "train": 15, "test": 16}


def _role_seed0(seed: int, role: str) -> int:
    return seed * 100_000_000 + _ROLE_OFFSETS[role] * 1_000_000


def domain_divergence(spec_a: DomainSpec, spec_b: DomainSpec, n: int = 300,
                      seed: int = 0, encoder=None) -> DivergenceEstimate:
    """Estimated divergence between two domain specs from fresh scene draws."""
    emb_a = scene_embeddings(generate_set(spec_a, n, _role_seed0(seed, "a")), encoder)
    emb_b = scene_embeddings(generate_set(spec_b, n, _role_seed0(seed, "b")), encoder)
    return proxy_a_distance(emb_a, emb_b, seed=seed)


# ---------------------------------------------------------------------------
# bound arithmetic


def vc_complexity_term(m: int, d: int, delta: float) -> float:
    """Sample-complexity term 4*sqrt((2d*ln(2m) + ln(2/delta)) / m)."""
    if m < 1 or d < 1:
        raise ConfigError(f"m and d must be >= 1, got m={m}, d={d}")
    if not (0.0 < delta < 1.0):
        raise ConfigError(f"delta must lie in (0,1), got {delta}")
    return 4.0 * math.sqrt((2.0 * d * math.log(2.0 * m) + math.log(2.0 / delta)) / m)


def _check_range(name, value, lo_v, hi_v):
    if not (lo_v <= value <= hi_v):
        raise ConfigError(f"{name}={value} outside [{lo_v}, {hi_v}]")


def erm_bound_rhs(source_risk: float, div_st: float, m_s: int, d: int,
                  delta: float, lambda_hat: float) -> float:
    """Single-domain risk-bound right-hand side."""
    _check_range("source_risk", source_risk, 0.0, 1.0)
    _check_range("div_st", div_st, 0.0, 2.0)
    return (source_risk + 0.5 * div_st) + vc_complexity_term(m_s, d, delta) + lambda_hat


def dpd_bound_rhs(source_risk: float, proxy_risk: float, div_st: float, div_pt: float,
                  gamma: float, m_s: int, m_p: int, d: int, delta: float,
                  lambda_gamma: float) -> float:
    """Two-domain (convex combination) risk-bound right-hand side.

    At gamma=1 with m_p=0 and lambda_gamma equal to the single-domain ideal
    risk this reduces bit-exactly to erm_bound_rhs (term order is shared).
    """
    _check_range("source_risk", source_risk, 0.0, 1.0)
    _check_range("proxy_risk", proxy_risk, 0.0, 1.0)
    _check_range("div_st", div_st, 0.0, 2.0)
    _check_range("div_pt", div_pt, 0.0, 2.0)
    _check_range("gamma", gamma, 0.0, 1.0)
    if m_p < 0:
        raise ConfigError(f"m_p must be >= 0, got {m_p}")
    dom = gamma * (source_risk + 0.5 * div_st) + (1.0 - gamma) * (proxy_risk + 0.5 * div_pt)
    return dom + vc_complexity_term(m_s + m_p, d, delta) + lambda_gamma


def thm2_check(div_st: float, div_pt: float, gamma: float) -> tuple[bool, float]:
    """Is the gamma-mixture divergence strictly below the source-target one?

    Returns (tighter, margin) with margin = div_st - mixture; margin 0 (for
    example at gamma=1 or div_pt=div_st) is not tighter.
    """
    _check_range("div_st", div_st, 0.0, 2.0)
    _check_range("div_pt", div_pt, 0.0, 2.0)
    _check_range("gamma", gamma, 0.0, 1.0)
    mixture = gamma * div_st + (1.0 - gamma) * div_pt
    margin = div_st - mixture
    return margin > 0.0, margin


MIXTURE_TOLERANCE = 0.15


def mixture_divergence_check(spec_s: DomainSpec, spec_p: DomainSpec, spec_t: DomainSpec,
                             gamma: float, seed: int = 0, n: int = 300,
                             div_st: float | None = None, div_pt: float | None = None):
    """Empirical check of div(mixture, target) <= gamma*div_st + (1-gamma)*div_pt.

    The mixture domain draws each scene from the source spec with
    probability gamma, else from the proxy spec. Precomputed div_st/div_pt
    may be passed to share estimates across gamma values.
    """
    _check_range("gamma", gamma, 0.0, 1.0)
    emb_t = scene_embeddings(generate_set(spec_t, n, _role_seed0(seed, "target")))
    if div_st is None:
        emb_s = scene_embeddings(generate_set(spec_s, n, _role_seed0(seed, "a")))
        div_st = proxy_a_distance(emb_s, emb_t, seed=seed).value
    if div_pt is None:
        emb_p = scene_embeddings(generate_set(spec_p, n, _role_seed0(seed, "b")))
        div_pt = proxy_a_distance(emb_p, emb_t, seed=seed).value
    pick = np.random.default_rng(np.random.SeedSequence([seed, 555])).random(n) < gamma
    seed0 = _role_seed0(seed, "mixture")
    mix_scenes = [sample_scene(spec_s if pick[i] else spec_p, seed0 + i) for i in range(n)]
    lhs = proxy_a_distance(scene_embeddings(mix_scenes), emb_t, seed=seed).value
    rhs = gamma * div_st + (1.0 - gamma) * div_pt
    return lhs, rhs, lhs <= rhs + MIXTURE_TOLERANCE


# ---------------------------------------------------------------------------
# empirical risks and the ideal-joint-risk estimate


def empirical_risk(params: loc.LocatorParams, scenes: list[Scene],
                   tau: float = loc.DEFAULT_TAU, fixed_threshold: float | None = None) -> float:
    """Binary-classification risk: mean pixel disagreement of the hard map."""
    errs = [
        float(np.mean(np.abs(
            loc.forward(params, sc.image, tau, fixed_threshold).binary_hard.data
            - sc.gt_binary.data)))
        for sc in scenes
    ]
    return float(np.mean(errs))


def estimate_lambda(spec_s: DomainSpec, spec_t: DomainSpec, budget: int, seed: int,
                    n_train: int = 60, n_test: int = 40, batch: int = 8,
                    lr: float = 1e-3) -> float:
    """Empirical upper estimate of the ideal joint risk.

    Trains one locator jointly (plain supervised loss) on both domains for
    `budget` steps and returns the final source+target risk sum. The
    synthetic generator grants target labels for this diagnostic only.
    Budget 0 returns the initial-risk sum (vacuous but well defined).
    """
    params = loc.init_locator(seed)
    opt = lo.Adam(params.main.all(), lr=lr)
    opt_d = lo.Adam(params.dpd_threshold, lr=lr)
    train_s = generate_set(spec_s, n_train, _role_seed0(seed, "train"))
    train_t = generate_set(spec_t, n_train, _role_seed0(seed, "train") + n_train)
    pool = train_s + train_t
    for step in range(budget):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 77, step]))
        idx = rng.integers(0, len(pool), size=2 * batch)
        pairs = [(pool[idx[2 * i]], pool[idx[2 * i + 1]]) for i in range(batch)]
        lo.train_step(params, pairs, opt, opt_d, weights=(1.0, 0.0, 0.0), rng=rng)
    test_s = generate_set(spec_s, n_test, _role_seed0(seed, "test"))
    test_t = generate_set(spec_t, n_test, _role_seed0(seed, "test") + n_test)
    return empirical_risk(params, test_s) + empirical_risk(params, test_t)


# ---------------------------------------------------------------------------
# uncertainty


def monte_carlo_uncertainty(confidences) -> float:
    """Mean of -c*ln(c) over positive-pixel confidences (lower = more certain)."""
    vals = np.asarray(confidences, dtype=np.float64)
    if vals.size == 0:
        raise UndefinedMetricError("monte_carlo_uncertainty of an empty collection")
    return float(np.mean(-vals * np.log(vals)))


def positive_confidences(params: loc.LocatorParams, scenes: list[Scene],
                         tau: float = loc.DEFAULT_TAU,
                         fixed_threshold: float | None = None):
    """Confidence and threshold values at ground-truth-positive pixels."""
    confs, thrs = [], []
    for sc in scenes:
        out = loc.forward(params, sc.image, tau, fixed_threshold)
        mask = sc.gt_binary.data >= 0.5
        confs.append(out.confidence.data[mask])
        thrs.append(out.threshold.data[mask])
    return np.concatenate(confs), np.concatenate(thrs)


# ---------------------------------------------------------------------------
# report container


@dataclass
class BoundReport:
    source_risk: float
    proxy_risk: float
    div_st: float
    div_pt: float
    gamma: float
    m_s: int
    m_p: int
    vc_dim: int
    delta: float
    lambda_hat: float
    erm_rhs: float
    dpd_rhs: float
    thm2_condition_holds: bool

    @staticmethod
    def build(source_risk, proxy_risk, div_st, div_pt, gamma, m_s, m_p,
              vc_dim, delta, lambda_hat) -> "BoundReport":
        erm = erm_bound_rhs(source_risk, div_st, m_s, vc_dim, delta, lambda_hat)
        dpd = dpd_bound_rhs(source_risk, proxy_risk, div_st, div_pt, gamma,
                            m_s, m_p, vc_dim, delta, lambda_hat)
        tighter, _ = thm2_check(div_st, div_pt, gamma)
        return BoundReport(source_risk, proxy_risk, div_st, div_pt, gamma, m_s, m_p,
                           vc_dim, delta, lambda_hat, erm, dpd, tighter)

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)!r}" for f in fields(self)]
        lines.append("note = lambda_hat is an empirical upper estimate from joint training")
        return "\n".join(lines) + "\n"

    @staticmethod
    def csv_header() -> list[str]:
        return [f.name for f in fields(BoundReport)]

    def csv_row(self) -> list[str]:
        return [repr(getattr(self, f.name)) for f in fields(BoundReport)]
