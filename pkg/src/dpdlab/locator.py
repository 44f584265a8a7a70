"""Confidence/threshold crowd locator.

Pipeline: a strided conv encoder produces latent features; a decoder maps
them to a per-pixel confidence map; a threshold head consumes the
confidence-modulated features and emits a per-pixel adaptive threshold;
binarization compares confidence against threshold (inclusive >=). A soft
sigmoid surrogate of the comparison carries gradients during training.

Three parameter bundles share this pipeline: the main model, a momentum
(exponential moving average) twin used as a consistency target, and an
independent threshold generator that, attached to the momentum trunk,
produces the proxy-domain predictions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensorcore as tc
from .tensorcore import Param, Tensor

T_LO = 0.05
T_HI = 0.95
DEFAULT_TAU = 0.1

ENC_WIDTHS = (8, 16)


@dataclass
class ParamBundle:
    """One full locator parameter set: encoder, decoder, threshold head."""

    encoder: list[Param]    # [k1, b1, k2, b2], stride-2 convs
    decoder: list[Param]    # [k1, b1, k2, b2], applied after x4 upsample
    threshold: list[Param]  # [k1, b1, k2, b2], applied at latent resolution

    def all(self) -> list[Param]:
        return self.encoder + self.decoder + self.threshold

    def clone(self, prefix: str) -> "ParamBundle":
        def cp(ps):
            return [p.copy(name=f"{prefix}.{p.name.split('.', 1)[1]}") for p in ps]
        return ParamBundle(cp(self.encoder), cp(self.decoder), cp(self.threshold))


@dataclass
class LocatorParams:
    main: ParamBundle
    dpd_threshold: list[Param]  # same architecture as main.threshold, independent init
    momentum: ParamBundle

    def trainable(self) -> list[Param]:
        return self.main.all()


def _threshold_head_params(name: str, rng) -> list[Param]:
    w1, w2 = ENC_WIDTHS
    tk1, tb1 = tc.init_conv(f"{name}.thr1", w1, w2, 3, rng)
    tk2, tb2 = tc.init_conv(f"{name}.thr2", 1, w1, 3, rng)
    return [tk1, tb1, tk2, tb2]


def init_locator(seed: int) -> LocatorParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    w1, w2 = ENC_WIDTHS
    ek1, eb1 = tc.init_conv("main.enc1", w1, 3, 3, rng)
    ek2, eb2 = tc.init_conv("main.enc2", w2, w1, 3, rng)
    dk1, db1 = tc.init_conv("main.dec1", w1, w2, 3, rng)
    dk2, db2 = tc.init_conv("main.dec2", 1, w1, 3, rng)
    main = ParamBundle(
        encoder=[ek1, eb1, ek2, eb2],
        decoder=[dk1, db1, dk2, db2],
        threshold=_threshold_head_params("main", rng),
    )
    dpd = _threshold_head_params("dpd", rng)
    momentum = main.clone("momentum")
    return LocatorParams(main=main, dpd_threshold=dpd, momentum=momentum)


@dataclass
class LocatorOutput:
    confidence: Tensor   # (1,H,W) in (0,1)
    threshold: Tensor    # (1,H,W) in [T_LO, T_HI]
    binary_soft: Tensor  # (1,H,W) in (0,1)
    binary_hard: Tensor  # (1,H,W) in {0,1}


# ---------------------------------------------------------------------------
# forward pieces, each with a cache consumed by the matching backward


@dataclass
class EncCache:
    c1: object; m1: object; c2: object; m2: object


@dataclass
class DecCache:
    cu: object; c3: object; m3: object; c4: object
    conf_y: np.ndarray


@dataclass
class TrunkCache:
    enc: EncCache
    dec: DecCache
    feat: np.ndarray


def _encode_fwd(bundle: ParamBundle, x: Tensor):
    ek1, eb1, ek2, eb2 = bundle.encoder
    z1, c1 = tc.conv2d_fwd(x, ek1, eb1, stride=2, pad=1)
    a1, m1 = tc.relu_fwd(z1)
    z2, c2 = tc.conv2d_fwd(a1, ek2, eb2, stride=2, pad=1)
    f, m2 = tc.relu_fwd(z2)
    return f, EncCache(c1, m1, c2, m2)


def _decode_fwd(bundle: ParamBundle, f: Tensor):
    dk1, db1, dk2, db2 = bundle.decoder
    u, cu = tc.bilinear_upsample_fwd(f, 4)
    z3, c3 = tc.conv2d_fwd(u, dk1, db1, stride=1, pad=1)
    a3, m3 = tc.relu_fwd(z3)
    z4, c4 = tc.conv2d_fwd(a3, dk2, db2, stride=1, pad=1)
    conf, sy = tc.sigmoid_fwd(z4)
    return conf, DecCache(cu, c3, m3, c4, sy)


def _trunk_fwd(bundle: ParamBundle, x: Tensor):
    """Encoder + decoder: image -> (latent features, confidence)."""
    f, enc = _encode_fwd(bundle, x)
    conf, dec = _decode_fwd(bundle, f)
    return f, conf, TrunkCache(enc, dec, f.data)


def encode_features(encoder: list[Param], image: Tensor) -> Tensor:
    """Latent features only; used by the domain-embedding probe."""
    _check_spatial(image)
    f, _ = _encode_fwd(ParamBundle(encoder, [], []), image)
    return f


def _trunk_bwd(cache: TrunkCache, d_conf: np.ndarray, d_feat: np.ndarray | None) -> np.ndarray:
    dec, enc = cache.dec, cache.enc
    dz4 = tc.sigmoid_bwd(d_conf, dec.conf_y)
    da3 = tc.conv2d_bwd(dz4, dec.c4)
    dz3 = tc.relu_bwd(da3, dec.m3)
    du = tc.conv2d_bwd(dz3, dec.c3)
    df = tc.bilinear_upsample_bwd(du, dec.cu)
    if d_feat is not None:
        df = df + d_feat
    dz2 = tc.relu_bwd(df, enc.m2)
    da1 = tc.conv2d_bwd(dz2, enc.c2)
    dz1 = tc.relu_bwd(da1, enc.m1)
    return tc.conv2d_bwd(dz1, enc.c1)


@dataclass
class HeadCache:
    cp: np.ndarray
    cpc: object
    feat: np.ndarray
    c5: object; m5: object; c6: object; ct: object
    squash_y: np.ndarray


def _head_fwd(thr_params: list[Param], feat: Tensor, conf: Tensor):
    """Threshold head: confidence-modulated features -> threshold map in [T_LO, T_HI]."""
    tk1, tb1, tk2, tb2 = thr_params
    cp, cpc = tc.avgpool2d_fwd(conf, 4)
    g = Tensor(feat.data * cp.data)  # broadcast (1,h,w) over channels
    z5, c5 = tc.conv2d_fwd(g, tk1, tb1, stride=1, pad=1)
    a5, m5 = tc.relu_fwd(z5)
    z6, c6 = tc.conv2d_fwd(a5, tk2, tb2, stride=1, pad=1)
    zt, ct = tc.bilinear_upsample_fwd(z6, 4)
    st, sy = tc.sigmoid_fwd(zt)
    thr = Tensor(T_LO + (T_HI - T_LO) * st.data)
    cache = HeadCache(cp.data, cpc, feat.data, c5, m5, c6, ct, sy)
    return thr, cache


def _head_bwd(cache: HeadCache, d_thr: np.ndarray):
    """Accumulate head param grads; return (d_feat, d_conf) flowing upstream."""
    dzt = tc.sigmoid_bwd(d_thr * (T_HI - T_LO), cache.squash_y)
    dz6 = tc.bilinear_upsample_bwd(dzt, cache.ct)
    da5 = tc.conv2d_bwd(dz6, cache.c6)
    dz5 = tc.relu_bwd(da5, cache.m5)
    dg = tc.conv2d_bwd(dz5, cache.c5)
    d_feat = dg * cache.cp
    d_cp = (dg * cache.feat).sum(axis=0, keepdims=True)
    d_conf = tc.avgpool2d_bwd(d_cp, cache.cpc)
    return d_feat, d_conf


@dataclass
class BinCache:
    soft_y: np.ndarray
    tau: float


def binarize(conf: Tensor, thr: Tensor, tau: float):
    """Hard inclusive comparison plus its soft sigmoid surrogate."""
    soft, sy = tc.sigmoid_fwd(Tensor((conf.data - thr.data) / tau))
    hard = Tensor((conf.data >= thr.data).astype(np.float64))
    return soft, hard, BinCache(sy, tau)


@dataclass
class ForwardCache:
    trunk: TrunkCache
    head: HeadCache | None
    bin: BinCache
    fixed_threshold: float | None


def _check_spatial(image: Tensor):
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"locator input must be (3,H,W), got shape {image.shape}")
    _, h, w = image.shape
    if h % 4 or w % 4:
        raise ShapeError(f"spatial axes must be divisible by 4, got {h}x{w}")


def forward_bundle(bundle: ParamBundle, image: Tensor, tau: float = DEFAULT_TAU,
                   fixed_threshold: float | None = None):
    """Full forward pass for one bundle, returning (output, cache)."""
    _check_spatial(image)
    feat, conf, trunk_cache = _trunk_fwd(bundle, image)
    if fixed_threshold is None:
        thr, head_cache = _head_fwd(bundle.threshold, feat, conf)
    else:
        thr = Tensor(np.full_like(conf.data, float(fixed_threshold)))
        head_cache = None
    soft, hard, bin_cache = binarize(conf, thr, tau)
    out = LocatorOutput(conf, thr, soft, hard)
    return out, ForwardCache(trunk_cache, head_cache, bin_cache, fixed_threshold)


def forward(params: LocatorParams, image: Tensor, tau: float = DEFAULT_TAU,
            fixed_threshold: float | None = None) -> LocatorOutput:
    return forward_bundle(params.main, image, tau, fixed_threshold)[0]


def backward_bundle(cache: ForwardCache, d_conf: np.ndarray | None = None,
                    d_thr: np.ndarray | None = None,
                    d_soft: np.ndarray | None = None) -> np.ndarray:
    """Backprop given upstream grads on confidence/threshold/soft-binary maps.

    Accumulates into the bundle params captured by the forward caches and
    returns the input-image gradient.
    """
    sy = cache.bin.soft_y
    dc = np.zeros_like(sy)
    dt = np.zeros_like(sy)
    if d_soft is not None:
        du = d_soft * sy * (1.0 - sy) / cache.bin.tau
        dc += du
        dt -= du
    if d_conf is not None:
        dc = dc + d_conf
    if d_thr is not None:
        dt = dt + d_thr
    d_feat = None
    if cache.head is not None:
        d_feat, dc_head = _head_bwd(cache.head, dt)
        dc = dc + dc_head
    return _trunk_bwd(cache.trunk, dc, d_feat)


# ---------------------------------------------------------------------------
# proxy-domain branch: independent threshold generator on the momentum trunk


@dataclass
class DpdForward:
    threshold: Tensor
    binary_soft: Tensor
    binary_hard: Tensor
    confidence: Tensor  # momentum confidence the comparison used
    head_cache: HeadCache
    bin_cache: BinCache


def forward_dpd(params: LocatorParams, image: Tensor, tau: float = DEFAULT_TAU) -> DpdForward:
    """Proxy-domain prediction: independent threshold head fed by the momentum
    model's features and confidence. Only the independent head is trainable;
    the momentum trunk is a frozen feature source here."""
    _check_spatial(image)
    feat, conf, _ = _trunk_fwd(params.momentum, image)
    thr, head_cache = _head_fwd(params.dpd_threshold, feat, conf)
    soft, hard, bin_cache = binarize(conf, thr, tau)
    return DpdForward(thr, soft, hard, conf, head_cache, bin_cache)


def forward_dpd_threshold(params: LocatorParams, image: Tensor,
                          tau: float = DEFAULT_TAU) -> Tensor:
    return forward_dpd(params, image, tau).threshold


def backward_dpd(fwd: DpdForward, d_soft: np.ndarray | None = None,
                 d_thr: np.ndarray | None = None) -> None:
    """Accumulate grads into the independent threshold head only."""
    sy = fwd.bin_cache.soft_y
    dt = np.zeros_like(sy)
    if d_soft is not None:
        dt -= d_soft * sy * (1.0 - sy) / fwd.bin_cache.tau
    if d_thr is not None:
        dt = dt + d_thr
    _head_bwd(fwd.head_cache, dt)  # upstream grads into the frozen trunk are dropped


def forward_momentum_shared(params: LocatorParams, image: Tensor, tau: float = DEFAULT_TAU):
    """Momentum output plus proxy-branch forward sharing one trunk pass."""
    _check_spatial(image)
    feat, conf, _ = _trunk_fwd(params.momentum, image)
    thr_mo, _ = _head_fwd(params.momentum.threshold, feat, conf)
    soft_mo, hard_mo, _ = binarize(conf, thr_mo, tau)
    mo_out = LocatorOutput(conf, thr_mo, soft_mo, hard_mo)
    thr_d, head_cache = _head_fwd(params.dpd_threshold, feat, conf)
    soft_d, hard_d, bin_cache = binarize(conf, thr_d, tau)
    return mo_out, DpdForward(thr_d, soft_d, hard_d, conf, head_cache, bin_cache)


# ---------------------------------------------------------------------------
# perturbation-based proxy generators (alternative proxy-domain manners)

PROXY_KINDS = ("input_gauss", "embed_gauss", "color_jitter", "mc_dropout")


def perturbed_proxy_soft(params: LocatorParams, image: Tensor, kind: str, sigma: float,
                         rng: np.random.Generator, tau: float = DEFAULT_TAU) -> Tensor:
    """Proxy soft-binary map from a perturbed momentum model.

    input_gauss adds pixel noise, color_jitter re-styles the crop,
    embed_gauss perturbs the latent features, mc_dropout masks latent units
    (sigma doubles as the drop rate). No trainable parameters: the result
    only serves as a target for the main branch.
    """
    if kind not in PROXY_KINDS:
        raise ConfigError(f"unknown proxy perturbation {kind!r}; choose from {PROXY_KINDS}")
    mo = params.momentum
    x = image.data
    if kind == "input_gauss":
        x = x + rng.normal(0.0, sigma, size=x.shape)
    elif kind == "color_jitter":
        c = rng.uniform(0.8, 1.2)
        b = rng.uniform(-0.2, 0.2)
        x = np.clip(c * (x - 0.5) + 0.5 + b, 0.0, 1.0)
    xt = Tensor(x)
    _check_spatial(xt)
    f, _ = _encode_fwd(mo, xt)
    if kind == "embed_gauss":
        f = Tensor(f.data + rng.normal(0.0, sigma, size=f.shape))
    elif kind == "mc_dropout":
        if not (0.0 <= sigma < 1.0):
            raise ConfigError(f"dropout rate must lie in [0,1), got {sigma}")
        keep = (rng.random(f.shape) >= sigma).astype(np.float64)
        f = Tensor(f.data * keep / (1.0 - sigma))
    conf, _ = _decode_fwd(mo, f)
    thr, _ = _head_fwd(mo.threshold, f, conf)
    soft, _, _ = binarize(conf, thr, tau)
    return soft


# ---------------------------------------------------------------------------


def momentum_update(params: LocatorParams, mu: float) -> None:
    """theta_mo <- mu * theta_mo + (1 - mu) * theta_main, elementwise."""
    if not (0.0 <= mu <= 1.0):
        raise ConfigError(f"momentum coefficient must lie in [0,1], got {mu}")
    for mo, mn in zip(params.momentum.all(), params.main.all()):
        mo.value.data[...] = mu * mo.value.data + (1.0 - mu) * mn.value.data


def irrationality_rate(output: LocatorOutput, gt: Tensor) -> float:
    """Fraction of pixels whose confidence/threshold ordering contradicts GT."""
    if output.confidence.shape != gt.shape:
        raise ShapeError(f"output shape {output.confidence.shape} vs gt {gt.shape}")
    fired = output.confidence.data >= output.threshold.data
    pos = gt.data >= 0.5
    bad = (fired & ~pos) | (~fired & pos)
    return float(bad.mean())


# ---------------------------------------------------------------------------
# checkpoints: versioned header + named float64 blobs, bit-exact round-trip

_CKPT_MAGIC = b"DPDCKPT1"


def named_params(params: LocatorParams) -> dict[str, Param]:
    out = {}
    for p in params.main.all() + params.dpd_threshold + params.momentum.all():
        out[p.name] = p
    return out


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name], dtype=np.float64)
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        for _ in range(n):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode()
            (nd,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{nd}I", fh.read(4 * nd)) if nd else ()
            size = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(fh.read(8 * size), dtype=np.float64).reshape(shape).copy()
    return out


def save_locator(path, params: LocatorParams, extra: dict[str, np.ndarray] | None = None) -> None:
    entries = {name: p.value.data for name, p in named_params(params).items()}
    if extra:
        entries.update({f"extra.{k}": np.asarray(v, dtype=np.float64) for k, v in extra.items()})
    save_checkpoint(path, entries)


def load_locator(path, params: LocatorParams) -> dict[str, np.ndarray]:
    """Restore parameter values in place; returns any extra entries."""
    entries = load_checkpoint(path)
    extras = {}
    table = named_params(params)
    for name, arr in entries.items():
        if name.startswith("extra."):
            extras[name[6:]] = arr
            continue
        p = table.get(name)
        if p is None:
            raise ConfigError(f"{path}: unknown parameter {name!r}")
        if p.value.shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.value.shape}")
        p.value.data[...] = arr
    return extras
