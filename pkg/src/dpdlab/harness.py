"""Experiment orchestration, persistence, reporting, and the CLI.

An ExperimentConfig picks one training variant (plain supervised baseline,
fixed-threshold, momentum-consistency only, the full proxy-domain trainer,
or a perturbation-generated proxy), one domain-shift preset, and the
training/bound hyperparameters. run_experiment trains per seed, evaluates
on held-out source and target scenes with frozen parameters, and writes
per-run artifacts; emit_report aggregates runs into the report CSVs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from configparser import ConfigParser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DpdError
from . import evalmetrics as ev
from . import locator as loc
from . import losses as lo
from . import theory as th
from . import scenegen as sg

EXPERIMENTS = ("baseline_erm", "fixed_threshold", "momentum_only", "full_dpd", "perturbation")
GAUSS_SIGMAS = (0.1, 0.2, 0.5)

_SRC_TEST_SEED0 = 777_000_000
_TGT_TEST_SEED0 = 888_000_000
_PROXY_TEST_SEED0 = 999_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "full_dpd"
    shift_preset: str = "mixed"
    threshold_value: float = 0.5     # fixed_threshold variant
    proxy_kind: str = ""             # perturbation variant
    proxy_sigma: float = 0.1
    dpd_l1_only: bool = False        # weaker-loss variant of full_dpd

    seeds: tuple[int, ...] = (1, 2, 3)
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    mu: float = 0.99
    tau: float = 0.1
    loss_weights: tuple[float, float, float] = (1.0, 0.5, 0.5)
    crop: int = 32
    n_train_scenes: int = 200
    n_test_scenes: int = 100
    eval_interval: int = 100
    eval_scenes: int = 40

    vc_dim: int = 50
    delta: float = 0.1
    gamma: float = 0.5
    divergence_samples: int = 300
    lambda_budget: int = 150

    output_dir: str = "runs/out"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        sg.shift_preset(self.shift_preset)  # validates the preset name
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1")
        if self.experiment == "perturbation" and self.proxy_kind not in loc.PROXY_KINDS:
            raise ConfigError(f"perturbation needs proxy_kind from {loc.PROXY_KINDS}")
        if not (0.0 <= self.mu <= 1.0):
            raise ConfigError(f"mu {self.mu} outside [0,1]")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.eval_interval < 1 or self.eval_scenes < 1:
            raise ConfigError("eval_interval and eval_scenes must be >= 1")

    def label(self) -> str:
        if self.experiment == "fixed_threshold":
            return f"fixed_thr{self.threshold_value:g}"
        if self.experiment == "perturbation":
            return f"perturb_{self.proxy_kind}_s{self.proxy_sigma:g}"
        if self.experiment == "full_dpd" and self.dpd_l1_only:
            return "full_dpd_l1only"
        return self.experiment

    # -- flat typed key-value persistence (section headers, diff friendly) --

    _SECTIONS = {
        "experiment": ("experiment", "shift_preset", "threshold_value", "proxy_kind",
                       "proxy_sigma", "dpd_l1_only"),
        "training": ("seeds", "steps", "batch", "lr", "mu", "tau", "loss_weights", "crop",
                     "n_train_scenes", "n_test_scenes", "eval_interval", "eval_scenes"),
        "bound": ("vc_dim", "delta", "gamma", "divergence_samples", "lambda_budget"),
        "io": ("output_dir",),
    }

    def to_ini_text(self) -> str:
        cp = ConfigParser()
        for section, names in self._SECTIONS.items():
            cp[section] = {}
            for name in names:
                v = getattr(self, name)
                if isinstance(v, tuple):
                    cp[section][name] = ",".join(repr(x) for x in v)
                else:
                    cp[section][name] = repr(v) if isinstance(v, float) else str(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_ini_text())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        cp = ConfigParser()
        text = Path(path).read_text()
        cp.read_string(text)
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for section, names in cls._SECTIONS.items():
            for name in names:
                if not cp.has_option(section, name):
                    continue
                raw = cp.get(section, name)
                t = types[name]
                if name == "seeds":
                    kwargs[name] = tuple(int(x) for x in raw.split(",") if x.strip())
                elif name == "loss_weights":
                    kwargs[name] = tuple(float(x) for x in raw.split(","))
                elif t == "bool":
                    kwargs[name] = raw.strip().lower() in ("1", "true", "yes")
                elif t == "int":
                    kwargs[name] = int(raw)
                elif t == "float":
                    kwargs[name] = float(raw)
                else:
                    kwargs[name] = raw
        return cls(**kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini_text().encode()).hexdigest()[:16]


def _variant(config: ExperimentConfig):
    """Map the experiment enum to (loss weights, fixed threshold, proxy mode)."""
    w_erm, w_cons, w_dpd = config.loss_weights
    if config.experiment == "baseline_erm":
        return (w_erm, 0.0, 0.0), None, lo.ProxyMode()
    if config.experiment == "fixed_threshold":
        return (w_erm, 0.0, 0.0), config.threshold_value, lo.ProxyMode()
    if config.experiment == "momentum_only":
        return (w_erm, w_cons, 0.0), None, lo.ProxyMode()
    if config.experiment == "perturbation":
        return (w_erm, w_cons, w_dpd), None, lo.ProxyMode(config.proxy_kind, config.proxy_sigma)
    return (w_erm, w_cons, w_dpd), None, lo.ProxyMode(l1_only=config.dpd_l1_only)


# ---------------------------------------------------------------------------
# evaluation of a frozen model over a scene set


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    mcu: float
    irrationality: float
    conf_stats: ev.DistributionStats | None
    thr_stats: ev.DistributionStats | None


def evaluate_locator(params, scenes, tau, fixed_threshold=None) -> EvalResult:
    matches = []
    confs, thrs, irr = [], [], []
    for sc in scenes:
        out = loc.forward(params, sc.image, tau, fixed_threshold)
        matches.append(ev.score_scene(out.binary_hard, sc))
        mask = sc.gt_binary.data >= 0.5
        if mask.any():
            confs.append(out.confidence.data[mask])
            thrs.append(out.threshold.data[mask])
        irr.append(loc.irrationality_rate(out, sc.gt_binary))
    agg = ev.aggregate_matches(matches)
    precision, recall, f1 = ev.localization_metrics(agg)
    conf_vals = np.concatenate(confs) if confs else np.array([])
    thr_vals = np.concatenate(thrs) if thrs else np.array([])
    mcu = th.monte_carlo_uncertainty(conf_vals) if conf_vals.size else float("nan")
    return EvalResult(
        precision=precision, recall=recall, f1=f1, tp=agg.tp, fp=agg.fp, fn=agg.fn,
        mcu=mcu, irrationality=float(np.mean(irr)),
        conf_stats=ev.distribution_stats(conf_vals) if conf_vals.size else None,
        thr_stats=ev.distribution_stats(thr_vals) if thr_vals.size else None)


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    label: str
    preset: str
    seed: int
    config_hash: str
    losses: list = field(default_factory=list)   # (step, erm_l2, erm_l1, cons, dice, dl1, total)
    curve: list = field(default_factory=list)    # (step, target_f1)
    metrics: dict = field(default_factory=dict)  # split -> EvalResult fields
    bound: th.BoundReport | None = None
    checkpoint: str = ""
    wall_seconds: float = 0.0

    def to_json(self) -> dict:
        out = {
            "label": self.label, "preset": self.preset, "seed": self.seed,
            "config_hash": self.config_hash, "curve": self.curve,
            "metrics": self.metrics, "checkpoint": self.checkpoint,
            "wall_seconds": self.wall_seconds,
        }
        if self.bound is not None:
            out["bound"] = {k: getattr(self.bound, k) for k in th.BoundReport.csv_header()}
        return out

    @classmethod
    def from_json(cls, data: dict, losses=None) -> "RunRecord":
        bound = None
        if "bound" in data:
            bound = th.BoundReport(**data["bound"])
        return cls(label=data["label"], preset=data["preset"], seed=data["seed"],
                   config_hash=data["config_hash"], losses=losses or [],
                   curve=[tuple(x) for x in data["curve"]], metrics=data["metrics"],
                   bound=bound, checkpoint=data.get("checkpoint", ""),
                   wall_seconds=data.get("wall_seconds", 0.0))


def _eval_to_dict(r: EvalResult) -> dict:
    out = {"precision": r.precision, "recall": r.recall, "f1": r.f1,
           "tp": r.tp, "fp": r.fp, "fn": r.fn, "mcu": r.mcu,
           "irrationality": r.irrationality}
    for name, st in (("conf", r.conf_stats), ("thr", r.thr_stats)):
        if st is not None:
            out[name] = {"q1": st.quartiles[0], "median": st.quartiles[1],
                         "q3": st.quartiles[2], "mean": st.mean, "min": st.min,
                         "max": st.max, "n": st.n}
    return out


# ---------------------------------------------------------------------------
# training loop


def _save_state(path, params, opt_main, opt_dpd, step: int):
    entries = {f"param.{n}": p.value.data for n, p in loc.named_params(params).items()}
    entries.update(opt_main.state_entries("adam_main"))
    entries.update(opt_dpd.state_entries("adam_dpd"))
    entries["step"] = np.array([float(step)])
    loc.save_checkpoint(path, entries)


def _load_state(path, params, opt_main, opt_dpd) -> int:
    entries = loc.load_checkpoint(path)
    table = loc.named_params(params)
    for k, v in entries.items():
        if k.startswith("param."):
            table[k[len("param."):]].value.data[...] = v
    opt_main.load_state_entries("adam_main", entries)
    opt_dpd.load_state_entries("adam_dpd", entries)
    return int(entries["step"][0])


_LOSS_COLS = ("step", "erm_l2", "erm_l1", "consistency", "dpd_dice", "dpd_l1", "total")


def _write_csv(path, name, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# dpdlab {name} v1\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path):
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows[0], rows[1:]


def run_single(config: ExperimentConfig, seed: int) -> RunRecord:
    """Train one seed of one experiment variant and evaluate it frozen."""
    t0 = time.time()
    label = config.label()
    run_dir = Path(config.output_dir) / f"{label}_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    chash = config.config_hash()
    cfg_file = run_dir / "config.ini"
    if cfg_file.exists():
        if ExperimentConfig.load(cfg_file).config_hash() != chash:
            raise ConfigError(f"{run_dir}: existing run was made with a different config; "
                              "refusing to resume")
    else:
        config.save(cfg_file)

    source, target = sg.shift_preset(config.shift_preset)
    train_scenes = sg.generate_set(source, config.n_train_scenes,
                                   seed * 100_000_000 + 21_000_000)
    src_test = sg.generate_set(source, config.n_test_scenes, _SRC_TEST_SEED0)
    tgt_test = sg.generate_set(target, config.n_test_scenes, _TGT_TEST_SEED0)
    curve_eval = tgt_test[:config.eval_scenes]

    weights, fixed_thr, proxy = _variant(config)
    params = loc.init_locator(seed)
    opt_main = lo.Adam(params.main.all(), lr=config.lr)
    opt_dpd = lo.Adam(params.dpd_threshold, lr=config.lr)

    ckpt = run_dir / "checkpoint.bin"
    start_step = 0
    loss_rows: list[tuple] = []
    curve: list[tuple] = []
    if ckpt.exists():
        start_step = _load_state(ckpt, params, opt_main, opt_dpd)
        if (run_dir / "losses.csv").exists():
            _, rows = _read_csv(run_dir / "losses.csv")
            loss_rows = [tuple(float(x) for x in r) for r in rows if float(r[0]) <= start_step]
        if (run_dir / "curve.csv").exists():
            _, rows = _read_csv(run_dir / "curve.csv")
            curve = [(int(float(r[0])), float(r[1])) for r in rows if float(r[0]) <= start_step]

    n_train = len(train_scenes)
    for step in range(start_step, config.steps):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3001, step]))
        idx = rng.integers(0, n_train, size=2 * config.batch)
        pairs = [(train_scenes[idx[2 * i]], train_scenes[idx[2 * i + 1]])
                 for i in range(config.batch)]
        br = lo.train_step(params, pairs, opt_main, opt_dpd, weights=weights,
                           mu=config.mu, tau=config.tau, rng=rng, crop=config.crop,
                           fixed_threshold=fixed_thr, proxy=proxy)
        loss_rows.append((step + 1, br.erm_l2, br.erm_l1, br.consistency,
                          br.dpd_dice, br.dpd_l1, br.total))
        if (step + 1) % config.eval_interval == 0:
            r = evaluate_locator(params, curve_eval, config.tau, fixed_thr)
            curve.append((step + 1, r.f1))
            _save_state(ckpt, params, opt_main, opt_dpd, step + 1)
            _write_csv(run_dir / "losses.csv", "losses", _LOSS_COLS, loss_rows)
            _write_csv(run_dir / "curve.csv", "curve", ("step", "target_f1"), curve)

    _save_state(ckpt, params, opt_main, opt_dpd, config.steps)
    _write_csv(run_dir / "losses.csv", "losses", _LOSS_COLS, loss_rows)
    _write_csv(run_dir / "curve.csv", "curve", ("step", "target_f1"), curve)

    # frozen-parameter evaluation
    res_src = evaluate_locator(params, src_test, config.tau, fixed_thr)
    res_tgt = evaluate_locator(params, tgt_test, config.tau, fixed_thr)

    proxy_spec = sg.proxy_spec_for(config.shift_preset)
    proxy_scenes = sg.generate_set(proxy_spec, config.n_test_scenes, _PROXY_TEST_SEED0)
    source_risk = th.empirical_risk(params, src_test, config.tau, fixed_thr)
    proxy_risk = th.empirical_risk(params, proxy_scenes, config.tau, fixed_thr)
    div_st = th.domain_divergence(source, target, config.divergence_samples, seed).value
    div_pt = th.domain_divergence(proxy_spec, target, config.divergence_samples, seed).value
    lambda_hat = th.estimate_lambda(source, target, config.lambda_budget, seed)
    trains_proxy = config.experiment in ("full_dpd", "perturbation")
    bound = th.BoundReport.build(
        source_risk=source_risk, proxy_risk=proxy_risk, div_st=div_st, div_pt=div_pt,
        gamma=config.gamma, m_s=config.steps * config.batch,
        m_p=config.steps * config.batch if trains_proxy else 0,
        vc_dim=config.vc_dim, delta=config.delta, lambda_hat=lambda_hat)
    (run_dir / "bound.txt").write_text(bound.to_text())

    record = RunRecord(
        label=label, preset=config.shift_preset, seed=seed, config_hash=chash,
        losses=loss_rows, curve=curve,
        metrics={"source": _eval_to_dict(res_src), "target": _eval_to_dict(res_tgt)},
        bound=bound, checkpoint=str(ckpt), wall_seconds=time.time() - t0)
    (run_dir / "record.json").write_text(json.dumps(record.to_json(), indent=1))
    return record


def run_experiment(config: ExperimentConfig) -> list[RunRecord]:
    return [run_single(config, seed) for seed in config.seeds]


def run_perturbation_suite(config: ExperimentConfig) -> list[RunRecord]:
    """All proxy-generation manners: gauss kinds swept over the three sigmas."""
    records = []
    for kind in loc.PROXY_KINDS:
        sigmas = GAUSS_SIGMAS if kind in ("input_gauss", "embed_gauss") else (config.proxy_sigma,)
        for sig in sigmas:
            cfg = replace(config, experiment="perturbation", proxy_kind=kind, proxy_sigma=sig)
            records.extend(run_experiment(cfg))
    return records


def load_run_records(directory) -> list[RunRecord]:
    records = []
    for rec_file in sorted(Path(directory).glob("*/record.json")):
        data = json.loads(rec_file.read_text())
        losses = []
        loss_file = rec_file.parent / "losses.csv"
        if loss_file.exists():
            _, rows = _read_csv(loss_file)
            losses = [tuple(float(x) for x in r) for r in rows]
        records.append(RunRecord.from_json(data, losses=losses))
    return records


# ---------------------------------------------------------------------------
# report emission


def _mean_std(xs):
    xs = np.asarray(list(xs), dtype=np.float64)
    return float(xs.mean()), float(xs.std(ddof=1)) if len(xs) > 1 else 0.0


def emit_report(records: list[RunRecord], output_dir=None) -> list[Path]:
    """Write the six report files plus a plain-text summary."""
    if not records:
        raise ConfigError("emit_report needs at least one record")
    out = Path(output_dir) if output_dir else Path()
    out.mkdir(parents=True, exist_ok=True)
    written = []

    metric_rows, mcu_rows, box_rows, curve_rows, bound_rows = [], [], [], [], []
    for r in records:
        for split in ("source", "target"):
            m = r.metrics.get(split)
            if not m:
                continue
            metric_rows.append((r.label, r.preset, r.seed, split,
                                repr(m["f1"]), repr(m["precision"]), repr(m["recall"]),
                                m["tp"], m["fp"], m["fn"]))
            mcu_rows.append((r.label, r.preset, r.seed, split, repr(m["mcu"])))
            for quantity in ("conf", "thr"):
                st = m.get(quantity)
                if st:
                    box_rows.append((r.label, r.preset, r.seed, split, quantity,
                                     repr(st["q1"]), repr(st["median"]), repr(st["q3"]),
                                     repr(st["mean"]), repr(st["min"]), repr(st["max"]), st["n"]))
        for (step, f1) in r.curve:
            curve_rows.append((r.label, r.preset, r.seed, step, repr(f1)))
        if r.bound is not None:
            bound_rows.append((r.label, r.preset, r.seed, *r.bound.csv_row()))

    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.label, r.preset), []).append(r)
    ablation_rows = []
    summary_lines = []
    for (label, preset), group in sorted(groups.items()):
        f1m, f1s = _mean_std(r.metrics["target"]["f1"] for r in group)
        prm, prs = _mean_std(r.metrics["target"]["precision"] for r in group)
        rcm, rcs = _mean_std(r.metrics["target"]["recall"] for r in group)
        ablation_rows.append((label, preset, len(group), repr(f1m), repr(f1s),
                              repr(prm), repr(prs), repr(rcm), repr(rcs)))
        summary_lines.append(
            f"{label} on {preset} (n={len(group)}): "
            f"F1 {100 * f1m:.1f} +-{100 * f1s:.2f}  "
            f"Pre. {100 * prm:.1f} +-{100 * prs:.2f}  "
            f"Rec. {100 * rcm:.1f} +-{100 * rcs:.2f}")

    tables = [
        ("metrics_table.csv", "metrics",
         ("experiment", "preset", "seed", "split", "f1", "precision", "recall",
          "tp", "fp", "fn"), metric_rows),
        ("ablation.csv", "ablation",
         ("experiment", "preset", "n_seeds", "f1_mean", "f1_std", "pre_mean",
          "pre_std", "rec_mean", "rec_std"), ablation_rows),
        ("mcu.csv", "mcu", ("experiment", "preset", "seed", "split", "mcu"), mcu_rows),
        ("boxplot_stats.csv", "boxplot-stats",
         ("experiment", "preset", "seed", "split", "quantity", "q1", "median", "q3",
          "mean", "min", "max", "n"), box_rows),
        ("training_curve.csv", "training-curve",
         ("experiment", "preset", "seed", "step", "target_f1"), curve_rows),
        ("bound_report.csv", "bound-report",
         ("experiment", "preset", "seed", *th.BoundReport.csv_header()), bound_rows),
    ]
    for fname, tag, header, rows in tables:
        path = out / fname
        _write_csv(path, tag, header, rows)
        written.append(path)
    summary = out / "summary.txt"
    summary.write_text("\n".join(summary_lines) + "\n")
    written.append(summary)
    return written


# ---------------------------------------------------------------------------
# selftest (quick invariant suite for the CLI)


def _selftest() -> int:
    passed = failed = 0

    def check(name, ok):
        nonlocal passed, failed
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        passed, failed = passed + (1 if ok else 0), failed + (0 if ok else 1)

    from . import tensorcore as tc

    rng = np.random.default_rng(0)
    x = tc.Tensor(rng.standard_normal((2, 5, 5)))
    kern, bias = tc.init_conv("st", 3, 2, 3, rng)
    y = tc.conv2d(x, kern, bias, stride=1, pad=1).data
    ref = np.zeros_like(y)
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    for co in range(3):
        for i in range(5):
            for j in range(5):
                acc = bias.value.data[co]
                for ci in range(2):
                    for a in range(3):
                        for b in range(3):
                            acc += kern.value.data[co, ci, a, b] * xp[ci, i + a, j + b]
                ref[co, i, j] = acc
    check("conv2d matches nested-loop oracle", np.max(np.abs(y - ref)) < 1e-12)

    params = loc.init_locator(3)
    scene = sg.sample_scene(sg.DomainSpec(image_size=(16, 16), count_range=(1, 2)), 5)
    gt = scene.gt_binary

    def full_loss():
        out, cache = loc.forward_bundle(params.main, scene.image)
        l2, l1, dc, ds = lo.erm_grads(out, gt)
        loc.backward_bundle(cache, d_conf=dc, d_soft=ds)
        return l2 + l1

    err = tc.grad_check(full_loss, params.main.all(), n_coords=40, seed=1)
    check("supervised loss gradients < 1e-4", err < 1e-4)

    erm = th.erm_bound_rhs(0.1, 0.8, 1000, 50, 0.1, 0.2)
    dpd = th.dpd_bound_rhs(0.1, 0.3, 0.8, 0.4, 1.0, 1000, 0, 50, 0.1, 0.2)
    check("gamma=1 bound degeneration is exact", erm == dpd)

    vc = th.vc_complexity_term(1000, 10, 0.1)
    check("vc term reference value", abs(vc - 1.574873) < 1e-4)
    ms = np.unique(np.logspace(1, 6, 20).astype(int))
    check("vc term decreasing in m",
          all(th.vc_complexity_term(int(m) + 1, 10, 0.1) < th.vc_complexity_term(int(m), 10, 0.1)
              for m in ms))

    a = tc.Tensor(rng.uniform(0.1, 0.9, (1, 6, 6)))
    dice_same, l1_same = lo.dpd_loss(a, a.copy())
    half = np.zeros((1, 6, 6)); half[0, :3] = 0.7
    other = np.zeros((1, 6, 6)); other[0, 3:] = 0.7
    dice_disj, _ = lo.dpd_loss(tc.Tensor(half), tc.Tensor(other))
    check("dice identities", dice_same < 1e-6 and l1_same == 0.0 and abs(dice_disj - 1.0) < 1e-6)

    out, _ = loc.forward_bundle(params.main, scene.image)
    tie = np.all((out.confidence.data >= out.threshold.data) == (out.binary_hard.data == 1.0))
    check("hard binarization is the inclusive comparison", bool(tie))

    m = ev.match_points([(0.0, 0.0), (0.0, 2.0)], [(0.0, 1.0)], 1.5)
    check("one-to-one matching", m.tp == 1 and m.fp == 1 and m.fn == 0)

    check("uncertainty reference values",
          th.monte_carlo_uncertainty([1.0]) == 0.0
          and abs(th.monte_carlo_uncertainty([1.0 / np.e]) - 1.0 / np.e) < 1e-12)

    print(f"selftest: {passed} passed, {failed} failed")
    return 0 if failed == 0 else 2


# ---------------------------------------------------------------------------
# CLI


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser() -> _Parser:
    p = _Parser(prog="dpdlab", description="desk-scale crowd-localization generalization lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write scene sets for a preset")
    g.add_argument("--preset", default="mixed")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-n", type=int, default=20)
    g.add_argument("--split", choices=("source", "target"), default="source")
    g.add_argument("--ppm", action="store_true", help="also write portable pixmaps")

    t = sub.add_parser("train", help="run an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override output_dir")
    t.add_argument("--seed", type=int, help="run a single seed instead of the config list")
    t.add_argument("--preset", help="override shift preset")

    b = sub.add_parser("bounds", help="bound report for a preset without training")
    b.add_argument("--preset", default="mixed")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--gamma", type=float, default=0.5)
    b.add_argument("--samples", type=int, default=300)

    r = sub.add_parser("report", help="emit report files over a run directory")
    r.add_argument("--out", required=True, help="directory holding run subdirectories")

    sub.add_parser("selftest", help="run the quick invariant suite")
    return p


def cli(argv) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError:
        return 1

    try:
        if args.command == "generate":
            src, tgt = sg.shift_preset(args.preset)
            spec = src if args.split == "source" else tgt
            scenes = sg.generate_set(spec, args.n, args.seed * 100_000_000 + 31_000_000)
            sg.save_set(args.out, scenes, with_ppm=args.ppm)
            print(f"wrote {args.n} {args.split} scenes for preset {args.preset} to {args.out}")
            return 0

        if args.command == "train":
            config = ExperimentConfig.load(args.config)
            if args.out:
                config = replace(config, output_dir=args.out)
            if args.preset:
                config = replace(config, shift_preset=args.preset)
            if args.seed is not None:
                config = replace(config, seeds=(args.seed,))
            records = run_experiment(config)
            emit_report(records, config.output_dir)
            print(f"finished {len(records)} runs under {config.output_dir}")
            return 0

        if args.command == "bounds":
            source, target = sg.shift_preset(args.preset)
            proxy_spec = sg.proxy_spec_for(args.preset)
            params = loc.init_locator(args.seed)
            src_test = sg.generate_set(source, 40, _SRC_TEST_SEED0)
            proxy_test = sg.generate_set(proxy_spec, 40, _PROXY_TEST_SEED0)
            div_st = th.domain_divergence(source, target, args.samples, args.seed).value
            div_pt = th.domain_divergence(proxy_spec, target, args.samples, args.seed).value
            defaults = ExperimentConfig()
            bound = th.BoundReport.build(
                source_risk=th.empirical_risk(params, src_test),
                proxy_risk=th.empirical_risk(params, proxy_test),
                div_st=div_st, div_pt=div_pt, gamma=args.gamma,
                m_s=defaults.steps * defaults.batch, m_p=defaults.steps * defaults.batch,
                vc_dim=defaults.vc_dim, delta=defaults.delta,
                lambda_hat=th.estimate_lambda(source, target, 0, args.seed))
            outdir = Path(args.out)
            outdir.mkdir(parents=True, exist_ok=True)
            (outdir / "bound.txt").write_text(bound.to_text())
            _write_csv(outdir / "bound_report.csv", "bound-report",
                       th.BoundReport.csv_header(), [bound.csv_row()])
            print(bound.to_text())
            return 0

        if args.command == "report":
            records = load_run_records(args.out)
            if not records:
                raise ConfigError(f"no run records found under {args.out}")
            emit_report(records, args.out)
            print(f"report written for {len(records)} records under {args.out}")
            return 0

        if args.command == "selftest":
            return _selftest()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DpdError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
