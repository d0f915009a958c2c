"""Metrics, baseline, robustness protocols, timing, and series export.

All error metrics are computed in raw flow space, aggregated over every
entry of every evaluated window:

    MAE   = mean |pred - truth|
    RMSE  = sqrt(mean (pred - truth)^2)
    wMAPE = sum |pred - truth| / sum truth

Robustness protocols perturb only the *inputs* of the test split (the raw
incomplete/unfinished matrices, before estimation); targets stay pristine.
Reports are comma-separated text with one header line; anything
non-deterministic (timing, machine info) goes into '#' comment lines so
repeat runs produce byte-identical payload rows.
"""

import platform
import time
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ConfigError, DomainError
from .od_data import enumerate_windows
from .training import WindowBatcher, predict


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    wmape: float  # None when the ground truth sums to zero
    windows: int
    seconds: float = 0.0
    param_count: int = 0

    def wmape_str(self):
        return "undefined" if self.wmape is None else f"{self.wmape:.8f}"


def metrics(preds, gts):
    """Aggregate MAE / RMSE / wMAPE over matched prediction/truth stacks."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape:
        raise DomainError(f"prediction shape {preds.shape} != truth shape {gts.shape}")
    if preds.ndim == 2:
        preds, gts = preds[None], gts[None]
    diff = preds - gts
    abs_sum = float(np.abs(diff).sum())
    count = diff.size
    gt_sum = float(gts.sum())
    return MetricsReport(
        mae=abs_sum / count,
        rmse=float(np.sqrt(np.square(diff).sum() / count)),
        wmape=(abs_sum / gt_sum) if gt_sum > 0 else None,
        windows=preds.shape[0],
    )


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------


class HistoricalAverage:
    """Predicts each interval's flow as its mean over the training days.

    With ``weekday_conditioned`` the mean is taken separately for weekdays
    and weekend days (days 5 and 6 of each week).
    """

    def __init__(self, dataset, train_days, weekday_conditioned=False):
        self.weekday_conditioned = weekday_conditioned
        days = np.asarray(list(train_days))
        od = dataset.od[days]
        if weekday_conditioned:
            weekend = (days % 7 == 5) | (days % 7 == 6)
            self._mean = {
                False: od[~weekend].mean(axis=0) if np.any(~weekend) else od.mean(axis=0),
                True: od[weekend].mean(axis=0) if np.any(weekend) else od.mean(axis=0),
            }
        else:
            self._mean = {False: od.mean(axis=0), True: od.mean(axis=0)}

    def predict(self, day, interval):
        weekend = day % 7 in (5, 6)
        return self._mean[weekend and self.weekday_conditioned][interval]

    def predict_windows(self, windows):
        return np.stack([self.predict(w.day, w.target_interval) for w in windows])


# ---------------------------------------------------------------------------
# evaluation drivers
# ---------------------------------------------------------------------------


def select_test_windows(view, horizon, split, require_week_history=True):
    return enumerate_windows(
        view, horizon, require_week_history=require_week_history, days=split.test
    )


def evaluate_model(model, view, normalizer, windows, batch_size=256):
    """Model metrics over the given windows; inputs from the (possibly
    perturbed) view, targets always pristine."""
    t0 = time.perf_counter()
    batcher = WindowBatcher(view, normalizer, use_omp=model.config.use_omp)
    preds = predict(model, batcher, windows, batch_size=batch_size)
    _, gt = batcher.raw_targets(windows)
    report = metrics(preds, gt)
    return MetricsReport(
        mae=report.mae,
        rmse=report.rmse,
        wmape=report.wmape,
        windows=report.windows,
        seconds=time.perf_counter() - t0,
        param_count=model.param_count(),
    )


def evaluate_baseline(baseline, view, windows):
    preds = baseline.predict_windows(windows)
    gt = np.stack([view.target_od[w.day, w.target_interval] for w in windows])
    return metrics(preds, gt)


# ---------------------------------------------------------------------------
# input perturbation (robustness protocols)
# ---------------------------------------------------------------------------


class EvalView:
    """A dataset stand-in whose *input* matrices are perturbed on some days
    while targets come from the pristine dataset."""

    def __init__(self, dataset, iod, uod):
        self.base = dataset
        self.iod = iod
        self.uod = uod
        self.od = iod + uod
        self.unf = uod.sum(axis=3)

    @property
    def n(self):
        return self.base.n

    @property
    def days(self):
        return self.base.days

    @property
    def intervals_per_day(self):
        return self.base.intervals_per_day

    @property
    def target_od(self):
        return self.base.od


def inject_noise(dataset, sigma, seed, days):
    """Additive i.i.d. Gaussian noise on the raw input matrices of the given
    days, clamped at zero.  sigma=0 returns an identical view."""
    if sigma < 0:
        raise DomainError(f"noise sigma must be >= 0, got {sigma}")
    iod = dataset.iod.copy()
    uod = dataset.uod.copy()
    if sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA0]))
        idx = np.asarray(list(days))
        shape = dataset.iod[idx].shape
        iod[idx] = np.maximum(iod[idx] + rng.normal(0.0, sigma, shape).astype(np.float32), 0.0)
        uod[idx] = np.maximum(uod[idx] + rng.normal(0.0, sigma, shape).astype(np.float32), 0.0)
    return EvalView(dataset, iod, uod)


def inject_mask(dataset, ratio, seed, days):
    """Zero out a seeded uniform fraction of (pair, interval) input cells on
    the given days; one mask cell hides both the finished and unfinished
    counts of that pair in that interval."""
    if not 0.0 <= ratio <= 1.0:
        raise DomainError(f"mask ratio must be in [0, 1], got {ratio}")
    iod = dataset.iod.copy()
    uod = dataset.uod.copy()
    if ratio > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA1]))
        idx = np.asarray(list(days))
        mask = rng.random(dataset.iod[idx].shape) < ratio
        iod[idx] = np.where(mask, 0.0, iod[idx])
        uod[idx] = np.where(mask, 0.0, uod[idx])
    return EvalView(dataset, iod, uod)


def relative_increment(clean, noisy):
    """Per-metric relative error increase, as fractions."""

    def rel(a, b):
        if a is None or b is None or a == 0:
            return None
        return (b - a) / a

    return {
        "mae": rel(clean.mae, noisy.mae),
        "rmse": rel(clean.rmse, noisy.rmse),
        "wmape": rel(clean.wmape, noisy.wmape),
    }


# ---------------------------------------------------------------------------
# efficiency / scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerfRow:
    n: int
    layers: int
    channels: int
    horizon: int
    backend: str
    forward_ms: float
    train_step_ms: float
    param_count: int


def _median_time(fn, repeats, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))


def perf_report(grid, repeats=5, warmup=3, backends=None, seed=0):
    """Median forward and train-step times over a configuration grid.

    ``grid`` is an iterable of (n, layers, channels, horizon) tuples.
    Measures the full dual-branch forward on one window pair, and one
    training step (forward, backward, Adam) on the same inputs.
    """
    from .autodiff import Tape
    from .model import ModelConfig, ODMixer
    from .training import Adam, dual_mae_loss

    if repeats < 5:
        raise ConfigError(f"need >= 5 timed repeats, got {repeats}")
    if warmup < 3:
        raise ConfigError(f"need >= 3 warmup runs, got {warmup}")
    rows = []
    names = backends or [backend.active_name()]
    for name in names:
        previous = backend.use(name)
        try:
            for n, layers, channels, horizon in grid:
                cfg = ModelConfig(n=n, layers=layers, channels=channels, horizon=horizon)
                model = ODMixer(cfg, dtype=np.float32, seed=seed)
                rng = np.random.default_rng(np.random.SeedSequence([seed, n, layers]))
                prev = rng.standard_normal((1, n, n, horizon)).astype(np.float32)
                cur = rng.standard_normal((1, n, n, horizon)).astype(np.float32)
                gt = rng.standard_normal((1, n, n)).astype(np.float32)
                optimizer = Adam(model.parameters())

                forward_ms = _median_time(lambda: model.forward(prev, cur), repeats, warmup)

                def step():
                    model.zero_grad()
                    with Tape() as tape:
                        pred_prev, pred_cur = model.forward(prev, cur)
                        loss = dual_mae_loss(pred_prev, pred_cur, gt, gt)
                    tape.backward(loss)
                    optimizer.step()

                step_ms = _median_time(step, repeats, warmup)
                rows.append(
                    PerfRow(
                        n=n,
                        layers=layers,
                        channels=channels,
                        horizon=horizon,
                        backend=name,
                        forward_ms=forward_ms,
                        train_step_ms=step_ms,
                        param_count=model.param_count(),
                    )
                )
        finally:
            backend.use(previous)
    return rows


def write_perf_report(rows, path):
    with open(path, "w") as fh:
        fh.write(f"# machine: {platform.machine()} {platform.processor()}\n")
        fh.write(f"# python: {platform.python_version()}\n")
        fh.write("n,layers,channels,horizon,backend,forward_ms,train_step_ms,param_count\n")
        for r in rows:
            fh.write(
                f"{r.n},{r.layers},{r.channels},{r.horizon},{r.backend},"
                f"{r.forward_ms:.4f},{r.train_step_ms:.4f},{r.param_count}\n"
            )


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = {
    "full": {},
    "no_omp": {"use_omp": False},
    "no_cm": {"use_channel_mixer": False},
    "no_om": {"use_origin_mixer": False},
    "no_dm": {"use_des_mixer": False},
    "no_mm": {"use_multiview": False},
    "no_btl": {"use_btl": False},
    "no_pb": {"use_prev_branch": False, "use_btl": False},
}


def run_ablation(dataset, model_cfg, train_cfg, variants=None, model_seed=None):
    """Train and evaluate one model per ablation variant.

    Variants are runtime flags on the same implementation, so each run
    differs from the full model by exactly the named switches.  Returns
    (variant name, metrics report) pairs in the requested order.
    """
    from .model import ODMixer
    from .training import train

    names = list(variants) if variants is not None else list(ABLATION_VARIANTS)
    unknown = [v for v in names if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; known: {list(ABLATION_VARIANTS)}")

    results = []
    for name in names:
        cfg = model_cfg.ablated(**ABLATION_VARIANTS[name])
        model = ODMixer(
            cfg, dtype=np.float32, seed=train_cfg.seed if model_seed is None else model_seed
        )
        outcome = train(model, dataset, train_cfg)
        split = outcome.split
        windows = select_test_windows(dataset, cfg.horizon, split, train_cfg.require_week_history)
        report = evaluate_model(model, dataset, outcome.normalizer, windows)
        results.append((name, report))
    return results


def write_metrics_rows(rows, path):
    """rows: (label, MetricsReport) pairs."""
    with open(path, "w") as fh:
        fh.write("label,mae,rmse,wmape,windows,param_count\n")
        for label, r in rows:
            fh.write(
                f"{label},{r.mae:.8f},{r.rmse:.8f},{r.wmape_str()},{r.windows},{r.param_count}\n"
            )
        fh.write(f"# seconds: {' '.join(f'{label}={r.seconds:.3f}' for label, r in rows)}\n")


# ---------------------------------------------------------------------------
# per-pair series export
# ---------------------------------------------------------------------------


def export_series(model, dataset, normalizer, windows, pairs, path):
    """Write truth and prediction per requested OD pair for each window:
    rows of {day, interval, pair_i, pair_j, truth, prediction}."""
    n = dataset.n
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise DomainError(f"pair ({i}, {j}) outside station range [0, {n})")
    batcher = WindowBatcher(dataset, normalizer, use_omp=model.config.use_omp)
    preds = predict(model, batcher, windows)
    with open(path, "w") as fh:
        fh.write("day,interval,pair_i,pair_j,truth,prediction\n")
        for w, pred in zip(windows, preds):
            truth = dataset.target_od[w.day, w.target_interval]
            for i, j in pairs:
                fh.write(
                    f"{w.day},{w.target_interval},{i},{j},"
                    f"{truth[i, j]:.6f},{pred[i, j]:.6f}\n"
                )
