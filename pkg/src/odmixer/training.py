"""Dual-branch L1 training with Adam and validation-based early stopping.

Windows are drawn from day-contiguous train/validation/test splits.  Each
batch assembles, per window, the previous day's complete matrices and the
current day's estimated matrices (or raw incomplete ones under the
no-estimation ablation), z-scored with statistics fitted on the training
split.  The loss is the sum of the two branches' mean absolute errors in
normalized space; metrics are always computed in raw space after
denormalization and clamping at zero.

Everything is seeded: parameter init, batch shuffling, and the optimizer
are deterministic, so one seed and config give bit-identical checkpoints
on repeat runs (for a fixed machine, backend, and BLAS configuration).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import ConfigError, NumericError
from .od_data import enumerate_windows
from .preprocess import CurInputCache, Normalizer, clamp_nonneg


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_days: int = 20
    val_days: int = 4
    test_days: int = 4
    require_week_history: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if min(self.train_days, self.val_days, self.test_days) < 1:
            raise ConfigError("every split needs at least one day")


@dataclass(frozen=True)
class DaySplit:
    train: range
    val: range
    test: range

    @classmethod
    def from_config(cls, total_days, cfg):
        need = cfg.train_days + cfg.val_days + cfg.test_days
        if need > total_days:
            raise ConfigError(f"splits need {need} days but the dataset has {total_days}")
        a, b = cfg.train_days, cfg.train_days + cfg.val_days
        return cls(train=range(0, a), val=range(a, b), test=range(b, need))


def dual_mae_loss(pred_prev, pred_cur, gt_prev, gt_cur):
    """Mean absolute error of each branch, summed; per window the mean runs
    over all n^2 pairs, and a batch averages its windows."""

    def branch(pred, gt):
        diff = ad.sub(pred, ad.as_tensor(gt))
        return ad.scale(ad.sum_all(ad.absolute(diff)), 1.0 / diff.size)

    cur = branch(pred_cur, gt_cur)
    if pred_prev is None:
        return cur
    return ad.add(branch(pred_prev, gt_prev), cur)


class Adam:
    """Standard bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = [np.zeros(p.tensor.shape, dtype=p.tensor.dtype) for p in self.params]
        self._v = [np.zeros(p.tensor.shape, dtype=p.tensor.dtype) for p in self.params]

    def step(self):
        """One update from the gradients currently stored on the parameters.

        Parameters without a gradient (unreachable under the current
        ablation) are treated as having zero gradient.  Non-finite
        gradients abort the step before any parameter changes.
        """
        grads = []
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                g = np.zeros(p.tensor.shape, dtype=p.tensor.dtype)
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {p.name}")
            grads.append(g)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.tensor.assign_(p.tensor.data - update)


class WindowBatcher:
    """Assembles normalized model inputs and targets for lists of windows.

    Inputs come from the view's (possibly perturbed) matrices; targets come
    from the pristine complete matrices.  Current-branch inputs are
    estimated completions unless the estimation ablation is off, in which
    case the raw incomplete matrices are used.
    """

    def __init__(self, view, normalizer, use_omp=True, strict_history=True):
        self.view = view
        self.normalizer = normalizer
        self.use_omp = use_omp
        self._cache = CurInputCache(view, strict=strict_history) if use_omp else None

    def _cur_window(self, w):
        if self.use_omp:
            return self._cache.window(w.day, w.interval, w.horizon)
        lo = w.interval - w.horizon + 1
        return np.moveaxis(self.view.iod[w.day, lo : w.interval + 1], 0, -1)

    def inputs(self, windows, dtype=np.float32):
        prev, cur = [], []
        for w in windows:
            lo = w.interval - w.horizon + 1
            prev.append(np.moveaxis(self.view.od[w.day - 1, lo : w.interval + 1], 0, -1))
            cur.append(self._cur_window(w))
        prev = self.normalizer.apply(np.stack(prev)).astype(dtype)
        cur = self.normalizer.apply(np.stack(cur)).astype(dtype)
        return prev, cur

    def raw_targets(self, windows):
        gt_prev = np.stack([self.view.target_od[w.day - 1, w.target_interval] for w in windows])
        gt_cur = np.stack([self.view.target_od[w.day, w.target_interval] for w in windows])
        return gt_prev, gt_cur

    def normalized_targets(self, windows, dtype=np.float32):
        gt_prev, gt_cur = self.raw_targets(windows)
        return (
            self.normalizer.apply(gt_prev).astype(dtype),
            self.normalizer.apply(gt_cur).astype(dtype),
        )


def predict(model, batcher, windows, batch_size=256):
    """Raw-space next-interval predictions for the current branch, clamped
    at zero: array of shape (len(windows), n, n)."""
    outs = []
    for lo in range(0, len(windows), batch_size):
        chunk = windows[lo : lo + batch_size]
        prev, cur = batcher.inputs(chunk, dtype=model.dtype)
        _, pred_cur = model.forward(prev, cur)
        outs.append(pred_cur.data)
    preds = np.concatenate(outs) if outs else np.zeros((0, model.config.n, model.config.n))
    return clamp_nonneg(batcher.normalizer.invert(preds))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    val_wmape: float
    seconds: float


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_wmape: float = float("inf")
    normalizer: Normalizer = None
    split: DaySplit = None


def fit_normalizer(dataset, split):
    """Z-score statistics over the training split's complete matrices."""
    return Normalizer.fit(dataset.od[split.train.start : split.train.stop])


def train(model, dataset, cfg, history_path=None):
    """Optimize the model on the dataset's training split.

    Per epoch: a seeded shuffle of the training windows, minibatch forward /
    backward / Adam steps, then validation wMAPE; stops once validation has
    not improved for ``patience`` epochs and restores the best parameters.
    """
    from .evaluation import metrics  # local import keeps module layers acyclic

    split = DaySplit.from_config(dataset.days, cfg)
    normalizer = fit_normalizer(dataset, split)
    horizon = model.config.horizon
    train_windows = enumerate_windows(
        dataset, horizon, require_week_history=cfg.require_week_history, days=split.train
    )
    val_windows = enumerate_windows(
        dataset, horizon, require_week_history=cfg.require_week_history, days=split.val
    )
    if not train_windows or not val_windows:
        raise ConfigError(
            f"empty window set (train={len(train_windows)}, val={len(val_windows)}); "
            "check split sizes against the history requirement"
        )

    batcher = WindowBatcher(
        dataset,
        normalizer,
        use_omp=model.config.use_omp,
        strict_history=cfg.require_week_history,
    )
    optimizer = Adam(
        model.parameters(),
        learning_rate=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
    )
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F]))

    result = TrainResult(normalizer=normalizer, split=split)
    best_params = None
    stale = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_windows))
        loss_sum, window_count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_windows[i] for i in order[lo : lo + cfg.batch_size]]
            prev, cur = batcher.inputs(batch, dtype=model.dtype)
            gt_prev, gt_cur = batcher.normalized_targets(batch, dtype=model.dtype)
            model.zero_grad()
            with Tape() as tape:
                pred_prev, pred_cur = model.forward(prev, cur)
                loss = dual_mae_loss(pred_prev, pred_cur, gt_prev, gt_cur)
            tape.backward(loss)
            optimizer.step()
            loss_sum += loss.item() * len(batch)
            window_count += len(batch)

        val_preds = predict(model, batcher, val_windows, batch_size=max(cfg.batch_size, 64))
        _, val_gt = batcher.raw_targets(val_windows)
        report = metrics(val_preds, val_gt)
        val_wmape = report.wmape if report.wmape is not None else float("nan")
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / window_count,
            val_mae=report.mae,
            val_rmse=report.rmse,
            val_wmape=val_wmape,
            seconds=time.perf_counter() - t0,
        )
        result.history.append(record)

        if val_wmape < result.best_val_wmape:
            result.best_val_wmape = val_wmape
            result.best_epoch = epoch
            best_params = {p.name: p.tensor.data.copy() for p in model.parameters()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if best_params is not None:
        for p in model.parameters():
            p.tensor.assign_(best_params[p.name])
    if history_path is not None:
        write_history(result.history, history_path)
    return result


def write_history(records, path):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_mae,val_rmse,val_wmape,seconds\n")
        for r in records:
            fh.write(
                f"{r.epoch},{r.train_loss:.8f},{r.val_mae:.8f},"
                f"{r.val_rmse:.8f},{r.val_wmape:.8f},{r.seconds:.3f}\n"
            )


def read_history(path):
    records = []
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("epoch,"):
            raise ConfigError(f"{path}: not a history file")
        for line in fh:
            e, tl, ma, rm, wm, sec = line.strip().split(",")
            records.append(
                EpochRecord(int(e), float(tl), float(ma), float(rm), float(wm), float(sec))
            )
    return records
