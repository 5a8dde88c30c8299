"""Training and evaluation protocol: focal loss, AdamW with exponential
decay, early stopping, stratified k-fold splits and the metric suite."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .attention import caga_param_count, parse_bool
from .dataio import AugmentPolicy, Dataset, NormStats, apply_zscore, augment_dataset, fit_zscore
from .errors import ConfigError, ContractError, StratificationError
from .layers import DEFAULT_SEED, Module
from .model import CagaClassifier, ModelConfig, predict
from .tensor import ComputationTape, Tensor, backward, exp, log, mean, mul, no_grad, power, sub, sum_


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    alpha: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("focal gamma must be non-negative")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
            if any(a < 0 for a in self.alpha):
                raise ConfigError("focal alpha weights must be non-negative")

    def weights(self, num_classes: int) -> np.ndarray:
        if self.alpha is None:
            return np.ones(num_classes)
        if len(self.alpha) != num_classes:
            raise ConfigError(f"alpha has {len(self.alpha)} entries for {num_classes} classes")
        return np.asarray(self.alpha)


def focal_loss(logits: Tensor, targets, cfg: FocalLossConfig | None = None) -> Tensor:
    """Batch mean of -alpha_t * (1 - p_t)^gamma * log p_t."""
    cfg = cfg or FocalLossConfig()
    targets = np.asarray(targets, dtype=np.int64)
    B, C = logits.shape
    if targets.shape != (B,):
        raise ContractError(f"expected {B} targets, got shape {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= C:
        raise ContractError(f"targets must lie in [0, {C})")
    onehot = np.zeros((B, C), dtype=logits.dtype)
    onehot[np.arange(B), targets] = 1.0
    shifted = sub(logits, Tensor(logits.data.max(axis=1, keepdims=True)))
    lse = log(sum_(exp(shifted), axis=1))
    logp_t = sub(sum_(mul(shifted, Tensor(onehot)), axis=1), lse)
    alpha_t = Tensor(cfg.weights(C)[targets].astype(logits.dtype))
    per_sample = mul(alpha_t, logp_t)
    if cfg.gamma > 0:
        one_minus = sub(1.0, exp(logp_t))
        if cfg.gamma < 1:
            one_minus = one_minus + 1e-12  # keeps d/dp (1-p)^gamma finite at p=1
        per_sample = mul(power(one_minus, cfg.gamma), per_sample)
    return -mean(per_sample)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """One AdamW update in place; weight decay is decoupled from the moments."""
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match the parameter list")
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if m.shape != p.shape:
            raise ContractError("optimizer state shape mismatch")
        p.data *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState.zeros_like(self.params)

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                   self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at_epoch(lr0: float, gamma: float, epoch: int) -> float:
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    return lr0 * gamma ** epoch


def early_stop_check(history: Sequence[float], patience: int) -> bool:
    """True once the best value is ``patience`` or more epochs old.

    Only strict improvements reset the counter.
    """
    if not history:
        raise ContractError("history must be non-empty")
    best_idx = 0
    for i, v in enumerate(history):
        if v < history[best_idx]:
            best_idx = i
    return len(history) - 1 - best_idx >= patience


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    lr_decay: float = 0.95
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    seed: int = DEFAULT_SEED
    augment: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.lr_decay <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and decay must be positive, weight decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

class Fold(NamedTuple):
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _quotas(counts: np.ndarray, total: int) -> np.ndarray:
    """Split ``total`` across classes proportionally (largest remainder)."""
    if counts.sum() == 0:
        return np.zeros_like(counts)
    exact = counts * total / counts.sum()
    q = np.floor(exact).astype(int)
    order = np.argsort(-(exact - q), kind="stable")
    q[order[: total - q.sum()]] += 1
    return np.minimum(q, counts)


def kfold_split(num_samples: int, k: int, seed: int = DEFAULT_SEED, labels=None,
                val_fraction: float = 0.2) -> list[Fold]:
    """Stratified k-fold partition with a stratified train/validation split per fold.

    Test folds are dealt class by class, round robin, from per-class
    shuffles, so every fold receives floor or ceil of each class's share.
    Within a fold, ``val_fraction`` of the remaining samples (rounded) go
    to validation.
    """
    if k < 2:
        raise ContractError(f"k must be at least 2, got {k}")
    if num_samples < k:
        raise ContractError(f"need at least k={k} samples, got {num_samples}")
    labels = np.zeros(num_samples, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if labels.shape != (num_samples,):
        raise ContractError("labels must have one entry per sample")
    classes = np.unique(labels)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(num_samples, dtype=np.int64)
    pos = 0
    for c in classes:
        members = np.flatnonzero(labels == c)
        if len(members) < k:
            raise StratificationError(f"class {c} has {len(members)} samples, fewer than k={k} folds")
        members = rng.permutation(members)
        fold_of[members] = (pos + np.arange(len(members))) % k
        pos += len(members)
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        rest = np.flatnonzero(fold_of != f)
        rest_labels = labels[rest]
        counts = np.array([np.sum(rest_labels == c) for c in classes])
        quotas = _quotas(counts, int(round(val_fraction * len(rest))))
        val_parts = []
        for c, q in zip(classes, quotas):
            members = rng.permutation(rest[rest_labels == c])
            val_parts.append(members[:q])
        val = np.sort(np.concatenate(val_parts)) if val_parts else np.array([], dtype=np.int64)
        train = np.setdiff1d(rest, val)
        folds.append(Fold(train, val, test))
    return folds


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    class_accuracy: np.ndarray
    confusion: np.ndarray

    def as_dict(self, class_names: Sequence[str] | None = None) -> dict[str, float]:
        names = class_names or [str(i) for i in range(len(self.class_accuracy))]
        row = {m: float(getattr(self, m)) for m in METRIC_NAMES}
        row.update({f"acc_{n}": float(a) for n, a in zip(names, self.class_accuracy)})
        return row


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    """Macro-averaged metrics; classes with no support (or no predictions) score 0."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ContractError("cannot compute metrics on zero samples")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return MetricsReport(float(tp.sum() / total), float(precision.mean()), float(recall.mean()),
                         float(f1.mean()), recall, cm)


def compute_metrics(predictions, labels, num_classes: int) -> MetricsReport:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError("predictions and labels differ in length")
    if labels.size == 0:
        raise ContractError("cannot compute metrics on an empty set")
    return metrics_from_confusion(confusion_matrix(predictions, labels, num_classes))


@dataclass
class FoldSummary:
    reports: list[MetricsReport]
    mean: dict[str, float]
    std: dict[str, float]
    class_names: list[str] | None = None


def aggregate_folds(reports: Sequence[MetricsReport], class_names: Sequence[str] | None = None) -> FoldSummary:
    """Per-metric mean and sample (n-1) standard deviation; a single report has std 0."""
    if not reports:
        raise ContractError("need at least one report")
    rows = [r.as_dict(class_names) for r in reports]
    keys = list(rows[0])
    mean_, std_ = {}, {}
    for key in keys:
        values = np.array([row[key] for row in rows], dtype=np.float64)
        mean_[key] = float(np.sort(values).sum() / len(values))
        std_[key] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return FoldSummary(list(reports), mean_, std_, list(class_names) if class_names else None)


def format_folds_csv(summary: FoldSummary, class_names: Sequence[str] | None = None) -> str:
    """One row per fold plus a ``mean±std`` summary row."""
    keys = list(summary.mean)
    class_names = class_names or summary.class_names
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fold"] + keys)
    for i, report in enumerate(summary.reports):
        row = report.as_dict(class_names)
        writer.writerow([i] + [f"{row[k]:.6f}" for k in keys])
    writer.writerow(["mean±std"] + [f"{summary.mean[k]:.6f}±{summary.std[k]:.6f}" for k in keys])
    return buf.getvalue()


def format_summary_csv(summary: FoldSummary) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "mean", "std"])
    for key in summary.mean:
        writer.writerow([key, f"{summary.mean[key]:.6f}", f"{summary.std[key]:.6f}"])
    return buf.getvalue()


def format_table(summary: FoldSummary) -> str:
    width = max(len(k) for k in summary.mean)
    lines = [f"{'metric':<{width}}  mean ± std"]
    for key in summary.mean:
        lines.append(f"{key:<{width}}  {summary.mean[key]:.4f} ± {summary.std[key]:.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def predict_logits(model: Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    outs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(model(Tensor(images[start:start + batch_size])).data)
    model.train(was_training)
    return np.concatenate(outs)


def evaluate(model: Module, ds: Dataset, batch_size: int = 64) -> MetricsReport:
    logits = predict_logits(model, ds.images, batch_size)
    return compute_metrics(predict(logits), ds.labels, ds.num_classes)


def dataset_loss(model: Module, ds: Dataset, focal: FocalLossConfig, batch_size: int = 64) -> float:
    logits = predict_logits(model, ds.images, batch_size)
    with no_grad():
        return focal_loss(Tensor(logits), ds.labels, focal).item()


def fit(model: Module, train_raw: Dataset, val_raw: Dataset, cfg: TrainConfig,
        focal: FocalLossConfig | None = None, stats: NormStats | None = None,
        policy: AugmentPolicy | None = None, log: Callable[[str], None] | None = None) -> TrainHistory:
    """Train on un-normalized [0,1] splits; z-score stats come from ``train_raw``.

    The weights with the lowest validation loss are restored at the end.
    """
    focal = focal or FocalLossConfig()
    stats = stats or fit_zscore(train_raw)
    val = apply_zscore(val_raw, stats)
    static_train = apply_zscore(train_raw, stats)
    opt = AdamW(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_state = None
    n = len(train_raw)
    model.train()
    for epoch in range(cfg.max_epochs):
        opt.lr = lr_at_epoch(cfg.lr, cfg.lr_decay, epoch)
        if cfg.augment:
            train = apply_zscore(augment_dataset(train_raw, cfg.seed, policy or AugmentPolicy(), epoch), stats)
        else:
            train = static_train
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with ComputationTape():
                loss = focal_loss(model(Tensor(train.images[idx])), train.labels[idx], focal)
                opt.zero_grad()
                backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        history.train_loss.append(total / n)
        history.lr.append(opt.lr)
        history.val_loss.append(dataset_loss(model, val, focal, cfg.batch_size))
        if history.best_epoch < 0 or history.val_loss[-1] < history.val_loss[history.best_epoch]:
            history.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if log:
            log(f"epoch {epoch:3d} lr {opt.lr:.3g} train {history.train_loss[-1]:.4f} val {history.val_loss[-1]:.4f}")
        if early_stop_check(history.val_loss, cfg.patience):
            history.stopped_early = True
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


# ---------------------------------------------------------------------------
# Cross-validation and ablation
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    test: MetricsReport
    train_accuracy: float
    history: TrainHistory
    model: Module | None = None
    stats: NormStats | None = None


@dataclass
class CvResult:
    folds: list[FoldResult]
    summary: FoldSummary
    class_names: list[str]

    @property
    def mean_test_accuracy(self) -> float:
        return self.summary.mean["accuracy"]

    @property
    def train_accuracies(self) -> list[float]:
        return [f.train_accuracy for f in self.folds]


def run_fold(ds: Dataset, split: Fold, fold: int, model_cfg: ModelConfig, train_cfg: TrainConfig,
             focal: FocalLossConfig | None = None, keep_model: bool = True,
             log: Callable[[str], None] | None = None) -> FoldResult:
    train_raw = ds.subset(split.train, "train")
    val_raw = ds.subset(split.val, "val")
    test_raw = ds.subset(split.test, "test")
    stats = fit_zscore(train_raw)
    model = CagaClassifier(model_cfg, seed=train_cfg.seed)
    history = fit(model, train_raw, val_raw, train_cfg, focal, stats, log=log)
    test_report = evaluate(model, apply_zscore(test_raw, stats))
    train_acc = evaluate(model, apply_zscore(train_raw, stats)).accuracy
    return FoldResult(fold, test_report, train_acc, history, model if keep_model else None, stats)


def _run_fold_job(args):
    return run_fold(*args, keep_model=True)


def run_cv(ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, k: int = 10,
           focal: FocalLossConfig | None = None, folds: Sequence[int] | None = None,
           jobs: int = 1, log: Callable[[str], None] | None = None) -> CvResult:
    """k-fold protocol; ``folds`` restricts which of the k folds are trained."""
    if model_cfg.num_classes != ds.num_classes:
        model_cfg = replace(model_cfg, num_classes=ds.num_classes)
    splits = kfold_split(len(ds), k, train_cfg.seed, ds.labels)
    chosen = list(range(k)) if folds is None else list(folds)
    if any(not 0 <= f < k for f in chosen):
        raise ContractError(f"fold indices must lie in [0, {k})")
    jobs_args = [(ds, splits[f], f, model_cfg, train_cfg, focal) for f in chosen]
    if jobs > 1 and len(chosen) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold_job, jobs_args))
    else:
        results = []
        for args in jobs_args:
            if log:
                log(f"fold {args[2]}")
            results.append(run_fold(*args, log=log))
    summary = aggregate_folds([r.test for r in results], ds.class_names)
    return CvResult(results, summary, list(ds.class_names))


# Ablation rows: (cascading in CAA, CAA, CGA)
TABLE_V_GRID = ((True, True, False), (False, True, True), (True, True, True))


@dataclass
class AblationRow:
    cascade_dilations: bool
    caa: bool
    cascade_heads: bool
    params: int
    caga_params: int
    accuracy: float
    probe_logits: np.ndarray | None = None


def run_ablation(ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, k: int = 10,
                 grid: Sequence[tuple[bool, bool, bool]] = TABLE_V_GRID,
                 focal: FocalLossConfig | None = None, folds: Sequence[int] | None = None,
                 jobs: int = 1, probe: np.ndarray | None = None,
                 log: Callable[[str], None] | None = None) -> list[AblationRow]:
    """Train each toggle combination from the same seed; report params and fold-mean accuracy."""
    rows = []
    for cascade_dilations, caa, cascade_heads in grid:
        if not caa:
            raise ConfigError("the CAA column cannot be disabled: CAA is the per-head processor")
        caga = model_cfg.caga.with_toggles(cascade_dilations, cascade_heads)
        cfg = replace(model_cfg, caga=caga, num_classes=ds.num_classes)
        if log:
            log(f"ablation cascade_dilations={cascade_dilations} cascade_heads={cascade_heads}")
        result = run_cv(ds, cfg, train_cfg, k, focal, folds, jobs)
        model = result.folds[0].model
        probe_logits = None
        if probe is not None and model is not None:
            probe_logits = predict_logits(model, apply_zscore(
                Dataset(probe, np.zeros(len(probe), dtype=np.int64), ds.class_names), result.folds[0].stats).images)
        params = CagaClassifier(cfg, seed=train_cfg.seed).num_parameters()
        rows.append(AblationRow(cascade_dilations, caa, cascade_heads, params,
                                caga_param_count(caga, cfg.stem_channels) * cfg.num_caga_blocks,
                                result.mean_test_accuracy, probe_logits))
    return rows


def format_ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cascading_in_caa", "caa", "cga", "params", "accuracy"])
    for r in rows:
        writer.writerow([int(r.cascade_dilations), int(r.caa), int(r.cascade_heads), r.params, f"{r.accuracy:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# key=value serialization
# ---------------------------------------------------------------------------

TRAIN_KEYS = ("lr", "lr_decay", "weight_decay", "batch_size", "max_epochs", "patience", "augment",
              "focal_gamma", "focal_alpha")


def train_config_to_kv(cfg: TrainConfig, focal: FocalLossConfig | None = None) -> dict:
    focal = focal or FocalLossConfig()
    values = {
        "lr": repr(cfg.lr),
        "lr_decay": repr(cfg.lr_decay),
        "weight_decay": repr(cfg.weight_decay),
        "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs,
        "patience": cfg.patience,
        "augment": cfg.augment,
        "focal_gamma": repr(focal.gamma),
    }
    if focal.alpha is not None:
        values["focal_alpha"] = [repr(a) for a in focal.alpha]
    return values


def train_config_from_kv(values: dict[str, str], base: TrainConfig | None = None,
                         focal: FocalLossConfig | None = None) -> tuple[TrainConfig, FocalLossConfig]:
    base = base or TrainConfig()
    focal = focal or FocalLossConfig()
    try:
        cfg = replace(
            base,
            lr=float(values.get("lr", base.lr)),
            lr_decay=float(values.get("lr_decay", base.lr_decay)),
            weight_decay=float(values.get("weight_decay", base.weight_decay)),
            batch_size=int(values.get("batch_size", base.batch_size)),
            max_epochs=int(values.get("max_epochs", base.max_epochs)),
            patience=int(values.get("patience", base.patience)),
            augment=parse_bool(values["augment"]) if "augment" in values else base.augment,
        )
        alpha = focal.alpha
        if "focal_alpha" in values:
            alpha = tuple(float(a) for a in values["focal_alpha"].split(",")) if values["focal_alpha"] else None
        focal = FocalLossConfig(float(values.get("focal_gamma", focal.gamma)), alpha)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg, focal
