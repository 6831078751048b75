"""Training loop, stratified k-fold cross-validation and the metric suite."""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import ForestConfig, GbmConfig, predict_baseline, train_gbm, train_random_forest
from .data import Dataset, impute_missing, zscore
from .errors import (
    ConfigurationError,
    ImputationError,
    StandardizationError,
    StratificationError,
    TrainingError,
    UndefinedMetricError,
)
from .features import feature_matrix
from .models import (
    Model,
    ModelConfig,
    build_model,
    classical_cnn_config,
    densenet1d_config,
    desk_configs,
    multiscale_densenet_config,
)
from .tensor import bce_loss, bce_with_logits

log = logging.getLogger(__name__)

MODEL_KINDS = ("rf", "gbm", "cnn", "densenet1d", "ms-densenet")
NEURAL_KINDS = ("cnn", "densenet1d", "ms-densenet")
_ALIASES = {"ms_densenet": "ms-densenet", "msdensenet": "ms-densenet", "classical-cnn": "cnn"}


def normalize_kind(kind: str) -> str:
    k = kind.strip().lower()
    k = _ALIASES.get(k, k)
    if k not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}; valid kinds: {', '.join(MODEL_KINDS)}")
    return k


# ---------------------------------------------------------------------------
# metrics


def logloss(p, y) -> float:
    return bce_loss(p, y)


def auc(scores, y) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties get average ranks)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(y).ravel()
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # average rank of each tie group, 1-based
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], len(scores)]
    ranks = np.empty(len(scores))
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# folds


def kfold_split(n: int, k: int = 5, labels=None, seed: int = 0) -> list[np.ndarray]:
    """Stratified k-fold partition of ``range(n)``.

    Each class is shuffled and dealt round-robin, continuing the deal across
    classes, so fold sizes and per-fold class counts differ by at most one.
    """
    if k < 2 or n < k:
        raise ConfigurationError(f"need 2 <= k <= n, got k={k}, n={n}")
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)
    if len(labels) != n:
        raise ConfigurationError("labels length must equal n")
    rng = np.random.default_rng(seed)
    dealt = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise StratificationError(f"class {cls} has {len(members)} members, fewer than k={k}")
        dealt.append(rng.permutation(members))
    order = np.concatenate(dealt)
    assignment = np.arange(n) % k
    return [np.sort(order[assignment == f]) for f in range(k)]


def stratified_holdout(labels, fraction: float, seed: int):
    """Split indices into (train, holdout) with ``fraction`` of each class held out."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    hold = []
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        hold.append(members[:max(1, int(round(fraction * len(members))))])
    hold = np.sort(np.concatenate(hold))
    train = np.setdiff1d(np.arange(len(labels)), hold)
    return train, hold


# ---------------------------------------------------------------------------
# optimisation


class Optimizer(str, enum.Enum):
    ADAM = "ADAM"
    SGD_MOMENTUM = "SGD_MOMENTUM"


@dataclass
class TrainConfig:
    optimizer: Optimizer = Optimizer.ADAM
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 40
    early_stop_patience: int = 5
    seed: int = 0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1

    def __post_init__(self):
        self.optimizer = Optimizer(self.optimizer)
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.max_epochs < 0:
            raise ConfigurationError("batch_size, patience must be >= 1 and max_epochs >= 0")


class Adam:
    def __init__(self, slots, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.slots = slots
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(v) for _, v, _ in slots]
        self.v = [np.zeros_like(v) for _, v, _ in slots]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for (_, w, g), m, v in zip(self.slots, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            w -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


class SgdMomentum:
    def __init__(self, slots, lr, momentum=0.9):
        self.slots = slots
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(v) for _, v, _ in slots]

    def step(self):
        for (_, w, g), vel in zip(self.slots, self.velocity):
            vel *= self.momentum
            vel -= self.lr * g
            w += vel


def make_optimizer(model: Model, cfg: TrainConfig):
    slots = model.slots()
    if cfg.optimizer is Optimizer.ADAM:
        return Adam(slots, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SgdMomentum(slots, cfg.learning_rate, cfg.momentum)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def rows(self):
        return [(i + 1, t, v) for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss))]


def _snapshot(model: Model):
    return [v.copy() for _, v in model.state()]


def _restore(model: Model, snap):
    for (_, v), s in zip(model.state(), snap):
        v[...] = s


def evaluate_loss(model: Model, X, y) -> float:
    return logloss(model.predict_proba(X), y)


def train_model(model: Model, X, y, cfg: TrainConfig, validation=None) -> tuple[Model, History]:
    """Mini-batch minimisation of the logloss with early stopping on validation loss.

    ``validation`` is ``(X_val, y_val)``; when omitted, a stratified
    ``cfg.val_fraction`` of the training rows is held out. The parameters of
    the best validation epoch are restored at the end.
    """
    X = model.check_input(X)
    y = np.asarray(y, dtype=model.dtype).ravel()
    if validation is None:
        tr, va = stratified_holdout(y, cfg.val_fraction, cfg.seed)
        X, Xv, y, yv = X[tr], X[va], y[tr], y[va]
    else:
        Xv, yv = model.check_input(validation[0]), np.asarray(validation[1], dtype=model.dtype).ravel()
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    hist = History()
    best = math.inf
    best_state = _snapshot(model)
    since_best = 0
    n = len(X)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if cfg.batch_size > 1 and len(idx) == 1 and n > 1:
                continue  # a lone trailing sample is a degenerate batch-norm batch
            logits = model.forward(X[idx], training=True)
            loss, grad = bce_with_logits(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingError("training loss is not finite", epoch)
            model.backward(grad.astype(model.dtype, copy=False))
            opt.step()
            total += loss * len(idx)
        train_loss = total / n
        val_loss = evaluate_loss(model, Xv, yv)
        if not math.isfinite(train_loss) or not math.isfinite(val_loss):
            raise TrainingError("loss diverged", epoch)
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val_loss)
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if val_loss < best:
            best, since_best, hist.best_epoch = val_loss, 0, epoch
            best_state = _snapshot(model)
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                hist.stopped_early = True
                break
    _restore(model, best_state)
    return model, hist


# ---------------------------------------------------------------------------
# experiments


def default_model_configs() -> dict[str, ModelConfig]:
    return {"cnn": classical_cnn_config(), "densenet1d": densenet1d_config(), "ms-densenet": multiscale_densenet_config()}


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    gbm: GbmConfig = field(default_factory=GbmConfig)
    models: dict[str, ModelConfig] = field(default_factory=default_model_configs)
    k: int = 5
    seed: int = 0

    def echo(self, kind: str) -> dict[str, str]:
        out = {"seed": str(self.seed), "k": str(self.k)}
        if kind == "rf":
            out.update({f"rf.{k}": str(v) for k, v in vars(self.forest).items() if k != "seed"})
        elif kind == "gbm":
            out.update({f"gbm.{k}": str(v) for k, v in vars(self.gbm).items() if k != "seed"})
        else:
            t = self.train
            out.update({f"train.{k}": str(getattr(v, "value", v)) for k, v in vars(t).items() if k != "seed"})
            out["model"] = self.models[kind].name
        return out


BENCHMARK_EPOCHS = 16


def benchmark_config(seed: int = 0) -> ExperimentConfig:
    """Desk-sized networks and a shorter epoch cap for the five-model comparison."""
    return ExperimentConfig(train=TrainConfig(max_epochs=BENCHMARK_EPOCHS), models=desk_configs(), seed=seed)


@dataclass
class FoldResult:
    fold_index: int
    logloss: float
    auc: float
    n_test: int = 0
    history: History | None = None


@dataclass
class ExperimentReport:
    model_name: str
    per_fold: list[FoldResult]
    seed: int
    config: dict[str, str] = field(default_factory=dict)
    dataset: str = ""

    @property
    def mean_logloss(self) -> float:
        return float(np.mean([f.logloss for f in self.per_fold]))

    @property
    def mean_auc(self) -> float:
        return float(np.mean([f.auc for f in self.per_fold]))

    def csv_rows(self):
        rows = [(self.model_name, str(f.fold_index), repr(float(f.logloss)), repr(float(f.auc))) for f in self.per_fold]
        rows.append((self.model_name, "mean", repr(self.mean_logloss), repr(self.mean_auc)))
        return rows

    def to_csv(self) -> str:
        return rows_to_csv(self.csv_rows())

    def table(self) -> str:
        lines = [f"model {self.model_name}  seed {self.seed}", f"{'fold':>6} {'logloss':>10} {'auc':>8}"]
        for f in self.per_fold:
            lines.append(f"{f.fold_index:>6} {f.logloss:>10.5f} {f.auc:>8.5f}")
        lines.append(f"{'mean':>6} {self.mean_logloss:>10.5f} {self.mean_auc:>8.5f}")
        return "\n".join(lines)


def rows_to_csv(rows, header=("model", "fold", "logloss", "auc")) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue()


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


@dataclass
class PreparedData:
    """Imputed series (for features), standardised series (for networks), labels."""

    raw: np.ndarray
    standardized: np.ndarray
    y: np.ndarray
    ids: list[str]
    excluded: dict[str, str]
    _features: np.ndarray | None = None

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            self._features = feature_matrix(self.raw)
        return self._features


def prepare(dataset: Dataset) -> PreparedData:
    """Impute every record, then z-score it; records failing either step are excluded."""
    raw, std, labels, ids, excluded = [], [], [], [], {}
    for r in dataset.records:
        try:
            imputed = impute_missing(r)
            standardized = zscore(imputed)
        except (ImputationError, StandardizationError) as e:
            excluded[r.user_id] = str(e)
            continue
        raw.append(imputed.readings)
        std.append(standardized.readings)
        labels.append(r.label)
        ids.append(r.user_id)
    if not ids:
        raise ConfigurationError("no usable records after preprocessing")
    return PreparedData(np.stack(raw), np.stack(std), np.array(labels, dtype=np.int64), ids, excluded)


def run_fold(kind: str, data: PreparedData, train_idx, test_idx, cfg: ExperimentConfig, seed: int,
             on_model=None) -> FoldResult:
    """Train on ``train_idx`` and score ``test_idx``; test labels are only read for scoring."""
    y_train = data.y[train_idx]
    if kind in ("rf", "gbm"):
        X = data.features
        if kind == "rf":
            model = train_random_forest(X[train_idx], y_train, replace(cfg.forest, seed=seed))
        else:
            model = train_gbm(X[train_idx], y_train, replace(cfg.gbm, seed=seed))
        p = predict_baseline(model, X[test_idx])
        history = None
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            model = build_model(cfg.models[kind], seed=seed)
        X = data.standardized
        model, history = train_model(model, X[train_idx], y_train, replace(cfg.train, seed=seed))
        p = model.predict_proba(X[test_idx])
    if on_model is not None:
        on_model(model)
    y_test = data.y[test_idx]
    return FoldResult(-1, logloss(p, y_test), auc(p, y_test), len(test_idx), history)


def run_experiment(kind: str, dataset: Dataset | PreparedData, cfg: ExperimentConfig | None = None,
                   on_model=None, n_workers: int = 1) -> ExperimentReport:
    """k-fold cross-validated logloss/AUC for one model kind.

    ``on_model(fold_index, model)`` is called after each fold's training
    (used by the CLI to write checkpoints).
    """
    kind = normalize_kind(kind)
    cfg = cfg or ExperimentConfig()
    data = dataset if isinstance(dataset, PreparedData) else prepare(dataset)
    folds = kfold_split(len(data.y), cfg.k, data.y, cfg.seed)
    jobs = []
    for i, test_idx in enumerate(folds):
        train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        jobs.append((i, train_idx, test_idx))

    def one(job):
        i, train_idx, test_idx = job
        hook = None if on_model is None else (lambda m, i=i: on_model(i, m))
        res = run_fold(kind, data, train_idx, test_idx, cfg, fold_seed(cfg.seed, i), hook)
        res.fold_index = i
        log.info("%s seed %d fold %d: logloss %.5f auc %.5f", kind, cfg.seed, i, res.logloss, res.auc)
        return res

    if n_workers > 1:
        results = []
        for res, model in _parallel_folds(kind, data, jobs, cfg, n_workers, keep_models=on_model is not None):
            log.info("%s seed %d fold %d: logloss %.5f auc %.5f", kind, cfg.seed, res.fold_index, res.logloss, res.auc)
            if on_model is not None:
                on_model(res.fold_index, model)
            results.append(res)
    else:
        results = [one(job) for job in jobs]
    return ExperimentReport(kind, results, cfg.seed, cfg.echo(kind))


def _fold_worker(args):
    from threadpoolctl import threadpool_limits

    kind, data, (i, train_idx, test_idx), cfg, keep = args
    trained = []
    with threadpool_limits(1):
        res = run_fold(kind, data, train_idx, test_idx, cfg, fold_seed(cfg.seed, i), trained.append if keep else None)
    res.fold_index = i
    return res, (trained[0] if keep else None)


def _parallel_folds(kind, data, jobs, cfg, n_workers, keep_models=False):
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_fold_worker, [(kind, data, job, cfg, keep_models) for job in jobs]))


# ---------------------------------------------------------------------------
# cross-model comparison


@dataclass
class ComparisonRow:
    model: str
    mean_logloss: float
    mean_auc: float
    std_auc: float
    per_seed_auc: list[float]


def compare(dataset: Dataset | PreparedData, seeds, cfg: ExperimentConfig | None = None, kinds=MODEL_KINDS,
            n_workers: int = 1) -> tuple[list[ComparisonRow], list[ExperimentReport]]:
    """Run every model kind for every seed; rank by mean AUC (best first)."""
    cfg = cfg or ExperimentConfig()
    data = dataset if isinstance(dataset, PreparedData) else prepare(dataset)
    reports = []
    for kind in kinds:
        for s in seeds:
            reports.append(run_experiment(kind, data, replace(cfg, seed=int(s)), n_workers=n_workers))
    rows = []
    for kind in kinds:
        mine = [r for r in reports if r.model_name == normalize_kind(kind)]
        aucs = [r.mean_auc for r in mine]
        rows.append(ComparisonRow(normalize_kind(kind), float(np.mean([r.mean_logloss for r in mine])),
                                  float(np.mean(aucs)), float(np.std(aucs)), aucs))
    rows.sort(key=lambda r: (-r.mean_auc, r.model))
    return rows, reports


def comparison_table(rows: list[ComparisonRow]) -> str:
    lines = [f"{'rank':>4}  {'model':<12} {'logloss':>10} {'auc':>8} {'auc sd':>8}"]
    for i, r in enumerate(rows, 1):
        lines.append(f"{i:>4}  {r.model:<12} {r.mean_logloss:>10.5f} {r.mean_auc:>8.5f} {r.std_auc:>8.5f}")
    return "\n".join(lines)


def comparison_csv(rows: list[ComparisonRow]) -> str:
    return rows_to_csv(
        [(i, r.model, repr(r.mean_logloss), repr(r.mean_auc), repr(r.std_auc)) for i, r in enumerate(rows, 1)],
        header=("rank", "model", "mean_logloss", "mean_auc", "std_auc"),
    )


# ---------------------------------------------------------------------------
# ordering stability


@dataclass
class StabilityReport:
    orderings: dict[str, float]  # ordering name -> sd of epoch-to-epoch val-loss differences
    histories: dict[str, History]

    def table(self) -> str:
        lines = ["ordering        sd(diff val logloss)  epochs"]
        for name, sd in self.orderings.items():
            lines.append(f"{name:<15} {sd:>20.6f}  {len(self.histories[name].val_loss):>6}")
        return "\n".join(lines)


def stability_diagnostic(dataset: Dataset | PreparedData, model_cfg: ModelConfig, train_cfg: TrainConfig,
                         seed: int = 0) -> StabilityReport:
    """Train one model config under both conv/BN/ReLU orderings on the same split.

    Reports the standard deviation of successive differences of the
    validation logloss, i.e. how much the validation curve jitters.
    """
    from .blocks import DenseBlockSpec, Ordering

    data = dataset if isinstance(dataset, PreparedData) else prepare(dataset)
    train_idx, test_idx = stratified_holdout(data.y, 0.2, seed)
    out, hists = {}, {}
    for ordering in (Ordering.CONV_BN_RELU, Ordering.BN_RELU_CONV):
        blocks = [DenseBlockSpec(b.parts, replace(b.part, ordering=ordering)) for b in model_cfg.blocks]
        cfg = replace(model_cfg, blocks=blocks)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            model = build_model(cfg, seed=seed)
        X = data.standardized
        _, hist = train_model(model, X[train_idx], data.y[train_idx], replace(train_cfg, seed=seed),
                              validation=(X[test_idx], data.y[test_idx]))
        diffs = np.diff(hist.val_loss)
        out[ordering.value] = float(np.std(diffs)) if len(diffs) else 0.0
        hists[ordering.value] = hist
    return StabilityReport(out, hists)
