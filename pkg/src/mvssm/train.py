"""Losses, Adam, AUROC, synthetic two-view data and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .autodiff import Tape, backward
from .errors import ContractError, NumericError, UndefinedMetricError
from .model import Model, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


# ------------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class indices."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:1]:
        raise ContractError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label out of range for {k} classes")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    nll = ops.neg(ops.sum(ops.log_softmax(logits, axis=-1) * onehot, axis=-1))
    return ops.mean(nll)


def bce_multilabel(logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy averaged over classes and batch."""
    labels = np.asarray(labels, dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise ContractError(f"labels shape {labels.shape} != logits {logits.shape}")
    if ((labels != 0) & (labels != 1)).any():
        raise ContractError("multi-label targets must be 0 or 1")
    return ops.mean(ops.bce_with_logits(logits, labels))


def task_loss(logits: Tensor, labels, task: str) -> Tensor:
    if task == "single_label":
        return cross_entropy(logits, labels)
    return bce_multilabel(logits, labels)


# -------------------------------------------------------------------- Adam


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    runs: int = 4
    grad_clip: float | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        from .errors import ConfigError

        if not (isinstance(self.lr, (int, float)) and self.lr >= 0):
            raise ConfigError("lr", "must be >= 0")
        if not (isinstance(self.weight_decay, (int, float)) and self.weight_decay >= 0):
            raise ConfigError("weight_decay", "must be >= 0")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise ConfigError("batch_size", "must be an integer >= 1")
        if not (isinstance(self.epochs, int) and self.epochs >= 0):
            raise ConfigError("epochs", "must be an integer >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas", "must be two values in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps", "must be > 0")
        if not (isinstance(self.runs, int) and self.runs >= 1):
            raise ConfigError("runs", "must be an integer >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip", "must be > 0 or null")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads, state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``params`` maps names to tensors; ``grads`` maps tensors (or names) to
    gradient arrays. Missing gradients count as zero.
    """
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = _grad_for(grads, name, p)
        if p.shape != g.shape:
            raise ContractError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p.data -= (cfg.lr * cfg.weight_decay) * p.data
        p.data -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)
    return state


def _grad_for(grads, name, p):
    if hasattr(grads, "of"):
        return grads.of(p)
    g = grads.get(name)
    return np.zeros_like(p.data) if g is None else np.asarray(g)


def clip_grads(grads, params: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((grads.of(p).astype(np.float64) ** 2).sum())
                          for p in params.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.id in grads:
                dict.__setitem__(grads, p.id, grads[p.id] * scale)
    return total


# ------------------------------------------------------------------- AUROC


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (wins + 0.5 * ties) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    not_above = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum()
    ties = (not_above - below).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def macro_auroc(probs: np.ndarray, labels: np.ndarray, task: str) -> tuple[float, list[float]]:
    """Per-class one-vs-rest AUROC and their mean.

    Binary single-label tasks report one AUROC on the positive-class score.
    """
    if task == "single_label":
        k = probs.shape[1]
        classes = [1] if k == 2 else list(range(k))
        per = [auroc(probs[:, c], labels == c) for c in classes]
    else:
        per = [auroc(probs[:, c], labels[:, c]) for c in range(probs.shape[1])]
    return float(np.mean(per)), per


# -------------------------------------------------------------- synthetic data

SYNTH_TASKS = ("single_view_sufficient", "xor_cross_view")


@dataclass
class SyntheticSpec:
    img_size: int = 32
    n_train: int = 256
    n_val: int = 128
    n_test: int = 256
    task: str = "xor_cross_view"
    noise_std: float = 0.3
    blob_size: int = 16
    blob_intensity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.task not in SYNTH_TASKS:
            raise ContractError(f"unknown synthetic task {self.task!r}")
        if self.blob_size < 1 or 2 * self.blob_size > self.img_size:
            raise ContractError("blob_size must fit in half the image")


@dataclass
class Dataset:
    """Paired views ``(n, H, W, 1)`` float32 and labels (``(n,)`` ints or
    ``(n, K)`` 0/1 for multi-label)."""

    v1: np.ndarray
    v2: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    def subset(self, idx) -> "Dataset":
        return Dataset(self.v1[idx], self.v2[idx], self.labels[idx])


def _blob_images(rng, halves_upper: np.ndarray, spec: SyntheticSpec, vertical: bool) -> np.ndarray:
    # one square blob per image, placed in the upper/lower (or left/right) half
    n, s, b = len(halves_upper), spec.img_size, spec.blob_size
    imgs = rng.normal(0.0, spec.noise_std, size=(n, s, s)).astype(np.float32)
    half = s // 2
    along = rng.integers(0, half - b + 1, size=n)
    across = rng.integers(0, s - b + 1, size=n)
    for i in range(n):
        start = along[i] + (0 if halves_upper[i] else half)
        if vertical:
            imgs[i, start:start + b, across[i]:across[i] + b] += spec.blob_intensity
        else:
            imgs[i, across[i]:across[i] + b, start:start + b] += spec.blob_intensity
    return imgs[..., None]


def gen_synthetic(spec: SyntheticSpec) -> dict[str, Dataset]:
    """Deterministic train/val/test splits for a synthetic two-view task.

    ``xor_cross_view``: each view's blob sits in the upper or lower half at
    random; the label is the XOR of the two half indicators, so neither
    view alone carries information about it.
    ``single_view_sufficient``: view 1's blob is in the upper half and view
    2's blob in the left half exactly when the label is 1.
    """
    rng = np.random.default_rng(spec.seed)
    out = {}
    for split, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        if spec.task == "xor_cross_view":
            q1 = rng.integers(0, 2, size=n).astype(bool)
            q2 = rng.integers(0, 2, size=n).astype(bool)
            labels = (q1 ^ q2).astype(np.int64)
            v1 = _blob_images(rng, q1, spec, vertical=True)
            v2 = _blob_images(rng, q2, spec, vertical=True)
        else:
            labels = rng.integers(0, 2, size=n).astype(np.int64)
            v1 = _blob_images(rng, labels.astype(bool), spec, vertical=True)
            v2 = _blob_images(rng, labels.astype(bool), spec, vertical=False)
        out[split] = Dataset(v1, v2, labels)
    return out


# ------------------------------------------------------------ train / eval


@dataclass
class EvalReport:
    macro_auroc: float
    per_class_auroc: list[float]
    loss: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    seed: int
    test: EvalReport
    best_val_auroc: float
    best_epoch: int
    history: list[dict]
    state: dict = field(repr=False)


@dataclass
class MultiRunReport:
    runs: list[RunResult]

    @property
    def aurocs(self) -> np.ndarray:
        return np.array([r.test.macro_auroc for r in self.runs])

    @property
    def mean(self) -> float:
        return float(self.aurocs.mean())

    @property
    def std(self) -> float:
        return float(self.aurocs.std())

    def to_dict(self) -> dict:
        return {
            "auroc_mean": self.mean,
            "auroc_std": self.std,
            "runs": [
                {"seed": r.seed, "test": r.test.to_dict(), "best_val_auroc": r.best_val_auroc,
                 "best_epoch": r.best_epoch, "history": r.history}
                for r in self.runs
            ],
        }


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def evaluate(model: Model, data: Dataset, batch_size: int = 64) -> EvalReport:
    cfg = model.cfg
    dtype = np.dtype(cfg.dtype)
    probs, losses, weights = [], [], []
    for idx in batches(len(data), batch_size, None):
        part = data.subset(idx)
        pred = model(part.v1.astype(dtype, copy=False), part.v2.astype(dtype, copy=False))
        losses.append(task_loss(pred.logits, part.labels, cfg.task).item())
        weights.append(len(idx))
        probs.append(pred.probs)
    probs = np.concatenate(probs)
    macro, per = macro_auroc(probs, data.labels, cfg.task)
    loss = float(np.average(losses, weights=weights))
    return EvalReport(macro, per, loss)


def check_compatible(model_cfg: ModelConfig, data: Dataset) -> None:
    h, w = data.v1.shape[1:3]
    if h != model_cfg.img_size or w != model_cfg.img_size:
        raise ContractError(f"dataset images are {h}x{w} but img_size is {model_cfg.img_size}")
    if data.multilabel != (model_cfg.task == "multi_label"):
        raise ContractError("dataset label kind does not match model task")
    if data.multilabel and data.labels.shape[1] != model_cfg.num_classes:
        raise ContractError("dataset class count does not match num_classes")
    if not data.multilabel and data.labels.max() >= model_cfg.num_classes:
        raise ContractError("dataset labels exceed num_classes")


def train_run(model_cfg: ModelConfig, train_cfg: TrainConfig, splits: dict[str, Dataset],
              seed: int) -> RunResult:
    """Train one model; keep the parameters with the best validation AUROC."""
    train, val, test = splits["train"], splits["val"], splits["test"]
    check_compatible(model_cfg, train)
    cfg = ModelConfig(**{**model_cfg.to_dict(), "seed": seed})
    model = Model(cfg)
    params = dict(model.named_parameters())
    dtype = np.dtype(cfg.dtype)
    state = AdamState()
    rng = np.random.default_rng(seed + 7919)
    best_auroc, best_epoch = -1.0, -1
    best_state = model.state_dict()
    history = []
    step = 0
    for epoch in range(train_cfg.epochs):
        total, count = 0.0, 0
        for idx in batches(len(train), train_cfg.batch_size, rng):
            part = train.subset(idx)
            with Tape() as tape:
                logits = model.logits(part.v1.astype(dtype, copy=False),
                                      part.v2.astype(dtype, copy=False))
                loss = task_loss(logits, part.labels, cfg.task)
            value = loss.item()
            if not math.isfinite(value):
                norms = {k: float(np.linalg.norm(p.data)) for k, p in params.items()}
                raise NumericError(f"non-finite loss at step {step}; parameter norms: {norms}")
            grads = backward(tape, loss)
            if train_cfg.grad_clip is not None:
                clip_grads(grads, params, train_cfg.grad_clip)
            adam_step(params, grads, state, train_cfg)
            total += value * len(idx)
            count += len(idx)
            step += 1
        report = evaluate(model, val)
        history.append({"epoch": epoch, "train_loss": total / max(count, 1),
                        "val_auroc": report.macro_auroc, "val_loss": report.loss})
        log.info("seed %d epoch %d train_loss %.4f val_auroc %.4f", seed, epoch,
                 total / max(count, 1), report.macro_auroc)
        if report.macro_auroc > best_auroc:
            best_auroc, best_epoch = report.macro_auroc, epoch
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    test_report = evaluate(model, test)
    return RunResult(seed, test_report, best_auroc, best_epoch, history, best_state)


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig,
               splits: dict[str, Dataset]) -> MultiRunReport:
    """``train_cfg.runs`` independent runs seeded ``seed, seed+1, ...``."""
    return MultiRunReport([train_run(model_cfg, train_cfg, splits, train_cfg.seed + r)
                           for r in range(train_cfg.runs)])
