from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import STABLE, UNSTABLE, Model, init_model, loss_and_gradients, predict

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


class LeakageError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    init_scale: float = float(np.sqrt(6.0))
    decay_factor: float = 0.2
    decay_at: float = 2.0 / 3.0
    mirror: bool = True  # random left-right flips; stability is mirror invariant
    class_balance: bool = True
    channels: tuple = (8, 16, 32)
    min_steps: int = 0  # raise the epoch count until at least this many updates run

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "init_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.min_steps < 0:
            raise ValueError("min_steps must be >= 0")

    def epochs_for(self, n: int) -> int:
        """Epochs actually run on a view of n samples."""
        per_epoch = -(-n // self.batch_size)
        return max(self.epochs, -(-self.min_steps // per_epoch))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


# Settings used by the experiment designs.  Small views (about 100 masks) need
# far more than 30 epochs to fit, so a floor on updates applies as well; pooled
# views (800+ masks) are still underfit at 30 epochs, hence 100.
EXPERIMENT_CONFIG = TrainConfig(learning_rate=0.01, batch_size=8, epochs=100, min_steps=3750)


def class_weights(labels) -> np.ndarray:
    """Inverse-frequency weights normalized to mean 1 over the sample."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=2).astype(float)
    w = np.where(counts > 0, len(labels) / (2.0 * np.maximum(counts, 1.0)), 0.0)
    return w


def train(view, cfg: TrainConfig = TrainConfig(), model: Model | None = None, progress=None) -> Model:
    """Minibatch SGD with momentum and one step decay; deterministic for fixed inputs."""
    x, y = np.asarray(view.masks, dtype=float), np.asarray(view.labels, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty training view")
    if model is None:
        model = init_model(cfg.channels, x.shape[-1], seed=cfg.seed, scale=cfg.init_scale)
    rng = np.random.default_rng(cfg.seed + 1)
    cw = class_weights(y) if cfg.class_balance else None
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    epochs = cfg.epochs_for(len(y))
    decay_epoch = int(round(cfg.decay_at * epochs))
    history = []
    for epoch in range(epochs):
        lr = cfg.learning_rate * (cfg.decay_factor if epoch >= decay_epoch else 1.0)
        order = rng.permutation(len(y))
        flips = rng.random(len(y)) < 0.5 if cfg.mirror else np.zeros(len(y), bool)
        total = 0.0
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx].copy()
            fb = flips[idx]
            xb[fb] = xb[fb][:, :, ::-1]
            loss, grads = loss_and_gradients(model, xb, y[idx], cw)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLoss(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            for k, g in grads.items():
                velocity[k] = cfg.momentum * velocity[k] - lr * g
                model.params[k] += velocity[k]
            total += loss * len(idx)
        history.append(total / len(y))
        if progress:
            progress(epoch, history[-1])
    _, pred = predict(model, x)
    model.meta.update({
        "train_config": cfg.as_dict(),
        "train_keys": sorted([r["group_id"], r["scene_index"]] for r in getattr(view, "records", [])),
        "train_accuracy": float(np.mean(pred == y) * 100.0),
        "epochs_run": epochs,
        "loss_history": [float(v) for v in history],
    })
    log.info("trained on %d masks: accuracy %.1f%%", len(y), model.meta["train_accuracy"])
    return model


@dataclass
class EvalReport:
    name: str
    accuracy: dict  # group -> percent, rounded to 0.1
    confusion: dict  # group -> {"tp", "tn", "fp", "fn"}; positive = unstable
    train_groups: list
    test_groups: list
    overall: float = 0.0
    extra: dict = field(default_factory=dict)

    def recall(self, group: str) -> tuple:
        """(recall on stable, recall on unstable) in percent; NaN when a class is absent."""
        c = self.confusion[group]
        stable = c["tn"] + c["fp"]
        unstable = c["tp"] + c["fn"]
        return (100.0 * c["tn"] / stable if stable else float("nan"),
                100.0 * c["tp"] / unstable if unstable else float("nan"))

    def total(self, group: str) -> int:
        return sum(self.confusion[group].values())


def confusion_counts(pred, truth) -> dict:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    return {"tp": int(np.sum((pred == UNSTABLE) & (truth == UNSTABLE))),
            "tn": int(np.sum((pred == STABLE) & (truth == STABLE))),
            "fp": int(np.sum((pred == UNSTABLE) & (truth == STABLE))),
            "fn": int(np.sum((pred == STABLE) & (truth == UNSTABLE)))}


def accuracy_percent(c: dict) -> float:
    n = sum(c.values())
    return round(100.0 * (c["tp"] + c["tn"]) / n, 1) if n else float("nan")


def check_disjoint(model: Model, view) -> None:
    trained = {tuple(k) for k in model.meta.get("train_keys", [])}
    overlap = trained & view.keys
    if overlap:
        raise LeakageError(f"evaluation view shares {len(overlap)} scenes with the training view")


def evaluate(model: Model, view, name: str = "eval", predictor=None) -> EvalReport:
    """Per-group accuracy of `model` (or a custom `predictor(masks) -> classes`) on a view."""
    if predictor is None:
        check_disjoint(model, view)
        _, pred = predict(model, view.masks) if len(view) else (None, np.zeros(0, int))
    else:
        pred = np.asarray(predictor(view.masks))
    groups = []
    for r in view.records:
        if r["group_id"] not in groups:
            groups.append(r["group_id"])
    acc, conf = {}, {}
    gid = np.array([r["group_id"] for r in view.records])
    for g in groups:
        sel = gid == g
        conf[g] = confusion_counts(pred[sel], view.labels[sel])
        acc[g] = accuracy_percent(conf[g])
    overall = accuracy_percent(confusion_counts(pred, view.labels))
    train_groups = sorted({k[0] for k in model.meta.get("train_keys", [])}) if model is not None else []
    return EvalReport(name, acc, conf, train_groups, groups, overall)
