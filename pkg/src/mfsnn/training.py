"""Supervised training, evaluation, cross-day fine-tuning and ablation runs."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nm
from .datakit import TrialSet, finetune_subset, split_single_day
from .model import ModelConfig, ablated_model, build_model, clone_model

FINETUNE_SCOPES = ("classifier_only", "full")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_max: float = 0.01
    lr_min: float = 0.0001
    seed: int = 0
    finetune_scope: str = "classifier_only"
    finetune_epoch_fraction: float = 0.2
    finetune_lr: float | None = None    # None -> 10 * lr_min

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr_max > self.lr_min > 0:
            raise ValueError("need lr_max > lr_min > 0")
        if self.finetune_scope not in FINETUNE_SCOPES:
            raise ValueError(f"finetune_scope must be one of {FINETUNE_SCOPES}")
        if not 0 < self.finetune_epoch_fraction <= 1:
            raise ValueError("finetune_epoch_fraction must lie in (0, 1]")

    @property
    def finetune_epochs(self) -> int:
        return max(1, int(round(self.finetune_epoch_fraction * self.epochs)))

    @property
    def finetune_rate(self) -> float:
        return self.lr_min * 10 if self.finetune_lr is None else self.finetune_lr


@dataclass
class RunReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    test_accuracy: float | None = None
    confusion: list[list[int]] | None = None
    per_day: dict = field(default_factory=dict)
    seed: int = 0
    config: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_dict(self, include_wall_clock: bool = False) -> dict:
        d = asdict(self)
        if not include_wall_clock:
            d.pop("wall_clock_s")
        return d

    def to_json(self, include_wall_clock: bool = False) -> str:
        return json.dumps(self.to_dict(include_wall_clock), indent=2, sort_keys=True) + "\n"


def cross_entropy(logits, labels) -> nm.Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    logits = nm.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be {b} indices in [0, {k})")
    picked = nm.log_softmax(logits, axis=1)[np.arange(b), labels]
    return -nm.mean(picked)


def train(model, train_set: TrialSet, config: TrainConfig, trainable=None,
          constant_lr: float | None = None, epochs: int | None = None):
    """Mini-batch Adam with cosine annealing (or a constant rate).

    ``trainable`` restricts updates to the named parameters; the others are
    frozen for the duration and come back bit-identical.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if train_set.trials.shape[1:] != (model.input_shape[0], model.input_shape[2]):
        raise ValueError(f"dataset trials {train_set.trials.shape[1:]} do not match model input")
    epochs = config.epochs if epochs is None else epochs
    names = list(model.params) if trainable is None else list(trainable)
    frozen = [k for k in model.params if k not in names]
    for k in frozen:
        model.params[k].requires_grad = False

    x_all = train_set.as_batch()
    y_all = train_set.labels
    n = len(train_set)
    n_batches = math.ceil(n / config.batch_size)
    if constant_lr is None:
        schedule = nm.LrSchedule(config.lr_max, config.lr_min, epochs * n_batches)
    rng = np.random.default_rng([config.seed, 7])
    state = nm.AdamState.zeros_like(model.params[k].data for k in names)
    report = RunReport(seed=config.seed, config=asdict(config))
    t0 = time.perf_counter()
    step = 0
    try:
        for _ in range(epochs):
            order = rng.permutation(n)
            loss_sum, correct = 0.0, 0
            for bi in range(n_batches):
                idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
                for k in names:
                    model.params[k].grad = None
                logits = model.forward(x_all[idx])
                loss = cross_entropy(logits, y_all[idx])
                loss_sum += loss.item() * idx.size
                correct += int(np.sum(np.argmax(logits.data, axis=1) == y_all[idx]))
                nm.backward(loss)
                lr = constant_lr if constant_lr is not None else nm.cosine_lr(schedule, step)
                params = [model.params[k] for k in names]
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                new, state = nm.adam_step([p.data for p in params], grads, state, lr)
                for p, v in zip(params, new):
                    p.data = v
                    p.grad = None
                step += 1
            report.epoch_loss.append(loss_sum / n)
            report.epoch_accuracy.append(correct / n)
    finally:
        for k in frozen:
            model.params[k].requires_grad = True
    report.wall_clock_s = time.perf_counter() - t0
    return model, report


def logits_for(model, ts: TrialSet, batch_size: int = 256) -> np.ndarray:
    x = ts.as_batch()
    out = []
    with nm.no_grad():
        for i in range(0, len(ts), batch_size):
            out.append(model.forward(x[i:i + batch_size]).data)
    return np.concatenate(out)


def evaluate(model, test_set: TrialSet) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows are true classes)."""
    if len(test_set) == 0:
        raise ValueError("empty evaluation set")
    pred = np.argmax(logits_for(model, test_set), axis=1)
    k = test_set.n_classes
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (test_set.labels, pred), 1)
    return float(np.trace(conf) / conf.sum()), conf


def finetune(model, ft_set: TrialSet, config: TrainConfig):
    """Small-sample supervised adaptation with the fine-tuning budget."""
    scope = None if config.finetune_scope == "full" else model.classifier_names
    return train(model, ft_set, replace(config, seed=config.seed + 1), trainable=scope,
                 constant_lr=config.finetune_rate, epochs=config.finetune_epochs)


def single_day_run(model_config: ModelConfig, dataset: TrialSet, day: int, config: TrainConfig):
    train_set, test_set = split_single_day(dataset, day, 0.8, seed=config.seed)
    model = build_model(model_config, seed=config.seed)
    model, report = train(model, train_set, config)
    report.test_accuracy, conf = evaluate(model, test_set)
    report.confusion = conf.tolist()
    return model, report


def _adapt_and_score(pretrained, day_set: TrialSet, rho: float, config: TrainConfig):
    model = clone_model(pretrained)
    if rho > 0:
        ft, ev = finetune_subset(day_set, rho, seed=config.seed)
        finetune(model, ft, config)
    else:
        ev = day_set
    acc, conf = evaluate(model, ev)
    return model, acc, conf


def pretrain(model_config: ModelConfig, dataset: TrialSet, train_day: int, config: TrainConfig,
             model=None):
    if model is None:
        model = build_model(model_config, seed=config.seed)
    return train(model, dataset.day(train_day), config)


def cross_day_protocol(dataset: TrialSet, train_day: int, test_days, rho: float,
                       config: TrainConfig, model_config: ModelConfig | None = None,
                       pretrained=None) -> dict[int, RunReport]:
    """Pre-train on ``train_day``; per test day fine-tune on a ``rho`` fraction
    (zero-shot when ``rho == 0``) and score on the rest."""
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    test_days = list(test_days)
    if train_day in test_days:
        raise ValueError("training day also listed as a test day")
    for d in [train_day] + test_days:
        dataset.day(d)
    if pretrained is None:
        pretrained, base = pretrain(model_config, dataset, train_day, config)
    else:
        base = RunReport(seed=config.seed, config=asdict(config))
    reports = {}
    for d in test_days:
        _, acc, conf = _adapt_and_score(pretrained, dataset.day(d), rho, config)
        r = RunReport(epoch_loss=list(base.epoch_loss), epoch_accuracy=list(base.epoch_accuracy),
                      test_accuracy=acc, confusion=conf.tolist(), seed=config.seed,
                      config=dict(asdict(config), rho=rho, train_day=train_day, test_day=d))
        r.per_day = {str(d): acc}
        reports[d] = r
    return reports


DEFAULT_RATIOS = (0.0, 0.008, 0.016, 0.032, 0.078, 0.156)


def ratio_sweep(dataset: TrialSet, train_day: int, test_days, ratios, config: TrainConfig,
                model_config: ModelConfig | None = None, pretrained=None) -> list[dict]:
    """Accuracy against fine-tuning ratio; one shared pre-trained model.

    Each row holds the mean over ``test_days`` and the per-day values.
    """
    ratios = list(ratios)
    if ratios != sorted(ratios) or any(not 0 <= r < 1 for r in ratios):
        raise ValueError("ratios must be sorted and lie in [0, 1)")
    if pretrained is None:
        pretrained, _ = pretrain(model_config, dataset, train_day, config)
    rows = []
    for rho in ratios:
        reps = cross_day_protocol(dataset, train_day, test_days, rho, config, pretrained=pretrained)
        per_day = {str(d): r.test_accuracy for d, r in reps.items()}
        rows.append({"ratio": rho, "seed": config.seed,
                     "accuracy": float(np.mean(list(per_day.values()))), "per_day": per_day})
    return rows


ABLATION_VARIANTS = {"full": (), "no-CA": ("CA",), "no-TCN": ("TCN",), "no-LT": ("LT",)}


def ablation_suite(model_config: ModelConfig, dataset: TrialSet, config: TrainConfig, seeds,
                   train_day: int = 0, test_days=None, rho: float = 0.078) -> dict[str, RunReport]:
    """Full model and the three single-module ablations on identical splits/seeds.

    Cross-day with ``rho`` fine-tuning when the dataset has more than one day,
    otherwise an 8:2 single-day split of ``train_day``.
    """
    if test_days is None:
        test_days = [d for d in dataset.days if d != train_day][:3]
    reports = {}
    for name, disable in ABLATION_VARIANTS.items():
        accs = []
        for seed in seeds:
            cfg = replace(config, seed=seed)
            model = ablated_model(model_config, disable, seed=seed)
            if test_days:
                pre, _ = pretrain(model_config, dataset, train_day, cfg, model=model)
                reps = cross_day_protocol(dataset, train_day, test_days, rho, cfg, pretrained=pre)
                accs.append(float(np.mean([r.test_accuracy for r in reps.values()])))
            else:
                tr, te = split_single_day(dataset, train_day, 0.8, seed=seed)
                train(model, tr, cfg)
                accs.append(evaluate(model, te)[0])
        reports[name] = RunReport(
            test_accuracy=float(np.mean(accs)),
            per_day={"seeds": list(seeds), "accuracy": accs,
                     "mean": float(np.mean(accs)), "std": float(np.std(accs))},
            seed=int(seeds[0]),
            config=dict(asdict(config), variant=name, disabled=list(disable), rho=rho,
                        train_day=train_day, test_days=list(test_days)))
    return reports
