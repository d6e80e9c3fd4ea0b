"""Dense networks with per-tensor freezing, trained by hand-written backprop.

Parameters are named ``layers.{i}.weight`` (shape ``[out, in]``) and
``layers.{i}.bias`` (shape ``[out]``) so the default eligibility filter
keeps the weights and drops the biases. Hidden layers apply the model's
activation; the last layer is linear. Training is plain (mini-batch)
gradient descent in float64. A tensor whose mask entry is false is never
written to, so it stays bit-identical.

The forgetting experiment is a small analog of comparing low- and
high-condition-number unfreezing: pre-train on task A, choose tensors from
the post-A snapshot, fine-tune on task B, and measure how much the task-A
eval loss moves.
"""

import copy
import csv
import io
import json
import logging
import math
import statistics
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError
from .infotheory import ActivationSpec
from .rng import box_muller, make_rng
from .selection import (
    STRATEGIES,
    EligibilityFilter,
    TrainabilityMask,
    apply_plan_mask,
    budget_from_fraction,
    eligible_tensors,
    make_plan,
)
from .spectral import DEFAULT_ZERO_TOL
from .tensor_io import TensorRecord, load_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

TASK_KINDS = ("regression_teacher", "classification_blobs")
LOSSES = ("mse", "cross_entropy")


@dataclass
class MlpModel:
    layer_sizes: list
    activation: ActivationSpec
    params: dict  # name -> float64 ndarray

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def param_names(self):
        return list(self.params)

    def copy(self):
        return MlpModel(list(self.layer_sizes), self.activation,
                        {k: v.copy() for k, v in self.params.items()})

    def to_records(self, dtype="f32"):
        return [TensorRecord.from_array(n, v, dtype) for n, v in self.params.items()]

    def save(self, path):
        write_checkpoint(self.to_records(), path)

    def forward(self, x):
        """Output plus the per-layer cache ``[(input, preactivation), ...]``."""
        h = np.asarray(x, dtype=np.float64)
        cache = []
        for i in range(self.n_layers):
            W = self.params[f"layers.{i}.weight"]
            b = self.params[f"layers.{i}.bias"]
            z = h @ W.T + b
            cache.append((h, z))
            h = self.activation(z) if i < self.n_layers - 1 else z
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]


def build_mlp(layer_sizes, activation="tanh", seed=0):
    """Fan-in scaled uniform init, ``U(-1/sqrt(in), 1/sqrt(in))`` for weights and biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigError(f"need at least an input and an output size, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    if not isinstance(activation, ActivationSpec):
        activation = ActivationSpec.parse(str(activation))
    rng = make_rng((seed, 101))
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        # round through f32 so the checkpoint round-trips to the same model
        params[f"layers.{i}.weight"] = rng.uniform(-bound, bound, (fan_out, fan_in)).astype(np.float32).astype(np.float64)
        params[f"layers.{i}.bias"] = rng.uniform(-bound, bound, fan_out).astype(np.float32).astype(np.float64)
    return MlpModel(sizes, activation, params)


def model_from_view(view, layer_sizes, activation="tanh"):
    from .tensor_io import read_tensor

    if not isinstance(activation, ActivationSpec):
        activation = ActivationSpec.parse(str(activation))
    params = {n: read_tensor(view, n).values().astype(np.float64) for n in view.entries}
    expected = build_mlp(layer_sizes, activation, 0)
    for name, ref in expected.params.items():
        if name not in params or params[name].shape != ref.shape:
            raise ConfigError(f"checkpoint does not match layer sizes {layer_sizes} at {name}")
    return MlpModel(list(layer_sizes), activation, {n: params[n] for n in expected.params})


# ----------------------------------------------------------------------------
# losses and gradients


def loss_and_grad_output(out, y, loss):
    """Scalar loss and its gradient w.r.t. the network output."""
    n = out.shape[0]
    if loss == "mse":
        diff = out - y
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    if loss == "cross_entropy":
        labels = np.asarray(y, dtype=np.int64).reshape(-1)
        shifted = out - out.max(axis=1, keepdims=True)
        log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        log_p = shifted - log_z
        value = -float(np.mean(log_p[np.arange(n), labels]))
        grad = np.exp(log_p)
        grad[np.arange(n), labels] -= 1.0
        return value, grad / n
    raise ConfigError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def loss_value(model, x, y, loss):
    return loss_and_grad_output(model(x), y, loss)[0]


def gradients(model, x, y, loss):
    """Loss and analytic gradients for every parameter."""
    out, cache = model.forward(x)
    value, delta = loss_and_grad_output(out, y, loss)
    grads = {}
    for i in reversed(range(model.n_layers)):
        h_in, z = cache[i]
        if i < model.n_layers - 1:
            delta = delta * model.activation.derivative(z)
        grads[f"layers.{i}.weight"] = delta.T @ h_in
        grads[f"layers.{i}.bias"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.params[f"layers.{i}.weight"]
    return value, grads


def finite_difference_gradients(model, x, y, loss, step=1e-4):
    """Central differences of the loss for every parameter entry."""
    grads = {}
    for name, p in model.params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + step
            up = loss_value(model, x, y, loss)
            flat[j] = saved - step
            down = loss_value(model, x, y, loss)
            flat[j] = saved
            gflat[j] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


# ----------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "regression_teacher"
    input_dim: int = 16
    output_dim: int = 8
    n_train: int = 512
    n_eval: int = 512
    seed: int = 0
    noise: float = 0.0
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        for f in ("input_dim", "output_dim", "n_train", "n_eval", "hidden"):
            if int(getattr(self, f)) < 1:
                raise ConfigError(f"task {f} must be >= 1")
        if self.kind == "classification_blobs" and self.output_dim < 2:
            raise ConfigError("classification needs output_dim >= 2 classes")
        if self.noise < 0:
            raise ConfigError("task noise must be >= 0")

    @property
    def loss(self):
        return "mse" if self.kind == "regression_teacher" else "cross_entropy"


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    loss: str


def make_synthetic_task(task):
    """Deterministic train/eval split for ``task``.

    ``regression_teacher`` labels Gaussian inputs with a hidden random
    one-hidden-layer tanh teacher (plus optional Gaussian label noise).
    ``classification_blobs`` draws one Gaussian cluster per class around
    centres at distance ~3 from the origin; ``noise`` is the cluster std.
    """
    rng = make_rng((task.seed, 202))
    n = task.n_train + task.n_eval
    d, k = task.input_dim, task.output_dim
    if task.kind == "regression_teacher":
        W1 = box_muller(rng, (task.hidden, d)) / math.sqrt(d)
        b1 = 0.1 * box_muller(rng, task.hidden)
        W2 = box_muller(rng, (k, task.hidden)) / math.sqrt(task.hidden)
        x = box_muller(rng, (n, d))
        y = np.tanh(x @ W1.T + b1) @ W2.T
        if task.noise > 0:
            y = y + task.noise * box_muller(rng, (n, k))
    else:
        centres = box_muller(rng, (k, d))
        centres *= 3.0 / np.linalg.norm(centres, axis=1, keepdims=True)
        y = rng.integers(0, k, n)
        x = centres[y] + task.noise * box_muller(rng, (n, d))
    return Dataset(x[: task.n_train], y[: task.n_train], x[task.n_train:], y[task.n_train:], task.loss)


# ----------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.05
    epochs: int = 200
    batch: int = 0  # 0 = full batch
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 0 or self.batch < 0:
            raise ConfigError("epochs and batch must be >= 0")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")


@dataclass
class TrainReport:
    initial_loss: float
    epoch_losses: list
    trainable: list

    @property
    def final_loss(self):
        return self.epoch_losses[-1] if self.epoch_losses else self.initial_loss


def train_task(model, dataset, mask, hyper, context=""):
    """Gradient descent on ``dataset`` updating only tensors with ``mask`` true.

    Mutates ``model`` in place. ``epoch_losses[e]`` is the full training-set
    loss after epoch ``e + 1``.
    """
    if mask is None:
        mask = TrainabilityMask.all(model.param_names(), True)
    flags = mask.flags if isinstance(mask, TrainabilityMask) else dict(mask)
    extra = set(n for n, on in flags.items() if on) - set(model.params)
    if extra:
        raise ConfigError(f"mask names not in model: {sorted(extra)}")
    trainable = [n for n in model.params if flags.get(n, False)]

    x, y = dataset.x_train, dataset.y_train
    n = x.shape[0]
    batch = hyper.batch or n
    rng = make_rng((hyper.seed, 303))
    initial = loss_value(model, x, y, hyper.loss)
    if not math.isfinite(initial):
        raise DivergenceError(0, context)
    losses = []
    for epoch in range(1, hyper.epochs + 1):
        if trainable:
            order = rng.permutation(n) if batch < n else np.arange(n)
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                _, grads = gradients(model, x[idx], y[idx], hyper.loss)
                for name in trainable:
                    model.params[name] -= hyper.lr * grads[name]
        value = loss_value(model, x, y, hyper.loss)
        if not math.isfinite(value):
            raise DivergenceError(epoch, context)
        losses.append(value)
    return TrainReport(initial, losses, trainable)


# ----------------------------------------------------------------------------
# forgetting experiment


@dataclass
class ExperimentConfig:
    layer_sizes: list = field(default_factory=lambda: [16, 32, 32, 32, 8])
    activation: str = "tanh"
    task_a: SyntheticTask = field(default_factory=lambda: SyntheticTask(seed=1))
    task_b: SyntheticTask = field(default_factory=lambda: SyntheticTask(seed=2))
    budget_fraction: float = 0.25
    strategies: list = field(default_factory=lambda: ["lowest_kappa", "highest_kappa"])
    seeds: list = field(default_factory=lambda: list(range(10)))
    # pre-training runs to convergence: selection assumes a trained model
    pretrain: Hyper = field(default_factory=lambda: Hyper(lr=0.2, epochs=2000))
    finetune: Hyper = field(default_factory=lambda: Hyper(lr=0.05, epochs=200))
    zero_tol: float = DEFAULT_ZERO_TOL
    exclude: list = field(default_factory=list)

    def validate(self):
        if len(self.layer_sizes) < 2:
            raise ConfigError("layer_sizes: need at least 2 sizes")
        for name in ("task_a", "task_b"):
            t = getattr(self, name)
            if t.input_dim != self.layer_sizes[0] or t.output_dim != self.layer_sizes[-1]:
                raise ConfigError(f"{name}: input/output dims must match layer_sizes ends")
            if t.loss != self.task_a.loss:
                raise ConfigError(f"{name}: both tasks must share one loss kind")
        if len(self.strategies) < 2:
            raise ConfigError("strategies: at least 2 strategies are required")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"strategies: unknown strategy {s!r}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("strategies: duplicates")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        budget_from_fraction(self.budget_fraction, 1)
        ActivationSpec.parse(self.activation)
        return self

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        kw = dict(raw)
        try:
            for name in ("task_a", "task_b"):
                if name in kw:
                    kw[name] = _build(SyntheticTask, kw[name], name)
            for name in ("pretrain", "finetune"):
                if name in kw:
                    kw[name] = _build(Hyper, kw[name], name)
            if "layer_sizes" in kw:
                sizes = kw["layer_sizes"]
                if not isinstance(sizes, list) or not all(isinstance(s, int) and s >= 1 for s in sizes):
                    raise ConfigError("layer_sizes: must be a list of positive integers")
            if "seeds" in kw and not (
                isinstance(kw["seeds"], list) and all(isinstance(s, int) for s in kw["seeds"])
            ):
                raise ConfigError("seeds: must be a list of integers")
            if "budget_fraction" in kw and not isinstance(kw["budget_fraction"], (int, float)):
                raise ConfigError("budget_fraction: must be a number")
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)


def _build(klass, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: must be an object")
    unknown = set(raw) - set(klass.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    try:
        return klass(**raw)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def default_config_path():
    return Path(__file__).with_name("data") / "forgetting_default.json"


@dataclass
class RunResult:
    seed: int
    strategy: str
    selected: list
    selected_params: int
    loss_a_before_b: float
    loss_a_after_b: float
    loss_b_before: float
    loss_b_final: float
    frozen_intact: bool

    @property
    def forgetting(self):
        return self.loss_a_after_b - self.loss_a_before_b

    def to_dict(self):
        d = asdict(self)
        d["forgetting"] = self.forgetting
        return d


@dataclass
class ForgettingReport:
    config: dict
    runs: list
    plans: dict = field(default_factory=dict)  # "seed/strategy" -> plan json text

    @property
    def seeds(self):
        return sorted({r.seed for r in self.runs})

    def medians(self):
        out = {}
        for strategy in self.config["strategies"]:
            rows = [r for r in self.runs if r.strategy == strategy]
            out[strategy] = {
                "forgetting": statistics.median(r.forgetting for r in rows),
                "loss_a_after_b": statistics.median(r.loss_a_after_b for r in rows),
                "loss_b_final": statistics.median(r.loss_b_final for r in rows),
            }
        return out

    @property
    def frozen_intact(self):
        return all(r.frozen_intact for r in self.runs)

    def claim(self):
        """Status of the directional claim lowest_kappa < highest_kappa."""
        strategies = self.config["strategies"]
        if "lowest_kappa" not in strategies or "highest_kappa" not in strategies:
            return "not applicable"
        if len(self.seeds) < 3:
            return "insufficient seeds for median claim"
        med = self.medians()
        if med["lowest_kappa"]["forgetting"] < med["highest_kappa"]["forgetting"]:
            return "holds"
        return "violated"

    def to_dict(self):
        return {
            "config": self.config,
            "runs": [r.to_dict() for r in sorted(self.runs, key=lambda r: (r.strategy, r.seed))],
            "medians": self.medians(),
            "claim": self.claim(),
            "frozen_intact": self.frozen_intact,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        cols = ["strategy", "seed", "loss_a_before_b", "loss_a_after_b", "forgetting",
                "loss_b_before", "loss_b_final", "selected_params", "frozen_intact"]
        writer = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in sorted(self.runs, key=lambda r: (r.strategy, r.seed)):
            writer.writerow({k: v for k, v in r.to_dict().items() if k in cols})
        return buf.getvalue()


def _frozen_unchanged(before, after, mask):
    return all(
        before.params[n].tobytes() == after.params[n].tobytes()
        for n, on in mask.flags.items()
        if not on
    )


def _run_seed(cfg, seed, workdir):
    model = build_mlp(cfg.layer_sizes, cfg.activation, seed)
    task_a = make_synthetic_task(replace(cfg.task_a, seed=cfg.task_a.seed * 100_003 + seed))
    task_b = make_synthetic_task(replace(cfg.task_b, seed=cfg.task_b.seed * 100_003 + seed))
    loss = task_a.loss
    pre = replace(cfg.pretrain, loss=loss, seed=seed)
    fine = replace(cfg.finetune, loss=loss, seed=seed)
    ctx = f"seed {seed}"
    train_task(model, task_a, None, pre, context=f"{ctx} pretrain")

    snapshot = Path(workdir) / f"snapshot_seed{seed}.ktan"
    model.save(snapshot)
    view = load_checkpoint(snapshot)
    filt = EligibilityFilter().with_excludes(*cfg.exclude)
    k = budget_from_fraction(cfg.budget_fraction, len(eligible_tensors(view, filt)))

    loss_a_before = loss_value(model, task_a.x_eval, task_a.y_eval, loss)
    loss_b_before = loss_value(model, task_b.x_eval, task_b.y_eval, loss)
    results, plans = [], {}
    for strategy in cfg.strategies:
        if k == 0:
            plan = None
        else:
            plan = make_plan(view, filt, k, strategy, cfg.zero_tol, seed)
            plans[f"{seed}/{strategy}"] = plan.to_json()
        mask = apply_plan_mask(model.param_names(), plan)
        tuned = model.copy()
        train_task(tuned, task_b, mask, fine, context=f"{ctx} {strategy}")
        results.append(RunResult(
            seed=seed,
            strategy=strategy,
            selected=plan.names if plan else [],
            selected_params=int(sum(model.params[n].size for n in mask.trainable)),
            loss_a_before_b=loss_a_before,
            loss_a_after_b=loss_value(tuned, task_a.x_eval, task_a.y_eval, loss),
            loss_b_before=loss_b_before,
            loss_b_final=loss_value(tuned, task_b.x_eval, task_b.y_eval, loss),
            frozen_intact=_frozen_unchanged(model, tuned, mask),
        ))
    return results, plans


def forgetting_experiment(cfg, workdir=None):
    """Run every (seed, strategy) pair of ``cfg``; a pure function of the config."""
    if isinstance(cfg, dict):
        cfg = ExperimentConfig.from_dict(cfg)
    cfg.validate()
    if len(cfg.seeds) < 3:
        log.warning("only %d seed(s): median comparison is not meaningful", len(cfg.seeds))
    runs, plans = [], {}
    with tempfile.TemporaryDirectory() as tmp:
        for seed in cfg.seeds:
            r, p = _run_seed(cfg, seed, workdir or tmp)
            runs.extend(r)
            plans.update(p)
    return ForgettingReport(config=copy.deepcopy(cfg.to_dict()), runs=runs, plans=plans)
