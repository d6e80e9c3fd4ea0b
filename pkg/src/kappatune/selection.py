"""Condition-number based tensor selection.

A plan ranks the eligible weight tensors of a checkpoint by condition number
and keeps the first ``K`` names. ``lowest_kappa`` is the default strategy;
``highest_kappa`` is its inverse, ``random`` and ``by_name`` are controls.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from fnmatch import fnmatchcase

from . import __version__
from .errors import ConfigError, EmptyEligibleSet
from .rng import make_rng
from .spectral import DEFAULT_ZERO_TOL, summarize_view

log = logging.getLogger(__name__)

STRATEGIES = ("lowest_kappa", "highest_kappa", "random", "by_name")
DEFAULT_EXCLUDES = ("*bias*", "*norm*", "*ln*", "*embedding*")
PLAN_VERSION = 1


@dataclass(frozen=True)
class EligibilityFilter:
    min_dims: int = 2
    name_exclude_patterns: tuple = DEFAULT_EXCLUDES
    min_elements: int = 0

    def __post_init__(self):
        if self.min_dims < 2:
            raise ConfigError("min_dims must be >= 2")
        object.__setattr__(self, "name_exclude_patterns", tuple(self.name_exclude_patterns))

    def with_excludes(self, *patterns):
        return EligibilityFilter(
            self.min_dims, self.name_exclude_patterns + tuple(patterns), self.min_elements
        )

    def accepts(self, name, shape):
        if len(shape) < self.min_dims:
            return False
        numel = 1
        for d in shape:
            numel *= d
        if numel < self.min_elements:
            return False
        return not any(fnmatchcase(name, pat) for pat in self.name_exclude_patterns)


@dataclass(frozen=True)
class SelectionPlan:
    strategy: str
    budget: int
    selected: tuple  # ((name, kappa), ...) in rank order
    checkpoint_sha256: str
    zero_tol: float
    seed: int = 0
    created_from: str = f"kappatune/{__version__}"

    @property
    def names(self):
        return [name for name, _ in self.selected]

    def to_dict(self):
        d = {
            "version": PLAN_VERSION,
            "strategy": self.strategy,
            "budget": self.budget,
            "zero_tol": self.zero_tol,
            "checkpoint_sha256": self.checkpoint_sha256,
            "selected": [{"name": n, "kappa": k} for n, k in self.selected],
            "created_from": self.created_from,
        }
        if self.strategy == "random":
            d["experimental_control"] = True
            d["seed"] = self.seed
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != PLAN_VERSION:
            raise ConfigError(f"unsupported plan version {d.get('version')!r}")
        return cls(
            strategy=d["strategy"],
            budget=int(d["budget"]),
            selected=tuple((s["name"], float(s["kappa"])) for s in d["selected"]),
            checkpoint_sha256=d["checkpoint_sha256"],
            zero_tol=float(d["zero_tol"]),
            seed=int(d.get("seed", 0)),
            created_from=d.get("created_from", ""),
        )

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainabilityMask:
    flags: dict
    unknown: list = field(default_factory=list)

    def __getitem__(self, name):
        return self.flags[name]

    @property
    def trainable(self):
        return [n for n, on in self.flags.items() if on]

    @classmethod
    def all(cls, names, value):
        return cls({n: bool(value) for n in names})


def eligible_tensors(view, filt=None):
    filt = filt or EligibilityFilter()
    return sorted(n for n, e in view.entries.items() if filt.accepts(n, e.shape))


def rank_by_kappa(summaries, order="ascending"):
    if order == "ascending":
        key = lambda s: (s.kappa, s.name)  # noqa: E731
    elif order == "descending":
        key = lambda s: (-s.kappa, s.name)  # noqa: E731
    else:
        raise ConfigError(f"order must be ascending or descending, got {order!r}")
    return sorted(summaries, key=key)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_plan(view, filt=None, k=1, strategy="lowest_kappa", zero_tol=DEFAULT_ZERO_TOL,
              seed=0, threads=1):
    """Rank the eligible tensors of ``view`` and keep the first ``k``."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if int(k) < 1:
        raise ConfigError("budget K must be >= 1")
    names = eligible_tensors(view, filt)
    if not names:
        raise EmptyEligibleSet(f"{view.path}: no eligible tensors")

    def warn_zero(name):
        log.warning("%s: all-zero spectrum, excluded from ranking", name)

    summaries = summarize_view(view, names, zero_tol, threads=threads, on_zero=warn_zero)
    if not summaries:
        raise EmptyEligibleSet(f"{view.path}: every eligible tensor is all-zero")

    if strategy == "lowest_kappa":
        ranked = rank_by_kappa(summaries, "ascending")
    elif strategy == "highest_kappa":
        ranked = rank_by_kappa(summaries, "descending")
    elif strategy == "by_name":
        ranked = sorted(summaries, key=lambda s: s.name)
    else:
        order = make_rng(seed).permutation(len(summaries))
        ranked = [summaries[i] for i in order]

    chosen = ranked[: int(k)]
    return SelectionPlan(
        strategy=strategy,
        budget=int(k),
        selected=tuple((s.name, s.kappa) for s in chosen),
        checkpoint_sha256=file_sha256(view.path),
        zero_tol=float(zero_tol),
        seed=int(seed),
    )


def apply_plan_mask(param_names, plan):
    """Freeze everything, then unfreeze the plan's names that exist in the model."""
    wanted = set(plan.names) if plan is not None else set()
    params = list(param_names)
    present = set(params)
    unknown = sorted(wanted - present)
    if unknown:
        log.warning("plan names absent from model: %s", ", ".join(unknown))
    return TrainabilityMask({n: n in wanted for n in params}, unknown)


def budget_from_fraction(fraction, n_eligible):
    """Tensor budget for a fraction of the eligible set; 0 means fully frozen."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"budget_fraction must be in [0, 1], got {fraction}")
    if fraction == 0.0:
        return 0
    return max(1, int(round(fraction * n_eligible)))
