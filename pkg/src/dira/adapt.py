"""EWC-regularised few-sample adaptation that always restarts from the source model."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .data import LabeledSet, batches
from .errors import ConfigError, NumericError
from .fisher import FisherDiag, check_pairing, load_fisher
from .models import Model, ParamSet


@dataclass(frozen=True)
class AdaptConfig:
    eta: float = 1e-5
    lam: float = 1.0
    epochs: int = 10
    batch_size: int | None = None  # None -> min(32, |S_T|)
    seed: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")

    def resolved_batch(self, n: int) -> int:
        return self.batch_size if self.batch_size is not None else min(32, n)


@dataclass
class AdaptResult:
    adapted_params: ParamSet
    loss_trace: list[tuple[float, float]] = field(default_factory=list)
    n_samples_used: int = 0
    config_echo: AdaptConfig = field(default_factory=AdaptConfig)

    def to_record(self) -> str:
        """Canonical one-line JSON record (parameters summarised by digest)."""
        flat = self.adapted_params.flatten().astype("<f4")
        return json.dumps({
            "config": asdict(self.config_echo),
            "n_samples_used": self.n_samples_used,
            "steps": len(self.loss_trace),
            "loss_trace": [[float(a), float(b)] for a, b in self.loss_trace],
            "params_digest": models.digest(flat.tobytes()),
        }, sort_keys=True, separators=(",", ":"))


def _aligned(theta_names, theta_shapes, other: ParamSet | FisherDiag, what: str) -> None:
    names = other.names
    if list(theta_names) != names:
        for a, b in zip(list(theta_names) + [None] * len(names), names + [None] * len(theta_names)):
            if a != b:
                raise ConfigError(f"{what} misaligned at entry {a or b!r}")
    for n, shape in zip(theta_names, theta_shapes):
        if other[n].shape != shape:
            raise ConfigError(f"{what} entry {n!r} has shape {other[n].shape}, expected {shape}")


def ewc_penalty(theta, theta_star: ParamSet, fisher: FisherDiag, lam: float) -> Tensor:
    """``sum_j lam/2 * F_j * (theta_j - theta_star_j)**2`` as a differentiable scalar.

    ``theta`` is a Model, a mapping of name to Tensor, or a ParamSet.
    """
    if isinstance(theta, Model):
        theta = theta.params
    elif isinstance(theta, ParamSet):
        theta = {n: Tensor(a) for n, a in theta}
    names = list(theta)
    shapes = [theta[n].shape for n in names]
    _aligned(names, shapes, theta_star, "theta_star")
    _aligned(names, shapes, fisher, "fisher")
    total = None
    half = np.float32(lam / 2.0)
    for n in names:
        t = theta[n]
        d = ad.add(t, Tensor(-theta_star[n].astype(t.dtype)))
        term = ad.sum_all(ad.mul(ad.square(d), Tensor((fisher[n] * half).astype(t.dtype))))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(np.float32(0.0))
    return total


def evaluate(model: Model, data: LabeledSet) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    return float(np.mean(model.predict(data.images) == data.labels))


def adapt_model(model0: Model, fisher: FisherDiag | None, target: LabeledSet, cfg: AdaptConfig,
                on_step=None) -> AdaptResult:
    """Run the penalised SGD loop on a private copy of ``model0``.

    Each step descends ``L_T + penalty`` with per-parameter step
    ``eta / (1 + eta * lam * F_j)``, the exact proximal step for the quadratic
    penalty. It matches plain ``theta - eta * grad`` while ``eta*lam*F`` is small
    and stays stable when the penalty is stiff.

    ``on_step(step, params)`` is called with a ParamSet after every update.
    """
    n = len(target)
    if n < 1:
        raise ConfigError("target sample set S_T is empty")
    model = model0.copy()
    theta_star = model0.snapshot()
    use_penalty = cfg.lam > 0
    if use_penalty:
        if fisher is None:
            raise ConfigError("a Fisher diagonal is required when lambda > 0")
        _aligned(list(model.params), [t.shape for t in model.params.values()], fisher, "fisher")
        eta = np.float32(cfg.eta)
        scale = {nm: (eta / (np.float32(1.0) + eta * np.float32(cfg.lam) * fisher[nm])).astype(np.float32)
                 for nm in model.params}
    rng = np.random.default_rng(cfg.seed)
    bs = cfg.resolved_batch(n)
    trace: list[tuple[float, float]] = []
    step = 0
    for _ in range(cfg.epochs):
        for idx in batches(n, bs, rng):
            model.zero_grad()
            task = ad.softmax_cross_entropy(model(target.images[idx]), target.labels[idx])
            if use_penalty:
                pen = ewc_penalty(model, theta_star, fisher, cfg.lam)
                total = ad.add(task, pen)
                pen_val = pen.item()
            else:
                total, pen_val = task, 0.0
            task_val = task.item()
            if not (math.isfinite(task_val) and math.isfinite(pen_val)):
                raise NumericError(f"non-finite loss at step {step}")
            total.backward()
            with ad.no_grad():
                for nm, t in model.params.items():
                    if use_penalty:
                        t.data = t.data - scale[nm] * t.grad
                    else:
                        t.data = t.data - np.float32(cfg.eta) * t.grad
            trace.append((task_val, pen_val))
            if on_step is not None:
                on_step(step, model.snapshot())
            step += 1
    model.zero_grad()
    return AdaptResult(model.snapshot(), trace, n, cfg)


def _load_source(m0) -> Model:
    if isinstance(m0, Model):
        return m0.copy()
    return models.load(m0)


def dira_adapt(m0_path, fisher_path, target_samples: LabeledSet, cfg: AdaptConfig, on_step=None) -> AdaptResult:
    """Adapt a fresh copy of the stored source model to ``target_samples``.

    ``m0_path`` / ``fisher_path`` may also be an in-memory Model / FisherDiag.
    The stored source model is never modified.
    """
    if len(target_samples) < 1:
        raise ConfigError("target sample set S_T is empty")
    model0 = _load_source(m0_path)
    if isinstance(fisher_path, FisherDiag):
        fisher = fisher_path
        check_pairing(fisher, model0)
    else:
        fisher = load_fisher(fisher_path, checkpoint=m0_path if isinstance(m0_path, (str, Path)) else model0)
    return adapt_model(model0, fisher, target_samples, cfg, on_step)


def naive_sgd_adapt(m0_path, target_samples: LabeledSet, eta: float = 1e-5, epochs: int = 10,
                    batch_size: int | None = None, seed: int = 0, on_step=None) -> AdaptResult:
    """Plain SGD on the target samples: the unregularised baseline."""
    cfg = AdaptConfig(eta=eta, lam=0.0, epochs=epochs, batch_size=batch_size, seed=seed)
    if len(target_samples) < 1:
        raise ConfigError("target sample set S_T is empty")
    return adapt_model(_load_source(m0_path), None, target_samples, cfg, on_step)


def apply(model0: Model, result: AdaptResult) -> Model:
    """A new model holding ``result``'s adapted parameters."""
    m = model0.copy()
    m.restore(result.adapted_params)
    return m


def with_lambda(cfg: AdaptConfig, lam: float) -> AdaptConfig:
    return replace(cfg, lam=lam)
