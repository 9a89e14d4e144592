"""Diagonal empirical Fisher information at the source optimum, and the ``.dirf`` format."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import LabeledSet
from .errors import ConfigError, FormatError, IntegrityError, NumericError
from .models import Model, ParamSet, digest, model_digest, read_container, write_container

FISHER_MAGIC = b"DIRF"
DEFAULT_N_SAMPLES = 1000


@dataclass(frozen=True, eq=False)
class FisherDiag:
    entries: list[tuple[str, np.ndarray]]
    n_samples: int
    source_checkpoint_hash: str

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        for name, a in self.entries:
            if (a < 0).any():
                raise NumericError(f"negative Fisher value in {name}")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def __getitem__(self, name: str) -> np.ndarray:
        for n, a in self.entries:
            if n == name:
                return a
        raise KeyError(name)

    def as_paramset(self) -> ParamSet:
        return ParamSet(self.entries)

    def equals(self, other: "FisherDiag") -> bool:
        return (self.n_samples == other.n_samples
                and self.source_checkpoint_hash == other.source_checkpoint_hash
                and self.as_paramset().equals(other.as_paramset()))


def per_sample_gradients(model: Model, data: LabeledSet, indices) -> list[dict[str, np.ndarray]]:
    """Gradient of the per-sample cross-entropy for each index, one backward pass each."""
    grads = []
    for i in indices:
        model.zero_grad()
        loss = ad.softmax_cross_entropy(model(data.images[i:i + 1]), data.labels[i:i + 1])
        loss.backward()
        grads.append({n: t.grad.copy() for n, t in model.params.items()})
    model.zero_grad()
    return grads


def estimate_fisher(model: Model, data: LabeledSet, n_samples: int | None = None, seed: int = 0) -> FisherDiag:
    """Mean of squared per-sample log-likelihood gradients over ``n_samples`` draws.

    Uses ground-truth labels (empirical Fisher). The draw is uniform without
    replacement under ``seed``; ``n_samples`` defaults to min(1000, len(data)).
    """
    if n_samples is None:
        n_samples = min(DEFAULT_N_SAMPLES, len(data))
    if n_samples < 1:
        raise ConfigError("n_samples must be positive")
    if n_samples > len(data):
        raise ConfigError(f"n_samples={n_samples} exceeds dataset size {len(data)}")
    idx = np.random.default_rng(seed).permutation(len(data))[:n_samples]
    acc = {n: np.zeros(t.shape, dtype=np.float64) for n, t in model.params.items()}
    for g in _iter_grads(model, data, idx):
        for name, gj in g.items():
            if not np.isfinite(gj).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
            acc[name] += np.square(gj, dtype=np.float64)
    entries = [(n, (a / n_samples).astype(np.float32)) for n, a in acc.items()]
    return FisherDiag(entries, n_samples, model_digest(model))


def _iter_grads(model, data, idx):
    for i in idx:
        yield per_sample_gradients(model, data, [i])[0]


def save_fisher(f: FisherDiag, path) -> None:
    meta = json.dumps({"n_samples": f.n_samples, "source_checkpoint_hash": f.source_checkpoint_hash},
                      sort_keys=True, separators=(",", ":"))
    Path(path).write_bytes(write_container(FISHER_MAGIC, meta, f.entries))


def load_fisher(path, checkpoint=None) -> FisherDiag:
    """Read a ``.dirf`` file; when ``checkpoint`` (a path or Model) is given, verify the pairing."""
    meta, entries = read_container(Path(path).read_bytes(), FISHER_MAGIC)
    try:
        m = json.loads(meta)
        f = FisherDiag(entries, int(m["n_samples"]), str(m["source_checkpoint_hash"]))
    except (ValueError, KeyError) as exc:
        raise FormatError(f"unreadable Fisher metadata in {path}: {exc}") from exc
    if checkpoint is not None:
        check_pairing(f, checkpoint)
    return f


def check_pairing(f: FisherDiag, checkpoint) -> None:
    if isinstance(checkpoint, Model):
        h = model_digest(checkpoint)
    else:
        h = digest(Path(checkpoint).read_bytes())
    if h != f.source_checkpoint_hash:
        raise IntegrityError(f"Fisher was estimated for checkpoint {f.source_checkpoint_hash}, not {h}")
