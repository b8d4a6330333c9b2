"""Minimal deterministic numeric core.

Dense float64 parameters with matching gradient and Adam moment buffers,
global-norm gradient clipping, a central-difference gradient checker, and a
bitwise round-tripping checkpoint container. Everything here is
double-precision and single-threaded by design; the models in this repo are
tiny and correctness is checked by finite differences, not eyeballed.
"""

import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Optimisation settings shared by all trainable modules."""

    learning_rate: float = 0.005
    clip_threshold: float = 0.5
    epochs: int = 30
    patience: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


class ParamStore:
    """Named float64 parameters plus gradient and Adam moment buffers.

    Mutation (gradient accumulation, optimiser steps) is single-writer;
    forward evaluation reads parameters only and is safe to share across
    threads once training is done.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite initial value for {name!r}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self._m[name] = np.zeros_like(value)
        self._v[name] = np.zeros_like(value)
        return value

    def names(self):
        return list(self.params.keys())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, value in self.params.items():
            other.add(name, value.copy())
            other._m[name][...] = self._m[name]
            other._v[name][...] = self._v[name]
            other.grads[name][...] = self.grads[name]
        other.step_count = self.step_count
        return other

    # -- flattening helpers used by the gradient checker ---------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.params.values():
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector.

    Output is nonnegative, sums to 1 within 1e-9 and preserves the argmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("softmax expects a non-empty 1-D vector")
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax input contains non-finite values")
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for a 2-D array."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def adam_step(store: ParamStore, cfg: TrainConfig) -> ParamStore:
    """One Adam update with bias correction; zeroes gradients afterwards."""
    for name, grad in store.grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    store.zero_grads()
    return store


def grad_global_norm(store: ParamStore) -> float:
    total = 0.0
    for g in store.grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def clip_gradients(store: ParamStore, threshold: float) -> ParamStore:
    """Scale all gradients so the global L2 norm is at most `threshold`.

    The comparison carries a 1e-12 relative guard band, which makes the
    operation exactly idempotent under floating point: a store whose norm was
    just scaled to the threshold is not rescaled by its rounding residue.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be > 0")
    norm = grad_global_norm(store)
    if norm > threshold * (1.0 + 1e-12):
        scale = threshold / norm
        for g in store.grads.values():
            g *= scale
    return store


def finite_diff_check(forward, store: ParamStore, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `forward(store)` must return a scalar loss, be deterministic, and leave
    `store.grads` populated with the analytic gradient of that loss. The
    central difference re-evaluates the loss only, so the comparison is
    independent of the backward implementation under test.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    store.zero_grads()
    loss_a = float(forward(store))
    analytic = store.grad_flat().copy()
    store.zero_grads()
    loss_b = float(forward(store))
    if loss_a != loss_b:
        raise ContractViolation(
            f"forward is not deterministic: {loss_a!r} != {loss_b!r}"
        )
    base = store.get_flat()
    worst = 0.0
    for i in range(base.size):
        perturbed = base.copy()
        perturbed[i] = base[i] + epsilon
        store.set_flat(perturbed)
        store.zero_grads()
        up = float(forward(store))
        perturbed[i] = base[i] - epsilon
        store.set_flat(perturbed)
        store.zero_grads()
        down = float(forward(store))
        numeric = (up - down) / (2.0 * epsilon)
        rel = abs(analytic[i] - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, rel)
    store.set_flat(base)
    store.zero_grads()
    return worst


# -- checkpoint container -----------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Write parameters plus a JSON metadata block to a single .npz file.

    float64 values survive the round trip bitwise, so a reloaded model
    reproduces forward outputs exactly.
    """
    meta = dict(meta or {})
    meta["format_version"] = CHECKPOINT_VERSION
    arrays = {f"param/{name}": value for name, value in store.params.items()}
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('format_version')!r}"
            )
        store = ParamStore()
        for key in data.files:
            if key.startswith("param/"):
                store.add(key[len("param/") :], data[key])
    return store, meta
