"""Feed-forward safe/unsafe classifier over decoding states.

The input for a candidate next-word is the concatenation

    [h_t, tanh(W_dc d_t), emb(candidate), emb(x_{t-2}), emb(x_{t-1}), emb(x_t)]

using the generator's frozen embedding and control-projection matrices.
Positions before the sentence start are backfilled with the start-token
embedding. The classifier itself is three affine layers with ReLU between
them and a 2-way softmax on top; class 1 means safe.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import ShapeError
from .generator import GeneratorModel, StepContext
from .numkit import ParamStore, TrainConfig
from .util import rng_for

SAFE_THRESHOLD = 0.5
SAFE_CLASS = 1


def default_meta_train_config(seed: int = 0, epochs: int = 30) -> TrainConfig:
    """Plain-SGD settings for the classifier (rate 0.05, 30 epochs)."""
    return TrainConfig(
        learning_rate=0.05, clip_threshold=1.0, epochs=epochs, patience=epochs, seed=seed
    )


class MetaModel:
    """Classifier parameters plus the feature layout they expect."""

    def __init__(self, store: ParamStore, hidden_size: int, gen_hidden: int, gen_embed: int):
        self.store = store
        self.hidden_size = hidden_size
        self.gen_hidden = gen_hidden
        self.gen_embed = gen_embed
        self.feature_size = 2 * gen_hidden + 4 * gen_embed
        if store.params["W1"].shape != (hidden_size, self.feature_size):
            raise ShapeError("W1 does not match the declared feature size")

    @staticmethod
    def create(gen_model: GeneratorModel, hidden_size: int = 128, seed: int = 0) -> "MetaModel":
        feat = 2 * gen_model.hidden_size + 4 * gen_model.embed_size
        rng = rng_for(seed, "init-meta", feat, hidden_size)

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        store = ParamStore()
        store.add("W1", uniform((hidden_size, feat), feat))
        store.add("b1", np.zeros(hidden_size))
        store.add("W2", uniform((hidden_size, hidden_size), hidden_size))
        store.add("b2", np.zeros(hidden_size))
        store.add("W3", uniform((2, hidden_size), hidden_size))
        store.add("b3", np.zeros(2))
        return MetaModel(store, hidden_size, gen_model.hidden_size, gen_model.embed_size)

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "kind": "meta",
            "hidden_size": self.hidden_size,
            "gen_hidden": self.gen_hidden,
            "gen_embed": self.gen_embed,
        }
        meta.update(extra_meta or {})
        numkit.save_checkpoint(path, self.store, meta)

    @staticmethod
    def load(path) -> "MetaModel":
        store, meta = numkit.load_checkpoint(path)
        model = MetaModel(
            store, meta["hidden_size"], meta["gen_hidden"], meta["gen_embed"]
        )
        model.meta = meta
        return model


# -- features ---------------------------------------------------------------------


def control_feature(ctx: StepContext, gen_model: GeneratorModel) -> np.ndarray:
    """tanh(W_dc d_t); zero when the control vector has width 0."""
    return np.tanh(gen_model.store.params["W_dc"] @ ctx.d)


def build_features(ctx: StepContext, candidate: int, gen_model: GeneratorModel) -> np.ndarray:
    emb = gen_model.store.params["W_wr"]
    x2, x1, x0 = ctx.last3
    return np.concatenate(
        [ctx.h, control_feature(ctx, gen_model), emb[candidate], emb[x2], emb[x1], emb[x0]]
    )


def features_batch(ctx: StepContext, cand_ids, gen_model: GeneratorModel) -> np.ndarray:
    """Feature rows for several candidates at one context."""
    emb = gen_model.store.params["W_wr"]
    cand_ids = np.asarray(cand_ids, dtype=np.int64)
    x2, x1, x0 = ctx.last3
    shared = np.concatenate(
        [ctx.h, control_feature(ctx, gen_model), emb[x2], emb[x1], emb[x0]]
    )
    b = cand_ids.shape[0]
    feat = np.empty((b, 2 * ctx.h.size + 4 * emb.shape[1]))
    split = ctx.h.size * 2
    feat[:, :split] = shared[:split]
    feat[:, split : split + emb.shape[1]] = emb[cand_ids]
    feat[:, split + emb.shape[1] :] = shared[split:]
    return feat


# -- forward / backward -------------------------------------------------------------


def _forward(store: ParamStore, X: np.ndarray):
    p = store.params
    z1 = X @ p["W1"].T + p["b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ p["W2"].T + p["b2"]
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ p["W3"].T + p["b3"]
    probs = numkit.softmax_rows(z3)
    return probs, (X, z1, a1, z2, a2)


def _backward(store: ParamStore, probs, labels, cache) -> None:
    """Accumulate gradients of the mean cross-entropy over the batch."""
    X, z1, a1, z2, a2 = cache
    p = store.params
    g = store.grads
    b = X.shape[0]
    dz3 = probs.copy()
    dz3[np.arange(b), labels] -= 1.0
    dz3 /= b
    g["W3"] += dz3.T @ a2
    g["b3"] += dz3.sum(axis=0)
    da2 = dz3 @ p["W3"]
    dz2 = da2 * (z2 > 0.0)
    g["W2"] += dz2.T @ a1
    g["b2"] += dz2.sum(axis=0)
    da1 = dz2 @ p["W2"]
    dz1 = da1 * (z1 > 0.0)
    g["W1"] += dz1.T @ X
    g["b1"] += dz1.sum(axis=0)


def predict_safe_batch(feats: np.ndarray, meta: MetaModel) -> np.ndarray:
    probs, _ = _forward(meta.store, feats)
    return probs[:, SAFE_CLASS]


def predict_safe(feature: np.ndarray, meta: MetaModel) -> float:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (meta.feature_size,):
        raise ShapeError(
            f"feature has shape {feature.shape}, expected ({meta.feature_size},)"
        )
    return float(predict_safe_batch(feature[None, :], meta)[0])


def meta_loss_with_grads(meta: MetaModel, feats: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over the batch; accumulates analytic gradients."""
    probs, cache = _forward(meta.store, feats)
    b = feats.shape[0]
    eps_floor = 1e-300
    loss = -float(
        np.log(np.maximum(probs[np.arange(b), labels], eps_floor)).mean()
    )
    _backward(meta.store, probs, labels, cache)
    return loss


# -- safe vectors --------------------------------------------------------------------


@dataclass
class SafeVector:
    """Vocabulary-length binary safety judgments plus a probability-ranked view."""

    B: np.ndarray  # (V,) uint8, indexed by token id
    ranked_ids: np.ndarray  # token ids in descending model probability
    ranked: np.ndarray  # B re-ordered by ranked_ids


def safe_vector(
    ctx: StepContext,
    dist: np.ndarray,
    meta: MetaModel,
    gen_model: GeneratorModel,
    threshold: float = SAFE_THRESHOLD,
) -> SafeVector:
    """Classify every vocabulary word as safe/unsafe at this context."""
    all_ids = np.arange(gen_model.vocab_size, dtype=np.int64)
    feats = features_batch(ctx, all_ids, gen_model)
    p_safe = predict_safe_batch(feats, meta)
    bvec = (p_safe > threshold).astype(np.uint8)
    ranked_ids = np.argsort(-dist, kind="stable")
    return SafeVector(B=bvec, ranked_ids=ranked_ids, ranked=bvec[ranked_ids])


def safe_prefix(
    dist: np.ndarray,
    ctx: StepContext,
    meta: MetaModel,
    gen_model: GeneratorModel,
    eps: float = 1e-8,
    threshold: float = SAFE_THRESHOLD,
    chunk: int = 8,
    cap: int | None = None,
) -> list:
    """Maximal run of consecutive probability-ranked safe words with prob > eps.

    Evaluates the classifier lazily in rank order (prefixes are short in
    practice), which is observationally identical to scanning a full
    SafeVector. `cap` optionally restricts the scan to the top-cap ranks.
    """
    ranked_ids = np.argsort(-dist, kind="stable")
    if cap is not None:
        ranked_ids = ranked_ids[:cap]
    prefix = []
    for start in range(0, ranked_ids.size, chunk):
        ids = ranked_ids[start : start + chunk]
        keep = dist[ids] > eps
        if not keep.any():
            return prefix
        feats = features_batch(ctx, ids, gen_model)
        p_safe = predict_safe_batch(feats, meta)
        for ok, idx, p in zip(keep, ids, p_safe):
            if not ok or p <= threshold:
                return prefix
            prefix.append(int(idx))
    return prefix


# -- samples and training ---------------------------------------------------------------


@dataclass(frozen=True)
class MetaSample:
    """One (feature, label) training instance with collection provenance."""

    feature: np.ndarray
    label: int
    sent_id: int = -1
    step: int = -1
    rank: int = -1
    iteration: int = 0
    source: str = "expert"  # expert | learned


class SampleBank:
    """Columnar store of meta-classifier samples.

    Contexts are shared across the candidates collected at one step, and
    candidate embeddings are expanded lazily from the generator's frozen
    embedding matrix, so memory stays linear in steps rather than samples.
    """

    def __init__(self, gen_model: GeneratorModel):
        self.emb = gen_model.store.params["W_wr"]
        self.gen_hidden = gen_model.hidden_size
        self.gen_embed = gen_model.embed_size
        self._ctx_h: list = []
        self._ctx_dfeat: list = []
        self._ctx_last3: list = []
        self.ctx_idx: list = []
        self.cand: list = []
        self.label: list = []
        self.sent_id: list = []
        self.step: list = []
        self.rank: list = []
        self.iteration: list = []
        self.source: list = []

    def __len__(self):
        return len(self.cand)

    def add_step(
        self,
        ctx: StepContext,
        dfeat: np.ndarray,
        cand_ids,
        labels,
        sent_id: int,
        step: int,
        iteration: int,
        source: str,
    ) -> None:
        ci = len(self._ctx_h)
        self._ctx_h.append(np.asarray(ctx.h, dtype=np.float64))
        self._ctx_dfeat.append(np.asarray(dfeat, dtype=np.float64))
        self._ctx_last3.append(ctx.last3)
        for rank, (cand, label) in enumerate(zip(cand_ids, labels)):
            self.ctx_idx.append(ci)
            self.cand.append(int(cand))
            self.label.append(int(label))
            self.sent_id.append(sent_id)
            self.step.append(step)
            self.rank.append(rank)
            self.iteration.append(iteration)
            self.source.append(source)

    def extend(self, other: "SampleBank") -> None:
        offset = len(self._ctx_h)
        self._ctx_h.extend(other._ctx_h)
        self._ctx_dfeat.extend(other._ctx_dfeat)
        self._ctx_last3.extend(other._ctx_last3)
        self.ctx_idx.extend(ci + offset for ci in other.ctx_idx)
        for name in ("cand", "label", "sent_id", "step", "rank", "iteration", "source"):
            getattr(self, name).extend(getattr(other, name))

    def _frozen(self):
        return (
            np.asarray(self._ctx_h),
            np.asarray(self._ctx_dfeat),
            np.asarray(self._ctx_last3, dtype=np.int64),
            np.asarray(self.ctx_idx, dtype=np.int64),
            np.asarray(self.cand, dtype=np.int64),
            np.asarray(self.label, dtype=np.int64),
        )

    def features_for(self, idx: np.ndarray) -> tuple:
        """(features, labels) for the given sample indices."""
        ctx_h, ctx_dfeat, ctx_last3, ctx_idx, cand, label = self._frozen_cache()
        ci = ctx_idx[idx]
        e = self.emb
        parts = [
            ctx_h[ci],
            ctx_dfeat[ci],
            e[cand[idx]],
            e[ctx_last3[ci, 0]],
            e[ctx_last3[ci, 1]],
            e[ctx_last3[ci, 2]],
        ]
        return np.concatenate(parts, axis=1), label[idx]

    def _frozen_cache(self):
        cached = getattr(self, "_cache", None)
        if cached is None or cached[0].shape[0] != len(self._ctx_h) or cached[4].shape[0] != len(self.cand):
            cached = self._frozen()
            self._cache = cached
        return cached

    def positive_fraction(self) -> float:
        if not self.label:
            return 0.0
        return float(np.mean(self.label))

    def samples(self):
        """Materialize MetaSample objects (small banks / inspection only)."""
        out = []
        for i in range(len(self)):
            feats, labels = self.features_for(np.array([i]))
            out.append(
                MetaSample(
                    feature=feats[0],
                    label=int(labels[0]),
                    sent_id=self.sent_id[i],
                    step=self.step[i],
                    rank=self.rank[i],
                    iteration=self.iteration[i],
                    source=self.source[i],
                )
            )
        return out


@dataclass
class MetaTrainReport:
    epochs: int
    losses: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    final_accuracy: float = 0.0


def _as_bank_arrays(samples, meta: MetaModel):
    """Accept a SampleBank or an iterable of MetaSample."""
    if isinstance(samples, SampleBank):
        return samples
    feats = np.asarray([s.feature for s in samples], dtype=np.float64)
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    if feats.ndim != 2 or feats.shape[1] != meta.feature_size:
        raise ShapeError("sample features do not match the classifier input size")
    return feats, labels


def train_meta(
    samples,
    meta: MetaModel,
    cfg: TrainConfig | None = None,
    batch_size: int = 512,
    shuffle: bool = True,
) -> tuple:
    """Mini-batch SGD on 2-class cross-entropy; returns (meta, report).

    Deterministic: batch order is a seeded permutation per epoch (or the
    collection order when shuffle is disabled).
    """
    cfg = cfg or default_meta_train_config()
    bank = _as_bank_arrays(samples, meta)
    if isinstance(bank, SampleBank):
        n = len(bank)
        get = bank.features_for
        label_view = np.asarray(bank.label, dtype=np.int64)
    else:
        feats, labels = bank
        n = feats.shape[0]
        get = lambda idx: (feats[idx], labels[idx])
        label_view = labels
    if n == 0:
        raise ValueError("empty sample set")
    report = MetaTrainReport(epochs=cfg.epochs)
    classes = np.unique(label_view)
    if classes.size == 1:
        report.warnings.append(f"all samples share label {int(classes[0])}")
    for epoch in range(cfg.epochs):
        if shuffle:
            order = rng_for(cfg.seed, "meta-epoch", epoch).permutation(n)
        else:
            order = np.arange(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            X, y = get(idx)
            meta.store.zero_grads()
            loss = meta_loss_with_grads(meta, X, y)
            for name, p in meta.store.params.items():
                p -= cfg.learning_rate * meta.store.grads[name]
            total += loss * idx.size
        report.losses.append(total / n)
    # final training accuracy, batched
    correct = 0
    for start in range(0, n, 4096):
        idx = np.arange(start, min(n, start + 4096))
        X, y = get(idx)
        p_safe = predict_safe_batch(X, meta)
        correct += int(((p_safe > SAFE_THRESHOLD).astype(np.int64) == y).sum())
    report.final_accuracy = correct / n
    meta.store.zero_grads()
    return meta, report
