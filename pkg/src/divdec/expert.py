"""Dynamic oracle labelling candidate next-words as safe or unsafe.

For each of the top-n candidates at a decode step, the oracle forces the
candidate, lets the generator continue greedily, and scores the fixed window
[previous word, candidate, next 4 words] by clipped n-gram precision (orders
1..4, geometric mean, no brevity penalty) against the references retrieved for
the MR's decomposed attributes. Candidates are then accepted in rank order
whenever their precision reaches the running maximum of all earlier ranks.

Reference profiles are prepended with the sequence-start token so windows at
the first decode step (whose left edge is the start token) remain scoreable.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .corpus import BOS, MeaningRepresentation, ReferenceIndex, references_for
from .errors import ContractViolation, DegenerateDistributionError
from .generator import GeneratorModel, StepContext, StepOutput, sclstm_step
from .metrics import NgramProfile
from .util import rng_for


@dataclass
class ExpertConfig:
    n: int = 25  # candidates examined per step
    continuation: int = 4  # greedy tokens appended after the forced word
    ref_cap: int = 500
    eps: float = 1e-8  # probability floor for "non-zero"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")


@dataclass
class PrecisionRecord:
    """Per-candidate precisions and safe labels at one decode step."""

    candidates: list  # token ids, descending model probability (ties by id)
    probs: list
    prec: list
    labels: list
    n: int

    def __post_init__(self):
        assert self.labels and self.labels[0] == 1, "rank-0 must be safe"
        accepted = [p for p, l in zip(self.prec, self.labels) if l == 1]
        assert all(
            a <= b + 1e-15 for a, b in zip(accepted, accepted[1:])
        ), "accepted precisions must be non-decreasing"

    def safe_candidates(self):
        return [c for c, l in zip(self.candidates, self.labels) if l == 1]


# -- window scoring ---------------------------------------------------------------


def modified_precision(window, refs) -> float:
    """Clipped modified n-gram precision (orders 1..4, no brevity penalty)."""
    refs = list(refs)
    if not refs:
        raise ContractViolation("reference set is empty")
    if len(window) < 1:
        raise ValueError("window must contain at least one token")
    return NgramProfile(refs).precision(window)


def label_candidates(prec) -> list:
    """Accept rank i iff its precision reaches the running max of ranks < i.

    The running max advances over every entry, accepted or not; rank 0 is
    always accepted (max over the empty prefix).
    """
    labels = []
    running = -math.inf
    for value in prec:
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"precision {value!r} outside [0, 1]")
        labels.append(1 if value >= running else 0)
        if value > running:
            running = value
    return labels


# -- rollouts ---------------------------------------------------------------------


def rollout_window(
    ctx: StepContext, forced: int, model: GeneratorModel, continuation: int = 4
) -> list:
    """[x_t, forced, 4 greedy continuation tokens], truncated at EOS."""
    window = [ctx.last3[2], forced]
    if forced == model.vocab.eos_id:
        return window
    cur = sclstm_step(ctx, forced, model)
    for _ in range(continuation):
        nxt = int(np.argmax(cur.dist))
        window.append(nxt)
        if nxt == model.vocab.eos_id:
            break
        cur = sclstm_step(cur.ctx, nxt, model)
    return window


def rollout_windows_batch(
    ctx: StepContext, cand_ids, model: GeneratorModel, continuation: int = 4
) -> list:
    """Batched rollout_window over all candidates of one step."""
    cands = np.asarray(cand_ids, dtype=np.int64)
    b = cands.shape[0]
    w = model.weights
    eos = model.vocab.eos_id
    h = np.repeat(ctx.h[None, :], b, axis=0)
    c = np.repeat(ctx.c[None, :], b, axis=0)
    d = np.repeat(ctx.d[None, :], b, axis=0)
    probs, h, c, d = kernels.step_batch(w, cands, h, c, d)
    windows = [[ctx.last3[2], int(tok)] for tok in cands]
    alive = cands != eos
    for k in range(continuation):
        if not alive.any():
            break
        nxt = probs.argmax(axis=1)
        for i in range(b):
            if alive[i]:
                windows[i].append(int(nxt[i]))
                if nxt[i] == eos:
                    alive[i] = False
        if k < continuation - 1 and alive.any():
            probs, h, c, d = kernels.step_batch(w, nxt, h, c, d)
    return windows


def ranked_candidates(dist: np.ndarray, n: int, eps: float):
    """Top-n token ids with probability > eps, ties broken by lowest id."""
    order = np.argsort(-dist, kind="stable")
    out = []
    for idx in order:
        if dist[idx] <= eps:
            break
        out.append(int(idx))
        if len(out) == n:
            break
    return out


class Expert:
    """Reusable oracle bound to a trained generator and a reference index.

    Pure given frozen inputs; all randomness is derived from `run_seed`, so
    per-candidate results are independent of scheduling.
    """

    def __init__(
        self,
        model: GeneratorModel,
        index: ReferenceIndex,
        cfg: ExpertConfig | None = None,
        run_seed: int = 0,
    ):
        self.model = model
        self.index = index
        self.cfg = cfg or ExpertConfig()
        self.run_seed = run_seed
        self._ref_cache: dict = {}

    def refs_for(self, mr: MeaningRepresentation):
        key = mr.key()
        hit = self._ref_cache.get(key)
        if hit is None:
            lookup = references_for(
                mr, self.index, cap=self.cfg.ref_cap, seed=self.run_seed
            )
            id_refs = [
                tuple(self.model.vocab.encode((BOS,) + ref)) for ref in lookup.refs
            ]
            hit = (lookup, NgramProfile(id_refs))
            self._ref_cache[key] = hit
        return hit

    def safe_set(self, step_out: StepOutput, mr: MeaningRepresentation) -> PrecisionRecord:
        dist = step_out.dist
        cands = ranked_candidates(dist, self.cfg.n, self.cfg.eps)
        if not cands:
            raise DegenerateDistributionError(
                f"no candidate above eps={self.cfg.eps} at step {step_out.ctx.t}"
            )
        _, profile = self.refs_for(mr)
        windows = rollout_windows_batch(
            step_out.ctx, cands, self.model, self.cfg.continuation
        )
        prec = [profile.precision(win) for win in windows]
        labels = label_candidates(prec)
        return PrecisionRecord(
            candidates=cands,
            probs=[float(dist[c]) for c in cands],
            prec=prec,
            labels=labels,
            n=len(cands),
        )

    def learned_signal(
        self,
        ctx: StepContext,
        mr: MeaningRepresentation,
        candidate: int,
        meta_model,
        m: int = 5,
        seed: int = 0,
    ):
        """Mean window precision over m continuations sampled with the policy.

        Returns (mean precision, greedy-fallback count across all samples).
        """
        from .metaclassifier import safe_prefix

        if m < 1:
            raise ValueError("m must be >= 1")
        _, profile = self.refs_for(mr)
        eos = self.model.vocab.eos_id
        fallbacks = 0
        total = 0.0
        for j in range(m):
            rng = rng_for(seed, "learned-signal", j)
            window = [ctx.last3[2], candidate]
            if candidate != eos:
                cur = sclstm_step(ctx, candidate, self.model)
                for _ in range(self.cfg.continuation):
                    prefix = safe_prefix(
                        cur.dist, cur.ctx, meta_model, self.model, eps=self.cfg.eps
                    )
                    if prefix:
                        nxt = int(prefix[int(rng.integers(len(prefix)))])
                    else:
                        nxt = int(np.argmax(cur.dist))
                        fallbacks += 1
                    window.append(nxt)
                    if nxt == eos:
                        break
                    cur = sclstm_step(cur.ctx, nxt, self.model)
            total += profile.precision(window)
        return total / m, fallbacks


def expert_safe_set(
    step_out: StepOutput,
    mr: MeaningRepresentation,
    model: GeneratorModel,
    index: ReferenceIndex,
    cfg: ExpertConfig | None = None,
    run_seed: int = 0,
) -> PrecisionRecord:
    """One-shot form of Expert.safe_set for callers without a long-lived oracle."""
    return Expert(model, index, cfg, run_seed).safe_set(step_out, mr)


def format_record_lines(sent_id: int, step: int, record: PrecisionRecord, vocab):
    """Tab-delimited diagnostic lines: sentence, step, rank, token, Prec, label."""
    lines = []
    for rank, (tok, prec, label) in enumerate(
        zip(record.candidates, record.prec, record.labels)
    ):
        lines.append(f"{sent_id}\t{step}\t{rank}\t{vocab.token(tok)}\t{prec:.6f}\t{label}")
    return lines
