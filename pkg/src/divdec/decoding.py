"""Decoding strategies over the trained generator, plus the candidate reranker.

All decoders are pure given frozen parameters, consume an MR encoding, and
produce Candidate objects whose token ids end with EOS or at the length cap.
Sampling strategies draw from dedicated seeded streams, so equal seeds
reproduce byte-identical candidates. Strategy degeneracies hold exactly:
top-k(k=1) = nucleus(p below the step maxima) = beam(width=1) = greedy, and
MMI with lambda = 0 ranks identically to plain beam search.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .generator import GeneratorModel, init_context, sclstm_step
from .metaclassifier import MetaModel, safe_prefix
from .metrics import slot_error
from .util import rng_for

DEFAULT_POOL_SIZE = 10
DEFAULT_MAX_LENGTH = 28
RERANK_TOP = 5


@dataclass
class Candidate:
    tokens: list  # token ids, EOS-terminated unless cut at max length
    logprob: float  # total log-probability under the generator
    per_token: list  # per-step log-probabilities under the generator
    score: float = None  # ranking score (differs from logprob for MMI)
    slot_err: float = None  # filled by the reranker
    fallbacks: int = 0  # safe-prefix decode: steps that fell back to argmax

    def __post_init__(self):
        if self.score is None:
            self.score = self.logprob

    def normalized_logprob(self) -> float:
        return self.logprob / max(1, len(self.tokens))

    def surface(self, vocab) -> list:
        toks = vocab.decode(self.tokens)
        if toks and toks[-1] == vocab.token(vocab.eos_id):
            toks = toks[:-1]
        return toks


@dataclass
class DecodeConfig:
    strategy: str = "greedy"  # greedy|beam|topk|nucleus|mmi|mcd
    k: int = 5
    p: float = 0.8
    mode: str = "uniform"  # uniform | probabilistic
    nucleus_rule: str = "reach"  # reach (smallest set >= p) | within (largest <= p)
    beam_width: int = 10
    mmi_lambda: float = 0.5
    mmi_g: int = 5
    max_length: int = DEFAULT_MAX_LENGTH
    pool_size: int = DEFAULT_POOL_SIZE
    eps: float = 1e-8
    prefix_cap: int | None = None  # optional top-n cap on the safe prefix
    edge_case: bool = False  # always take the least probable allowed word
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.beam_width < 1:
            raise ValueError("k and beam width must be >= 1")
        if not (0.0 < self.p <= 1.0):
            raise ValueError("p must lie in (0, 1]")
        if self.mmi_lambda < 0:
            raise ValueError("lambda must be >= 0")
        if self.mode not in ("uniform", "probabilistic"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.nucleus_rule not in ("reach", "within"):
            raise ValueError(f"unknown nucleus rule {self.nucleus_rule!r}")


def _start(enc, model: GeneratorModel):
    ctx = init_context(enc, model)
    return sclstm_step(ctx, model.vocab.bos_id, model)


def _ranked(dist: np.ndarray) -> np.ndarray:
    """Token ids by descending probability, ties broken by lowest id."""
    return np.argsort(-dist, kind="stable")


def greedy_decode(enc, model: GeneratorModel, max_length: int = DEFAULT_MAX_LENGTH) -> Candidate:
    tokens = []
    logps = []
    out = _start(enc, model)
    for _ in range(max_length):
        tok = int(np.argmax(out.dist))
        tokens.append(tok)
        logps.append(float(np.log(out.dist[tok])))
        if tok == model.vocab.eos_id:
            break
        out = sclstm_step(out.ctx, tok, model)
    return Candidate(tokens=tokens, logprob=float(sum(logps)), per_token=logps)


def _sample_decode(enc, model, pick, seed, max_length) -> Candidate:
    """Shared sampling loop; `pick(dist, rng)` returns the chosen token id."""
    rng = rng_for(seed)
    tokens = []
    logps = []
    out = _start(enc, model)
    for _ in range(max_length):
        tok = pick(out.dist, rng)
        tokens.append(tok)
        logps.append(float(np.log(out.dist[tok])))
        if tok == model.vocab.eos_id:
            break
        out = sclstm_step(out.ctx, tok, model)
    return Candidate(tokens=tokens, logprob=float(sum(logps)), per_token=logps)


def _draw(ids, probs, mode, rng, edge=False) -> int:
    if edge:
        return int(ids[-1])
    if mode == "uniform":
        return int(ids[int(rng.integers(len(ids)))])
    renorm = probs / probs.sum()
    return int(rng.choice(ids, p=renorm))


def topk_set(dist: np.ndarray, k: int) -> np.ndarray:
    """The k most probable token ids, ties broken by lowest id."""
    return _ranked(dist)[:k]


def nucleus_set(dist: np.ndarray, p: float, rule: str = "reach") -> np.ndarray:
    """Probability-ranked ids whose cumulative mass reaches p (rule="reach",
    the default, smallest such set) or stays within p (rule="within", largest
    such set); never empty, always contains the argmax."""
    ids = _ranked(dist)
    cum = np.cumsum(dist[ids])
    if rule == "reach":
        cut = int(np.searchsorted(cum, p, side="left")) + 1
    else:
        cut = int(np.searchsorted(cum, p, side="right"))
    return ids[: max(1, min(cut, ids.size))]


def topk_sample(
    enc, model: GeneratorModel, k: int, mode: str = "uniform",
    seed: int = 0, max_length: int = DEFAULT_MAX_LENGTH, edge: bool = False,
) -> Candidate:
    """Restrict each step to the k most probable tokens, then draw per mode."""
    if k < 1:
        raise ValueError("k must be >= 1")

    def pick(dist, rng):
        ids = topk_set(dist, k)
        return _draw(ids, dist[ids], mode, rng, edge)

    return _sample_decode(enc, model, pick, seed, max_length)


def nucleus_sample(
    enc, model: GeneratorModel, p: float, mode: str = "uniform",
    seed: int = 0, max_length: int = DEFAULT_MAX_LENGTH, rule: str = "reach",
    edge: bool = False,
) -> Candidate:
    """Smallest probability-ranked set whose cumulative mass reaches p.

    The set always contains the argmax, so small p degenerates to greedy.
    rule="within" switches to the largest set whose mass does not exceed p.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError("p must lie in (0, 1]")

    def pick(dist, rng):
        ids = nucleus_set(dist, p, rule)
        return _draw(ids, dist[ids], mode, rng, edge)

    return _sample_decode(enc, model, pick, seed, max_length)


def mcd_sample(
    enc,
    model: GeneratorModel,
    meta: MetaModel,
    seed: int = 0,
    max_length: int = DEFAULT_MAX_LENGTH,
    eps: float = 1e-8,
    prefix_cap: int | None = None,
    edge: bool = False,
) -> Candidate:
    """Uniform draw from the maximal consecutive safe prefix of each step.

    An empty prefix (rank-0 judged unsafe) falls back to the argmax and is
    counted on the returned candidate.
    """
    rng = rng_for(seed)
    tokens = []
    logps = []
    fallbacks = 0
    out = _start(enc, model)
    for _ in range(max_length):
        prefix = safe_prefix(out.dist, out.ctx, meta, model, eps=eps, cap=prefix_cap)
        if prefix:
            tok = int(prefix[-1]) if edge else int(prefix[int(rng.integers(len(prefix)))])
        else:
            tok = int(np.argmax(out.dist))
            fallbacks += 1
        tokens.append(tok)
        logps.append(float(np.log(out.dist[tok])))
        if tok == model.vocab.eos_id:
            break
        out = sclstm_step(out.ctx, tok, model)
    return Candidate(
        tokens=tokens, logprob=float(sum(logps)), per_token=logps, fallbacks=fallbacks
    )


# -- beam search -----------------------------------------------------------------


@dataclass
class _Beam:
    tokens: tuple
    logprob: float
    score: float
    per_token: list
    out: object  # StepOutput for the live frontier
    lm_out: object = None


def _beam_core(enc, model, width, max_length, step_score, lm_model=None):
    """Generic beam loop; `step_score(pos, logp_gen, logp_lm)` ranks expansions.

    Expansion scoring is vectorized; exact tie-breaking (score, then token-id
    sequence) happens on the shortlist of entries at or above the width-th
    best score, so results match a full sort.
    """
    out = _start(enc, model)
    lm_out = _start(np.zeros(0), lm_model) if lm_model is not None else None
    eos = model.vocab.eos_id
    live = [_Beam((), 0.0, 0.0, [], out, lm_out)]
    finished = []
    for pos in range(1, max_length + 1):
        logp_gen = np.stack(
            [np.log(np.maximum(b.out.dist, 1e-300)) for b in live]
        )  # (B, V)
        if lm_model is not None:
            logp_lm = np.stack([np.log(np.maximum(b.lm_out.dist, 1e-300)) for b in live])
        else:
            logp_lm = np.zeros_like(logp_gen)
        gains = step_score(pos, logp_gen, logp_lm)
        scores = np.array([b.score for b in live])[:, None] + gains
        flat = scores.ravel()
        if flat.size > width:
            kth = np.partition(flat, flat.size - width)[flat.size - width]
            shortlist = np.flatnonzero(flat >= kth)
        else:
            shortlist = np.arange(flat.size)
        entries = []
        v = model.vocab_size
        for fi in shortlist.tolist():
            b, tok = divmod(fi, v)
            beam = live[b]
            entries.append((float(flat[fi]), beam.tokens + (tok,), beam, tok, b))
        entries.sort(key=lambda e: (-e[0], e[1]))
        next_live = []
        for score, tokens, beam, tok, b in entries[:width]:
            step_logp = float(logp_gen[b, tok])
            logprob = beam.logprob + step_logp
            per_token = beam.per_token + [step_logp]
            if tok == eos:
                finished.append(
                    Candidate(
                        tokens=list(tokens), logprob=logprob,
                        per_token=per_token, score=score,
                    )
                )
            else:
                nxt = sclstm_step(beam.out.ctx, tok, model)
                lm_nxt = (
                    sclstm_step(beam.lm_out.ctx, tok, lm_model)
                    if beam.lm_out is not None
                    else None
                )
                next_live.append(_Beam(tokens, logprob, score, per_token, nxt, lm_nxt))
        live = next_live
        if not live:
            break
    for beam in live:  # length-capped leftovers
        finished.append(
            Candidate(
                tokens=list(beam.tokens), logprob=beam.logprob,
                per_token=beam.per_token, score=beam.score,
            )
        )
    finished.sort(key=lambda c: (-c.score, tuple(c.tokens)))
    return finished[:width]


def beam_decode(
    enc, model: GeneratorModel, width: int, max_length: int = DEFAULT_MAX_LENGTH
) -> list:
    """Standard length-capped beam search; returns the top `width` beams."""
    if width < 1:
        raise ValueError("width must be >= 1")
    return _beam_core(enc, model, width, max_length, lambda pos, lp, lm: lp)


def mmi_antilm_decode(
    enc,
    model: GeneratorModel,
    lm_model: GeneratorModel,
    lam: float = 0.5,
    g: int = 5,
    width: int = 10,
    max_length: int = DEFAULT_MAX_LENGTH,
) -> list:
    """Beam search scoring log P_gen - lambda * log P_LM for positions <= g."""
    if width < 1:
        raise ValueError("width must be >= 1")
    if lam < 0:
        raise ValueError("lambda must be >= 0")

    def step_score(pos, logp_gen, logp_lm):
        if pos <= g:
            return logp_gen - lam * logp_lm
        return logp_gen

    return _beam_core(enc, model, width, max_length, step_score, lm_model=lm_model)


# -- pools and reranking ------------------------------------------------------------


def decode_pool(
    cfg: DecodeConfig,
    enc,
    model: GeneratorModel,
    lm_model: GeneratorModel | None = None,
    meta: MetaModel | None = None,
    mr_id: int = 0,
) -> list:
    """The strategy's candidate pool for one input (default size 10)."""
    n = cfg.pool_size
    if cfg.strategy == "greedy":
        return [greedy_decode(enc, model, cfg.max_length) for _ in range(n)]
    if cfg.strategy == "beam":
        return beam_decode(enc, model, cfg.beam_width, cfg.max_length)[:n]
    if cfg.strategy == "mmi":
        if lm_model is None:
            raise ValueError("mmi strategy needs the auxiliary language model")
        return mmi_antilm_decode(
            enc, model, lm_model, cfg.mmi_lambda, cfg.mmi_g,
            cfg.beam_width, cfg.max_length,
        )[:n]
    out = []
    for j in range(n):
        seed = (cfg.seed, "decode", cfg.strategy, mr_id, j)
        if cfg.strategy == "topk":
            out.append(
                topk_sample(enc, model, cfg.k, cfg.mode, seed, cfg.max_length, cfg.edge_case)
            )
        elif cfg.strategy == "nucleus":
            out.append(
                nucleus_sample(
                    enc, model, cfg.p, cfg.mode, seed, cfg.max_length,
                    cfg.nucleus_rule, cfg.edge_case,
                )
            )
        elif cfg.strategy == "mcd":
            if meta is None:
                raise ValueError("mcd strategy needs a trained meta-classifier")
            out.append(
                mcd_sample(
                    enc, model, meta, seed, cfg.max_length, cfg.eps,
                    cfg.prefix_cap, cfg.edge_case,
                )
            )
        else:
            raise ValueError(f"unknown strategy {cfg.strategy!r}")
    return out


def rerank(candidates, mr, vocab, seed=0) -> Candidate:
    """Keep lowest-slot-error candidates, sort by normalized sentence
    probability, then draw uniformly from the top 5 remaining."""
    if not candidates:
        raise ContractViolation("rerank needs a non-empty candidate pool")
    for cand in candidates:
        if cand.slot_err is None:
            cand.slot_err = slot_error(cand.surface(vocab), mr).err
    best = min(c.slot_err for c in candidates)
    survivors = [c for c in candidates if c.slot_err == best]
    survivors.sort(key=lambda c: (-c.normalized_logprob(), tuple(c.tokens)))
    top = survivors[: min(RERANK_TOP, len(survivors))]
    rng = rng_for(seed, "rerank")
    return top[int(rng.integers(len(top)))]


# -- decoding-distribution statistics --------------------------------------------------


@dataclass
class DistributionStats:
    mean_rank_probs: list  # mean probability of the rank-1..10 words
    top1_ge_99_frac: float  # fraction of steps whose top-1 prob >= 0.99
    steps: int
    rank_rows: list = field(default_factory=list)

    def csv_lines(self):
        lines = ["rank,mean_prob"]
        for r, v in enumerate(self.mean_rank_probs, start=1):
            lines.append(f"{r},{v:.10f}")
        lines.append(f"top1_ge_0.99,{self.top1_ge_99_frac:.10f}")
        lines.append(f"steps,{self.steps}")
        return lines


def distribution_stats(
    encodings, model: GeneratorModel, max_length: int = DEFAULT_MAX_LENGTH, top: int = 10
) -> DistributionStats:
    """Rank-probability profile over all greedy-decode steps of an MR set."""
    sums = np.zeros(top)
    steps = 0
    hi = 0
    for enc in encodings:
        out = _start(enc, model)
        for _ in range(max_length):
            ranked = np.sort(out.dist)[::-1]
            take = min(top, ranked.size)
            sums[:take] += ranked[:take]
            steps += 1
            if ranked[0] >= 0.99:
                hi += 1
            tok = int(np.argmax(out.dist))
            if tok == model.vocab.eos_id:
                break
            out = sclstm_step(out.ctx, tok, model)
    means = (sums / max(1, steps)).tolist()
    return DistributionStats(
        mean_rank_probs=means, top1_ge_99_frac=hi / max(1, steps), steps=steps
    )
