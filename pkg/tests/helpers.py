"""Hand-built models and independent oracles shared across test modules."""

import math
from collections import Counter

import numpy as np

from divdec.corpus import RESERVED, DialogueAct, MeaningRepresentation, Vocab
from divdec.generator import GeneratorModel
from divdec.metaclassifier import MetaModel
from divdec.numkit import ParamStore

GATE_SAT = 40.0  # saturates the input/forget/output gates
EMB_TANH = 2.0  # g = tanh(EMB_TANH * onehot)


def markov_model(P: np.ndarray, tokens=None) -> GeneratorModel:
    """A generator whose next-token distribution depends only on the input
    token: column u of P (within ~1e-12) for input token u.

    Built from real cell weights: one-hot embeddings, saturated i/o gates, a
    killed forget gate, and an output projection calibrated to log P.
    """
    P = np.asarray(P, dtype=np.float64)
    v = P.shape[0]
    assert P.shape == (v, v)
    np.testing.assert_allclose(P.sum(axis=0), 1.0, atol=1e-12)
    if tokens is None:
        tokens = list(RESERVED) + [f"w{i}" for i in range(v - len(RESERVED))]
    assert len(tokens) == v
    vocab = Vocab(tokens)
    store = ParamStore()
    h = v  # hidden width equals vocab size
    store.add("W_wr", np.eye(v))
    w_g = np.zeros((4 * h, v + h))
    w_g[3 * h :, :v] = EMB_TANH * np.eye(v)  # cell candidate reads the one-hot
    store.add("W_g", w_g)
    b_g = np.concatenate(
        [np.full(h, GATE_SAT), np.full(h, -GATE_SAT), np.full(h, GATE_SAT), np.zeros(h)]
    )
    store.add("b_g", b_g)
    store.add("W_r", np.zeros((0, v)))
    store.add("W_hr", np.zeros((0, h)))
    store.add("W_dc", np.zeros((h, 0)))
    scale = math.tanh(math.tanh(EMB_TANH))  # h2[u] for a fresh state
    store.add("W_ho", np.log(np.maximum(P, 1e-300)) / scale)
    store.add("b_ho", np.zeros(v))
    return GeneratorModel(store, vocab, None)


def chain_transitions(v: int, chain) -> np.ndarray:
    """Column-stochastic matrix realizing a deterministic token chain.

    chain maps input token -> next token; unmapped tokens go to EOS (id 1).
    """
    P = np.zeros((v, v))
    for u in range(v):
        P[chain.get(u, 1), u] = 1.0
    return P


def meta_marking(gen: GeneratorModel, safe_tokens, margin: float = 10.0) -> MetaModel:
    """MetaModel that judges a candidate safe iff its id is in safe_tokens.

    Requires one-hot embeddings (markov_model); the first layer copies the
    candidate-embedding block, the second is identity, the third votes.
    """
    v = gen.vocab_size
    hidden = max(v, 2)
    meta = MetaModel.create(gen, hidden_size=hidden, seed=0)
    p = meta.store.params
    for name in ("W1", "b1", "W2", "b2", "W3", "b3"):
        p[name][...] = 0.0
    offset = 2 * gen.hidden_size
    for j in range(v):
        p["W1"][j, offset + j] = 1.0
    p["W2"][...] = np.eye(hidden)
    for j in range(v):
        vote = margin if j in safe_tokens else -margin
        p["W3"][1, j] = vote
        p["W3"][0, j] = -vote
    return meta


def meta_constant(gen: GeneratorModel, p_safe: float, hidden: int = 8) -> MetaModel:
    """MetaModel emitting the same safe probability for every input."""
    meta = MetaModel.create(gen, hidden_size=hidden, seed=0)
    p = meta.store.params
    for name in ("W1", "b1", "W2", "b2", "W3"):
        p[name][...] = 0.0
    p["b3"][...] = [math.log((1.0 - p_safe) / p_safe), 0.0]
    return meta


def simple_mr(act="inform-name", attr="rest-name"):
    value = f"[{attr}]" if attr else None
    slots = ((attr, value),) if attr else ()
    return MeaningRepresentation((DialogueAct(act, slots),))


# -- independent metric oracles (deliberately brute force) --------------------------


def naive_clip_counts(hyp, refs, n):
    """(clipped, total) n-gram counts by direct multiset comparison."""
    hyp = tuple(hyp)
    total = max(0, len(hyp) - n + 1)
    hyp_counts = Counter(hyp[i : i + n] for i in range(total))
    clipped = 0
    for gram, cnt in hyp_counts.items():
        best = 0
        for ref in refs:
            ref = tuple(ref)
            c = sum(1 for i in range(max(0, len(ref) - n + 1)) if ref[i : i + n] == gram)
            best = max(best, c)
        clipped += min(cnt, best)
    return clipped, total


def naive_bleu4(pairs):
    """Corpus BLEU-4 with the same conventions as divdec.metrics, written
    independently against raw counts."""
    clipped = [0] * 4
    totals = [0] * 4
    c_len = 0
    r_len = 0
    for hyp, refs in pairs:
        hyp = tuple(hyp)
        c_len += len(hyp)
        best = min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        r_len += best
        for n in range(1, 5):
            cl, tot = naive_clip_counts(hyp, refs, n)
            clipped[n - 1] += cl
            totals[n - 1] += tot
    log_sum = 0.0
    levels = 0
    for cl, tot in zip(clipped, totals):
        if tot == 0:
            continue
        if cl == 0:
            return 0.0
        log_sum += math.log(cl / tot)
        levels += 1
    if levels == 0 or c_len == 0:
        return 0.0
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum / levels)


def naive_self_bleu(outputs):
    outs = [tuple(o) for o in outputs]
    total = 0.0
    for j, out in enumerate(outs):
        others = [o for i, o in enumerate(outs) if i != j]
        total += naive_bleu4([(out, others)])
    return 1.0 - total / len(outs)


def naive_window_precision(window, refs):
    """Expert-style geometric-mean clipped precision, no brevity penalty."""
    window = tuple(window)
    log_sum = 0.0
    levels = 0
    for n in range(1, 5):
        cl, tot = naive_clip_counts(window, refs, n)
        if tot == 0:
            continue
        if cl == 0:
            return 0.0
        log_sum += math.log(cl / tot)
        levels += 1
    return math.exp(log_sum / levels) if levels else 0.0
