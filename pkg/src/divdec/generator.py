"""Semantically conditioned recurrent generator and auxiliary language model.

One LSTM-style layer augmented with a reading gate r_t that multiplicatively
decays a control vector d_t (the not-yet-expressed dialogue-act content):

    z       = W_g [emb(x_t); h_{t-1}] + b_g          gate pre-activations
    i,f,o   = sigmoid(z_i), sigmoid(z_f), sigmoid(z_o)
    g       = tanh(z_g)
    r_t     = sigmoid(W_r emb(x_t) + W_hr h_{t-1})
    d_t     = r_t * d_{t-1}
    c_t     = f * c_{t-1} + i * g + tanh(W_dc d_t)
    h_t     = o * tanh(c_t)
    P(next) = softmax(W_ho h_t + b_ho)

The unconditional LM is the same cell with a zero-width control vector.
Forward inference goes through the selected step kernel; training keeps a
python-side forward that caches activations for the manual backward pass,
verified against central differences.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels, numkit
from .corpus import DASchema, Vocab
from .errors import NumericError, ShapeError, TrainingError
from .kernels import CellWeights
from .numkit import ParamStore, TrainConfig
from .util import rng_for

PARAM_NAMES = ("W_wr", "W_g", "b_g", "W_r", "W_hr", "W_dc", "W_ho", "b_ho")


@dataclass
class StepContext:
    """Generator state after consuming the token `last3[-1]` at step t."""

    h: np.ndarray
    c: np.ndarray
    d: np.ndarray
    last3: tuple  # (x_{t-2}, x_{t-1}, x_t) token ids
    t: int

    def to_obj(self) -> dict:
        return {
            "h": self.h.tolist(),
            "c": self.c.tolist(),
            "d": self.d.tolist(),
            "last3": list(self.last3),
            "t": self.t,
        }

    @staticmethod
    def from_obj(obj) -> "StepContext":
        return StepContext(
            h=np.asarray(obj["h"], dtype=np.float64),
            c=np.asarray(obj["c"], dtype=np.float64),
            d=np.asarray(obj["d"], dtype=np.float64),
            last3=tuple(obj["last3"]),
            t=int(obj["t"]),
        )


@dataclass
class StepOutput:
    dist: np.ndarray  # probability vector over the vocab (next token)
    ctx: StepContext


def init_params(
    vocab_size: int, ctrl_size: int, hidden_size: int, embed_size: int, seed: int
) -> ParamStore:
    rng = rng_for(seed, "init-generator", vocab_size, ctrl_size, hidden_size, embed_size)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(max(1, fan_in))
        return rng.uniform(-bound, bound, size=shape)

    store = ParamStore()
    store.add("W_wr", uniform((vocab_size, embed_size), embed_size))
    store.add("W_g", uniform((4 * hidden_size, embed_size + hidden_size), embed_size + hidden_size))
    b_g = np.zeros(4 * hidden_size)
    b_g[hidden_size : 2 * hidden_size] = 1.0  # forget-gate bias
    store.add("b_g", b_g)
    store.add("W_r", uniform((ctrl_size, embed_size), embed_size))
    store.add("W_hr", uniform((ctrl_size, hidden_size), hidden_size))
    store.add("W_dc", uniform((hidden_size, ctrl_size), max(1, ctrl_size)))
    store.add("W_ho", uniform((vocab_size, hidden_size), hidden_size))
    store.add("b_ho", np.zeros(vocab_size))
    return store


class GeneratorModel:
    """Frozen-or-trainable bundle of cell parameters, vocab, and DA schema.

    `schema` is None for the unconditional LM (control width 0). Inference
    never mutates the store, so a trained model is safe to share across
    threads.
    """

    def __init__(self, store: ParamStore, vocab: Vocab, schema: DASchema | None):
        self.store = store
        self.vocab = vocab
        self.schema = schema
        shapes = {n: store.params[n].shape for n in PARAM_NAMES}
        self.vocab_size, self.embed_size = shapes["W_wr"]
        self.hidden_size = shapes["W_ho"][1]
        self.ctrl_size = shapes["W_dc"][1]
        if self.vocab_size != len(vocab):
            raise ShapeError("embedding rows do not match the vocab size")
        if schema is not None and self.ctrl_size != len(schema):
            raise ShapeError("control width does not match the schema size")

    @property
    def weights(self) -> CellWeights:
        p = self.store.params
        return CellWeights(
            emb=p["W_wr"],
            w_gates=p["W_g"],
            b_gates=p["b_g"],
            w_read_in=p["W_r"],
            w_read_h=p["W_hr"],
            w_ctrl=p["W_dc"],
            w_out=p["W_ho"],
            b_out=p["b_ho"],
        )

    @staticmethod
    def create(
        vocab: Vocab,
        schema: DASchema | None,
        hidden_size: int = 64,
        embed_size: int = 32,
        seed: int = 0,
    ) -> "GeneratorModel":
        ctrl = len(schema) if schema is not None else 0
        store = init_params(len(vocab), ctrl, hidden_size, embed_size, seed)
        return GeneratorModel(store, vocab, schema)

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "kind": "sclstm" if self.schema is not None else "lm",
            "hidden_size": self.hidden_size,
            "embed_size": self.embed_size,
            "vocab": self.vocab.tokens(),
            "schema": [list(e) for e in self.schema.entries] if self.schema else None,
        }
        meta.update(extra_meta or {})
        numkit.save_checkpoint(path, self.store, meta)

    @staticmethod
    def load(path) -> "GeneratorModel":
        store, meta = numkit.load_checkpoint(path)
        vocab = Vocab(meta["vocab"])
        schema = DASchema(meta["schema"]) if meta.get("schema") else None
        model = GeneratorModel(store, vocab, schema)
        model.meta = meta
        return model


def init_context(encoding: np.ndarray, model: GeneratorModel) -> StepContext:
    """Fresh decode state: d_0 is the MR encoding, h and c start at zero."""
    encoding = np.asarray(encoding, dtype=np.float64)
    if encoding.shape != (model.ctrl_size,):
        raise ShapeError(
            f"encoding has shape {encoding.shape}, expected ({model.ctrl_size},)"
        )
    bos = model.vocab.bos_id
    return StepContext(
        h=np.zeros(model.hidden_size),
        c=np.zeros(model.hidden_size),
        d=encoding.copy(),
        last3=(bos, bos, bos),
        t=0,
    )


def sclstm_step(ctx: StepContext, token: int, model: GeneratorModel) -> StepOutput:
    """Consume one token; return the next-token distribution and new state."""
    if not (0 <= token < model.vocab_size):
        raise ValueError(f"token id {token} outside vocab")
    probs, h2, c2, d2 = kernels.step_batch(
        model.weights,
        np.array([token], dtype=np.int64),
        ctx.h[None, :],
        ctx.c[None, :],
        ctx.d[None, :],
    )
    if not np.all(np.isfinite(h2)):
        raise NumericError(f"non-finite activation at step {ctx.t + 1}")
    new_ctx = StepContext(
        h=h2[0],
        c=c2[0],
        d=d2[0],
        last3=(ctx.last3[1], ctx.last3[2], token),
        t=ctx.t + 1,
    )
    return StepOutput(dist=probs[0], ctx=new_ctx)


def greedy_continuation(
    ctx: StepContext, model: GeneratorModel, max_steps: int
) -> list:
    """Argmax tokens from `ctx` until EOS (included) or `max_steps` tokens."""
    out = []
    cur = ctx
    last = cur.last3[2]
    for _ in range(max_steps):
        step = sclstm_step(cur, last, model)
        nxt = int(np.argmax(step.dist))  # first maximum = lowest token id
        out.append(nxt)
        if nxt == model.vocab.eos_id:
            break
        cur = step.ctx
        last = nxt
    return out


def greedy_rollout(ctx: StepContext, model: GeneratorModel, max_length: int) -> list:
    """Greedy continuation excluding the terminating EOS token."""
    if max_length < 1:
        raise ValueError("max_length must be >= 1")
    toks = greedy_continuation(ctx, model, max_length)
    if toks and toks[-1] == model.vocab.eos_id:
        toks = toks[:-1]
    return toks


# -- training ------------------------------------------------------------------


def _sentence_forward(store, bos_id, token_ids, encoding, hidden_size, embed_size):
    """Teacher-forced forward pass caching activations for the backward pass.

    token_ids must end with EOS; the input sequence is BOS + token_ids[:-1].
    Returns (sum of token NLLs in nats, cache list, per-token logprobs).
    """
    p = store.params
    W_wr, W_g, b_g = p["W_wr"], p["W_g"], p["b_g"]
    W_r, W_hr, W_dc = p["W_r"], p["W_hr"], p["W_dc"]
    W_ho, b_ho = p["W_ho"], p["b_ho"]
    hs = hidden_size
    es = embed_size
    h = np.zeros(hs)
    c = np.zeros(hs)
    d = np.asarray(encoding, dtype=np.float64).copy()
    inputs = [bos_id] + list(token_ids[:-1])
    cache = []
    logps = []
    loss = 0.0
    for u, target in zip(inputs, token_ids):
        emb = W_wr[u]
        z = W_g[:, :es] @ emb + W_g[:, es:] @ h + b_g
        gi = _sigmoid(z[:hs])
        gf = _sigmoid(z[hs : 2 * hs])
        go = _sigmoid(z[2 * hs : 3 * hs])
        gc = np.tanh(z[3 * hs :])
        r = _sigmoid(W_r @ emb + W_hr @ h)
        d2 = r * d
        tanh_a = np.tanh(W_dc @ d2)
        c2 = gf * c + gi * gc + tanh_a
        tanh_c2 = np.tanh(c2)
        h2 = go * tanh_c2
        logits = W_ho @ h2 + b_ho
        logp = numkit.log_softmax(logits)
        probs = np.exp(logp)
        loss -= logp[target]
        logps.append(float(logp[target]))
        cache.append(
            (u, target, h, c, d, emb, gi, gf, go, gc, r, d2, tanh_a, tanh_c2, h2, probs)
        )
        h, c, d = h2, c2, d2
    return loss, cache, logps


def _sigmoid(x):
    return kernels.sigmoid(np.asarray(x, dtype=np.float64))


def _sentence_backward(store, cache, hidden_size, embed_size):
    p = store.params
    g = store.grads
    W_g, W_r, W_hr, W_dc, W_ho = p["W_g"], p["W_r"], p["W_hr"], p["W_dc"], p["W_ho"]
    hs = hidden_size
    es = embed_size
    dh_next = np.zeros(hs)
    dc_next = np.zeros(hs)
    dd_next = np.zeros(p["W_dc"].shape[1])
    for (
        u,
        target,
        h_prev,
        c_prev,
        d_prev,
        emb,
        gi,
        gf,
        go,
        gc,
        r,
        d2,
        tanh_a,
        tanh_c2,
        h2,
        probs,
    ) in reversed(cache):
        dlogits = probs.copy()
        dlogits[target] -= 1.0
        g["W_ho"] += np.outer(dlogits, h2)
        g["b_ho"] += dlogits
        dh = W_ho.T @ dlogits + dh_next
        do = dh * tanh_c2
        dc = dh * go * (1.0 - tanh_c2 * tanh_c2) + dc_next
        df = dc * c_prev
        di = dc * gc
        dgc = dc * gi
        da = dc * (1.0 - tanh_a * tanh_a)
        g["W_dc"] += np.outer(da, d2)
        dd2 = W_dc.T @ da + dd_next
        dr = dd2 * d_prev
        dd_next = dd2 * r
        ds = dr * r * (1.0 - r)
        g["W_r"] += np.outer(ds, emb)
        g["W_hr"] += np.outer(ds, h_prev)
        demb = W_r.T @ ds
        dh_prev = W_hr.T @ ds
        dzi = di * gi * (1.0 - gi)
        dzf = df * gf * (1.0 - gf)
        dzo = do * go * (1.0 - go)
        dzg = dgc * (1.0 - gc * gc)
        dz = np.concatenate([dzi, dzf, dzo, dzg])
        g["W_g"] += np.outer(dz, np.concatenate([emb, h_prev]))
        g["b_g"] += dz
        dxh = W_g.T @ dz
        demb += dxh[:es]
        dh_prev = dh_prev + dxh[es:]
        g["W_wr"][u] += demb
        dh_next = dh_prev
        dc_next = dc * gf


def sentence_loss(model: GeneratorModel, token_ids, encoding) -> float:
    """Teacher-forced NLL (sum of nats) of an EOS-terminated id sequence."""
    loss, _, _ = _sentence_forward(
        model.store,
        model.vocab.bos_id,
        token_ids,
        encoding,
        model.hidden_size,
        model.embed_size,
    )
    return float(loss)


def sentence_loss_with_grads(model: GeneratorModel, token_ids, encoding) -> float:
    loss, cache, _ = _sentence_forward(
        model.store,
        model.vocab.bos_id,
        token_ids,
        encoding,
        model.hidden_size,
        model.embed_size,
    )
    _sentence_backward(model.store, cache, model.hidden_size, model.embed_size)
    return float(loss)


def sequence_logprob(token_ids, encoding, model: GeneratorModel):
    """Per-token log-probabilities and their sum, teacher-forced.

    token_ids must end with the EOS id.
    """
    token_ids = list(token_ids)
    if not token_ids or token_ids[-1] != model.vocab.eos_id:
        raise ValueError("sequence must end with the EOS token")
    for tok in token_ids:
        if not (0 <= tok < model.vocab_size):
            raise ValueError(f"token id {tok} outside vocab")
    loss, _, logps = _sentence_forward(
        model.store,
        model.vocab.bos_id,
        token_ids,
        encoding,
        model.hidden_size,
        model.embed_size,
    )
    return logps, float(-loss)


def _encoded_instances(dataset, vocab, schema):
    from .corpus import encode_mr

    out = []
    for inst in dataset.instances:
        ids = vocab.encode(inst.ref)
        enc = (
            encode_mr(inst.mr, schema)
            if schema is not None
            else np.zeros(0, dtype=np.float64)
        )
        out.append((ids, enc))
    return out


def epochs_until_stop(val_losses, patience: int) -> int:
    """Number of epochs a run with these validation losses executes."""
    best = np.inf
    since = 0
    for i, v in enumerate(val_losses):
        if v < best:
            best = v
            since = 0
        else:
            since += 1
            if since >= patience:
                return i + 1
    return len(val_losses)


def _train_loop(model: GeneratorModel, train, val, cfg: TrainConfig, label: str):
    enc_train = _encoded_instances(train, model.vocab, model.schema)
    enc_val = _encoded_instances(val, model.vocab, model.schema)
    if not enc_train or not enc_val:
        raise TrainingError(f"{label}: empty training or validation split")
    best_val = np.inf
    best_params = None
    since_best = 0
    log = []
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, label, "epoch", epoch).permutation(len(enc_train))
        total = 0.0
        tokens = 0
        for idx in order:
            ids, enc = enc_train[int(idx)]
            loss = sentence_loss_with_grads(model, ids, enc)
            numkit.clip_gradients(model.store, cfg.clip_threshold)
            numkit.adam_step(model.store, cfg)
            total += loss
            tokens += len(ids)
        train_loss = total / max(1, tokens)
        vtotal = sum(sentence_loss(model, ids, enc) for ids, enc in enc_val)
        vtokens = sum(len(ids) for ids, enc in enc_val)
        val_loss = vtotal / max(1, vtokens)
        if not np.isfinite(val_loss):
            raise TrainingError(f"{label}: validation loss diverged at epoch {epoch}")
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in model.store.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best_params is not None:
        for k, v in best_params.items():
            model.store.params[k][...] = v
    model.train_log = log
    return model


def train_generator(
    train,
    val,
    cfg: TrainConfig,
    vocab: Vocab,
    schema: DASchema,
    hidden_size: int = 64,
    embed_size: int = 32,
) -> GeneratorModel:
    """Teacher-forced training with Adam, clipping, and early stopping.

    Returns the checkpoint with the best validation loss; the per-epoch loss
    log is attached as `model.train_log`.
    """
    model = GeneratorModel.create(vocab, schema, hidden_size, embed_size, cfg.seed)
    return _train_loop(model, train, val, cfg, "gen")


def train_lm(
    train,
    val,
    cfg: TrainConfig,
    vocab: Vocab,
    hidden_size: int = 64,
    embed_size: int = 32,
) -> GeneratorModel:
    """Plain recurrent LM over references only (zero-width control vector)."""
    model = GeneratorModel.create(vocab, None, hidden_size, embed_size, cfg.seed)
    return _train_loop(model, train, val, cfg, "lm")
