"""Pure-numpy implementation of the recurrent step kernel.

This is the fallback backend: identical math to the compiled extension in
``_kernels.pyx``, expressed with vectorized numpy ops. Used when the extension
is not built or when DIVDEC_PURE_PYTHON=1.
"""

from typing import NamedTuple

import numpy as np

BACKEND_NAME = "python"


class CellWeights(NamedTuple):
    """Frozen view of one recurrent cell's parameters.

    Shapes (V vocab, E embedding, H hidden, D control-vector dim; D may be 0
    for the unconditional language model):
      emb        (V, E)
      w_gates    (4H, E+H)   input/forget/output/cell blocks, in that order
      b_gates    (4H,)
      w_read_in  (D, E)
      w_read_h   (D, H)
      w_ctrl     (H, D)
      w_out      (V, H)
      b_out      (V,)
    """

    emb: np.ndarray
    w_gates: np.ndarray
    b_gates: np.ndarray
    w_read_in: np.ndarray
    w_read_h: np.ndarray
    w_ctrl: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_ctrl.shape[0]

    @property
    def embed_size(self) -> int:
        return self.emb.shape[1]

    @property
    def ctrl_size(self) -> int:
        return self.w_ctrl.shape[1]


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def step_batch(w: CellWeights, tokens, h, c, d):
    """Advance B independent cell states by one input token each.

    tokens (B,) int64; h, c (B, H); d (B, D). Returns (probs, h2, c2, d2)
    where probs (B, V) is the softmax next-token distribution per row.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    x_emb = w.emb[tokens]  # (B, E)
    z = x_emb @ w.w_gates[:, : w.embed_size].T + h @ w.w_gates[:, w.embed_size :].T
    z += w.b_gates
    hs = w.hidden_size
    gi = sigmoid(z[:, :hs])
    gf = sigmoid(z[:, hs : 2 * hs])
    go = sigmoid(z[:, 2 * hs : 3 * hs])
    gc = np.tanh(z[:, 3 * hs :])
    r = sigmoid(x_emb @ w.w_read_in.T + h @ w.w_read_h.T)  # (B, D)
    d2 = r * d
    c2 = gf * c + gi * gc + np.tanh(d2 @ w.w_ctrl.T)
    h2 = go * np.tanh(c2)
    logits = h2 @ w.w_out.T + w.b_out
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=1, keepdims=True)
    return probs, h2, c2, d2
