# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled recurrent step kernel.

Fused single-pass version of ``_kernels_py.step_batch``: one token advance for
a batch of independent cell states. The win over numpy is per-call overhead,
which dominates at the tiny batch sizes (1-32) this repo decodes at.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()

BACKEND_NAME = "cython"


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def step_batch(w, tokens, h, c, d):
    """Same contract as the numpy backend; see _kernels_py.step_batch."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] emb = np.ascontiguousarray(w.emb)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w_gates = np.ascontiguousarray(w.w_gates)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] b_gates = np.ascontiguousarray(w.b_gates)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w_read_in = np.ascontiguousarray(w.w_read_in)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w_read_h = np.ascontiguousarray(w.w_read_h)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w_ctrl = np.ascontiguousarray(w.w_ctrl)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] w_out = np.ascontiguousarray(w.w_out)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] b_out = np.ascontiguousarray(w.b_out)

    cdef cnp.ndarray[cnp.int64_t, ndim=1, mode="c"] toks = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] h_in = np.ascontiguousarray(h)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] c_in = np.ascontiguousarray(c)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] d_in = np.ascontiguousarray(d)

    cdef Py_ssize_t B = toks.shape[0]
    cdef Py_ssize_t V = emb.shape[0]
    cdef Py_ssize_t E = emb.shape[1]
    cdef Py_ssize_t H = w_ctrl.shape[0]
    cdef Py_ssize_t D = w_ctrl.shape[1]

    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] probs = np.empty((B, V), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] h_out = np.empty((B, H), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] c_out = np.empty((B, H), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] d_out = np.empty((B, D), dtype=np.float64)

    # per-row scratch
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] z = np.empty(4 * H, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] rbuf = np.empty(max(D, 1), dtype=np.float64)

    cdef Py_ssize_t b, j, k, tok
    cdef double acc, gi, gf, go, gc, ctrl, mx, s, lm
    cdef double *erow

    with nogil:
        for b in range(B):
            tok = toks[b]
            erow = &emb[tok, 0]
            # gate pre-activations: z = W_g [emb; h] + b_g
            for j in range(4 * H):
                acc = b_gates[j]
                for k in range(E):
                    acc += w_gates[j, k] * erow[k]
                for k in range(H):
                    acc += w_gates[j, E + k] * h_in[b, k]
                z[j] = acc
            # reading gate and control-vector decay: d2 = sigmoid(.) * d
            for j in range(D):
                acc = 0.0
                for k in range(E):
                    acc += w_read_in[j, k] * erow[k]
                for k in range(H):
                    acc += w_read_h[j, k] * h_in[b, k]
                rbuf[j] = _sigmoid(acc) * d_in[b, j]
                d_out[b, j] = rbuf[j]
            # cell and hidden update
            for j in range(H):
                ctrl = 0.0
                for k in range(D):
                    ctrl += w_ctrl[j, k] * rbuf[k]
                gi = _sigmoid(z[j])
                gf = _sigmoid(z[H + j])
                go = _sigmoid(z[2 * H + j])
                gc = tanh(z[3 * H + j])
                acc = gf * c_in[b, j] + gi * gc + tanh(ctrl)
                c_out[b, j] = acc
                h_out[b, j] = go * tanh(acc)
            # output projection + stable softmax
            mx = -1e300
            for j in range(V):
                acc = b_out[j]
                for k in range(H):
                    acc += w_out[j, k] * h_out[b, k]
                probs[b, j] = acc
                if acc > mx:
                    mx = acc
            s = 0.0
            for j in range(V):
                lm = exp(probs[b, j] - mx)
                probs[b, j] = lm
                s += lm
            for j in range(V):
                probs[b, j] /= s

    return probs, h_out, c_out, d_out
