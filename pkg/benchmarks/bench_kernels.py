#!/usr/bin/env python3
"""Benchmark the compiled step kernel against the numpy fallback.

The recurrent step at small batch sizes is the hot loop of expert rollouts and
decoding; this script reports steps/second per backend and batch size, plus an
end-to-end greedy-rollout comparison.

Usage: python benchmarks/bench_kernels.py [--reps 2000]
"""

import argparse
import time

import numpy as np

from divdec.generator import init_params
from divdec.kernels import CellWeights, available_backends


def make_weights(vocab, hidden, embed, ctrl, seed=0):
    p = init_params(vocab, ctrl, hidden, embed, seed).params
    return CellWeights(
        emb=p["W_wr"], w_gates=p["W_g"], b_gates=p["b_g"], w_read_in=p["W_r"],
        w_read_h=p["W_hr"], w_ctrl=p["W_dc"], w_out=p["W_ho"], b_out=p["b_ho"],
    )


def run_benchmark(batch_sizes=(1, 4, 25), reps=2000, vocab=150, hidden=64, embed=32, ctrl=23):
    w = make_weights(vocab, hidden, embed, ctrl)
    rng = np.random.default_rng(0)
    results = {}
    for name, step in available_backends().items():
        rows = []
        for b in batch_sizes:
            toks = rng.integers(0, vocab, size=b)
            h = np.zeros((b, hidden))
            c = np.zeros((b, hidden))
            d = rng.random((b, ctrl))
            step(w, toks, h, c, d)  # warm up
            t0 = time.perf_counter()
            for _ in range(reps):
                probs, h2, c2, d2 = step(w, toks, h, c, d)
            dt = time.perf_counter() - t0
            rows.append(
                {
                    "batch": b,
                    "us_per_call": dt / reps * 1e6,
                    "steps_per_sec": reps * b / dt,
                }
            )
        results[name] = rows
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=2000)
    args = parser.parse_args()
    results = run_benchmark(reps=args.reps)
    print(f"{'backend':<8} {'batch':>5} {'us/call':>10} {'steps/s':>12}")
    for name, rows in results.items():
        for r in rows:
            print(f"{name:<8} {r['batch']:>5} {r['us_per_call']:>10.2f} {r['steps_per_sec']:>12.0f}")
    if len(results) == 2:
        for b_idx, b in enumerate([r["batch"] for r in results["python"]]):
            speedup = (
                results["python"][b_idx]["us_per_call"]
                / results["cython"][b_idx]["us_per_call"]
            )
            print(f"batch {b}: cython speedup {speedup:.1f}x")


if __name__ == "__main__":
    main()
