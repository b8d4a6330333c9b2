import numpy as np
import pytest

from divdec.corpus import encode_mr
from divdec.generator import greedy_rollout, init_context, init_params
from divdec.kernels import CellWeights, available_backends, backend_name


def random_weights(seed, v=17, e=5, h=7, d=3):
    store = init_params(v, d, h, e, seed)
    p = store.params
    return CellWeights(
        emb=p["W_wr"], w_gates=p["W_g"], b_gates=p["b_g"], w_read_in=p["W_r"],
        w_read_h=p["W_hr"], w_ctrl=p["W_dc"], w_out=p["W_ho"], b_out=p["b_ho"],
    )


def test_selected_backend_is_listed():
    assert backend_name in available_backends()


@pytest.mark.parametrize("d", [3, 0])
def test_backends_agree(d):
    backends = available_backends()
    if len(backends) < 2:
        pytest.skip("compiled backend not built")
    w = random_weights(seed=1, d=d)
    rng = np.random.default_rng(2)
    b = 9
    toks = rng.integers(0, 17, size=b)
    h = rng.standard_normal((b, 7))
    c = rng.standard_normal((b, 7))
    dd = rng.random((b, d))
    results = {name: fn(w, toks, h, c, dd) for name, fn in backends.items()}
    ref = results["python"]
    other = results["cython"]
    for a, bb in zip(ref, other):
        np.testing.assert_allclose(a, bb, rtol=1e-12, atol=1e-14)
    # identical greedy choices
    np.testing.assert_array_equal(ref[0].argmax(axis=1), other[0].argmax(axis=1))


def test_backends_agree_on_trained_rollouts(small_bundle, monkeypatch):
    backends = available_backends()
    if len(backends) < 2:
        pytest.skip("compiled backend not built")
    from divdec import kernels

    model = small_bundle["model"]
    schema = small_bundle["schema"]
    encs = [encode_mr(i.mr, schema) for i in small_bundle["test"].instances[:10]]
    rollouts = {}
    for name, fn in backends.items():
        monkeypatch.setattr(kernels, "step_batch", fn)
        rollouts[name] = [
            greedy_rollout(init_context(e, model), model, 24) for e in encs
        ]
    assert rollouts["python"] == rollouts["cython"]


def test_benchmark_smoke(capsys):
    """The comparison harness runs end to end on a tiny workload."""
    import importlib.util
    from pathlib import Path

    path = Path(__file__).parent.parent / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    results = mod.run_benchmark(batch_sizes=(1, 8), reps=50, vocab=32, hidden=16, embed=8, ctrl=4)
    for name, rows in results.items():
        assert all(r["steps_per_sec"] > 0 for r in rows)
