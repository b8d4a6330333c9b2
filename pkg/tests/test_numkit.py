import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divdec.errors import ContractViolation, NumericError
from divdec.numkit import (
    ParamStore,
    TrainConfig,
    adam_step,
    clip_gradients,
    finite_diff_check,
    grad_global_norm,
    load_checkpoint,
    save_checkpoint,
    softmax,
)


def make_store(shapes, seed=0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in shapes.items():
        store.add(name, rng.standard_normal(shape))
    return store


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetry():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)


@pytest.mark.parametrize("x", [-3.0, 0.0, 17.5, 700.0])
def test_softmax_singleton(x):
    np.testing.assert_allclose(softmax([x]), [1.0], atol=0)


def test_softmax_against_high_precision():
    logits = [1.0, 2.0, 3.0]
    with mpmath.workdps(60):
        exps = [mpmath.exp(x) for x in logits]
        total = sum(exps)
        expected = [float(e / total) for e in exps]
    np.testing.assert_allclose(softmax(logits), expected, rtol=1e-14)


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        softmax([])
    with pytest.raises(NumericError):
        softmax([1.0, np.nan])


@given(st.lists(st.floats(-300, 300), min_size=1, max_size=40))
@settings(max_examples=80, deadline=None)
def test_softmax_properties(logits):
    out = softmax(logits)
    assert abs(out.sum() - 1.0) <= 1e-9
    assert np.all(out >= 0)
    # argmax preservation: the top logit attains the maximal probability
    # (exact argmax equality is impossible when exp collapses an O(1e-17)
    # logit gap onto the same double)
    assert out[int(np.argmax(logits))] == out.max()


# -- adam ----------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    store = make_store({"a": (3, 2), "b": (4,)})
    before = {k: v.copy() for k, v in store.params.items()}
    adam_step(store, TrainConfig(learning_rate=0.1, seed=0))
    for name, value in store.params.items():
        np.testing.assert_array_equal(value, before[name])


def test_adam_first_step_displacement():
    store = ParamStore()
    store.add("p", np.array([2.0]))
    store.grads["p"][...] = 1.0
    lr = 0.005
    adam_step(store, TrainConfig(learning_rate=lr, seed=0))
    assert abs(float(store.params["p"][0]) - (2.0 - lr)) < 1e-9
    assert float(store.grads["p"][0]) == 0.0  # gradients zeroed


def reference_adam_trace(grads, lr, steps):
    """Independent scalar Adam (standard formulation with m-hat/v-hat)."""
    p, m, v = 0.0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grads(t)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9**t)
        vh = v / (1 - 0.999**t)
        p -= lr * mh / (np.sqrt(vh) + 1e-8)
    return p


def test_adam_two_steps_differ_from_doubled_rate():
    def run(lr, steps):
        store = ParamStore()
        store.add("p", np.array([0.0]))
        for _ in range(steps):
            store.grads["p"][...] = 1.0
            adam_step(store, TrainConfig(learning_rate=lr, seed=0))
        return float(store.params["p"][0])

    two_steps = run(0.01, 2)
    doubled = run(0.02, 1)
    assert two_steps != doubled
    assert abs(two_steps - reference_adam_trace(lambda t: 1.0, 0.01, 2)) < 1e-12
    assert abs(doubled - reference_adam_trace(lambda t: 1.0, 0.02, 1)) < 1e-12


def test_adam_trace_matches_reference_on_varying_grads():
    store = ParamStore()
    store.add("p", np.array([0.0]))
    grads = lambda t: np.sin(t) + 0.3
    for t in range(1, 8):
        store.grads["p"][...] = grads(t)
        adam_step(store, TrainConfig(learning_rate=0.07, seed=0))
    expected = reference_adam_trace(grads, 0.07, 7)
    assert abs(float(store.params["p"][0]) - expected) < 1e-12


def test_adam_nonfinite_gradient_names_parameter():
    store = make_store({"w_bad": (2,)})
    store.grads["w_bad"][0] = np.inf
    with pytest.raises(NumericError, match="w_bad"):
        adam_step(store, TrainConfig(seed=0))


# -- clipping ------------------------------------------------------------------


def test_clip_below_threshold_unchanged():
    store = make_store({"a": (4,)})
    store.grads["a"][...] = 0.15  # norm 0.3
    before = store.grads["a"].copy()
    clip_gradients(store, 0.5)
    np.testing.assert_array_equal(store.grads["a"], before)


def test_clip_scales_by_norm_ratio():
    store = ParamStore()
    store.add("a", np.zeros(4))
    store.grads["a"][...] = 1.0  # norm 2.0
    clip_gradients(store, 0.5)
    np.testing.assert_allclose(store.grads["a"], 0.25, rtol=1e-15)


def test_clip_rejects_bad_threshold():
    store = make_store({"a": (2,)})
    with pytest.raises(ValueError):
        clip_gradients(store, 0.0)


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 3.0))
@settings(max_examples=40, deadline=None)
def test_clip_norm_and_idempotence(seed, threshold):
    store = make_store({"a": (3, 3), "b": (5,)}, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for g in store.grads.values():
        g[...] = rng.standard_normal(g.shape)
    pre = grad_global_norm(store)
    clip_gradients(store, threshold)
    post = grad_global_norm(store)
    assert abs(post - min(pre, threshold)) < 1e-9
    once = {k: v.copy() for k, v in store.grads.items()}
    clip_gradients(store, threshold)
    for name, value in store.grads.items():
        np.testing.assert_array_equal(value, once[name])


# -- finite differences -----------------------------------------------------------


def test_finite_diff_sum_loss():
    store = make_store({"a": (3,), "b": (2, 2)})

    def forward(s):
        total = 0.0
        for name, p in s.params.items():
            s.grads[name] += 1.0
            total += p.sum()
        return total

    assert finite_diff_check(forward, store, 1e-5) < 1e-8


def test_finite_diff_quadratic():
    store = ParamStore()
    store.add("p", np.array([3.0]))

    def forward(s):
        p = s.params["p"][0]
        s.grads["p"][0] += 2.0 * p
        return p * p

    assert finite_diff_check(forward, store, 1e-5) < 1e-6
    assert abs(store.grads["p"][0]) == 0.0  # restored


def test_finite_diff_detects_nondeterminism():
    store = make_store({"a": (2,)})
    calls = []

    def forward(s):
        calls.append(1)
        return float(len(calls))

    with pytest.raises(ContractViolation):
        finite_diff_check(forward, store, 1e-5)


def test_finite_diff_epsilon_range():
    store = make_store({"a": (1,)})
    with pytest.raises(ValueError):
        finite_diff_check(lambda s: 0.0, store, 1e-2)


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    store = make_store({"w": (7, 3), "b": (11,)}, seed=5)
    meta = {"kind": "test", "note": "x"}
    path = tmp_path / "ck.npz"
    save_checkpoint(path, store, meta)
    loaded, got_meta = load_checkpoint(path)
    assert got_meta["kind"] == "test" and got_meta["format_version"] == 1
    assert loaded.names() == store.names()
    for name in store.names():
        np.testing.assert_array_equal(loaded.params[name], store.params[name])


def test_checkpoint_rejects_unknown_version(tmp_path):
    store = make_store({"w": (2,)})
    path = tmp_path / "ck.npz"
    save_checkpoint(path, store, {"format_version": 99})
    # save overwrites the version marker with the supported one
    _, meta = load_checkpoint(path)
    assert meta["format_version"] == 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(clip_threshold=-1.0)
