import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asofed import kernels

needs_compiled = pytest.mark.skipif(kernels.compiled is None, reason="extension not built")
seeds = st.integers(0, 10**6)


def vectors(seed, n, count):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=n) for _ in range(count)]


def run_both(name, args, mutate):
    """Call ``name`` on each backend with fresh copies; return the mutated arrays."""
    out = []
    for backend in (kernels.python, kernels.compiled):
        a = [x.copy() if isinstance(x, np.ndarray) else x for x in args]
        getattr(backend, name)(*a)
        out.append([a[i] for i in mutate])
    return out


def test_backend_name_matches_selection():
    assert kernels.BACKEND in ("python", "cython")
    assert kernels.active.NAME == kernels.BACKEND


def test_python_backend_semantics():
    w = np.array([1.0, 2.0])
    kernels.python.sgd_step(w, np.array([1.0, -1.0]), 0.5)
    assert w.tolist() == [0.5, 2.5]
    h = np.array([1.0])
    kernels.python.ema_update(h, np.array([3.0]), 0.25)
    assert h.tolist() == [0.25 + 0.75 * 3.0]
    w = np.array([1.0])
    kernels.python.async_merge(w, np.array([1.0]), np.array([0.0]), 0.2)
    assert w.tolist() == pytest.approx([0.8])
    w = np.array([0.0])
    kernels.python.mix(w, np.array([1.0]), 0.6)
    assert w.tolist() == pytest.approx([0.6])


def test_python_asofed_step():
    w, ws, gf, sp, hp = (np.array([x]) for x in (0.5, 0.0, 0.1, 0.05, 0.02))
    gs = np.empty(1)
    kernels.python.asofed_step(w, ws, gf, sp, hp, 1.0, 0.1, gs)
    assert gs[0] == pytest.approx(0.6)
    assert w[0] == pytest.approx(0.5 - 0.1 * (0.6 - 0.05 + 0.02))


@needs_compiled
@given(seeds, st.integers(1, 50), st.floats(-2, 2))
def test_elementwise_kernels_agree(seed, n, c):
    w, g, v, x = vectors(seed, n, 4)
    for name, args, mut in [("sgd_step", (w, g, c), [0]),
                            ("ema_update", (w, v, abs(c) / 2.0001), [0]),
                            ("async_merge", (w, x, v, abs(c) / 2), [0]),
                            ("mix", (w, v, abs(c) / 2), [0])]:
        a, b = run_both(name, args, mut)
        assert np.array_equal(a[0], b[0]), name


@needs_compiled
@given(seeds, st.integers(1, 50), st.floats(0, 2), st.floats(1e-4, 1))
def test_asofed_step_agrees(seed, n, lam, step):
    w, ws, gf, sp, hp = vectors(seed, n, 5)
    args = (w, ws, gf, sp, hp, lam, step, np.empty(n))
    a, b = run_both("asofed_step", args, [0, 7])
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@needs_compiled
@given(seeds, st.integers(1, 6), st.integers(1, 9), st.sampled_from([0, 1]), st.sampled_from([0, 1, 2]),
       st.floats(0.01, 50))
def test_reweight_agrees(seed, rows, cols, axis, scale, spread):
    m = np.random.default_rng(seed).normal(scale=spread, size=(rows, cols))
    a, b = run_both("reweight", (m, axis, scale), [0])
    assert np.allclose(a[0], b[0], rtol=1e-12, atol=1e-300)


@needs_compiled
def test_reweight_zero_slice_with_norm_scale():
    m = np.zeros((2, 3))
    m[1] = [1.0, -2.0, 0.5]
    a, b = run_both("reweight", (m, 1, 2), [0])
    assert np.array_equal(a[0][0], np.zeros(3)) and np.array_equal(b[0][0], np.zeros(3))
    assert np.allclose(a[0], b[0], rtol=1e-13)


def test_env_var_forces_python_backend():
    code = "from asofed import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, ASOFED_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
    env.pop("ASOFED_PURE_PYTHON")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == ("cython" if kernels.compiled is not None else "python")
