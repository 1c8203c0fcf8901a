"""Compiled and numpy kernel implementations must agree bit for bit."""

import math
import os
import subprocess
import sys

import numpy as np
import pytest

from nerfdesk import backend
from nerfdesk.backend import load_impl
from nerfdesk.rng import Prng

np_impl = load_impl("numpy")
try:
    c_impl = load_impl("compiled")
except ImportError:
    c_impl = None

needs_compiled = pytest.mark.skipif(c_impl is None,
                                    reason="compiled extension not built")


def adversarial_rows(rows, cols, seed):
    """Summands spanning ~30 orders of magnitude with sign cancellation;
    naive left-to-right and pairwise summation disagree on these."""
    rng = Prng(seed)
    mag = rng.uniform((rows, cols)) * 30.0 - 15.0
    sign = np.where(rng.uniform((rows, cols)) < 0.5, -1.0, 1.0)
    return sign * 10.0 ** mag


def test_exact_sum_is_exactly_rounded():
    from fractions import Fraction
    x = adversarial_rows(1, 64, seed=7)[0]
    got = np_impl.exact_sum(x)
    true = sum(Fraction(v) for v in x.tolist())
    assert got == float(true)


def test_exact_sum_order_invariant():
    x = adversarial_rows(1, 128, seed=8)[0]
    perm = Prng(3).shuffle(128)
    assert np_impl.exact_sum(x) == np_impl.exact_sum(x[perm])


@needs_compiled
def test_exact_sum_backends_bit_equal():
    for seed in range(6):
        x = adversarial_rows(1, 96, seed=seed)[0]
        assert c_impl.exact_sum(x) == np_impl.exact_sum(x)


@needs_compiled
def test_exact_rowsum_backends_bit_equal():
    e = np.abs(adversarial_rows(9, 33, seed=12))
    a = c_impl.exact_rowsum(e)
    b = np_impl.exact_rowsum(e)
    assert np.array_equal(a, b)


@needs_compiled
def test_exact_weighted_rows_backends_bit_equal():
    rng = Prng(44)
    p = rng.uniform((7, 13))
    v = adversarial_rows(13, 5, seed=2)
    assert np.array_equal(c_impl.exact_weighted_rows(p, v),
                          np_impl.exact_weighted_rows(p, v))


def test_exact_weighted_rows_matches_fsum():
    rng = Prng(45)
    p = rng.uniform((4, 11))
    v = adversarial_rows(11, 3, seed=5)
    got = np_impl.exact_weighted_rows(p, v)
    for i in range(4):
        for j in range(3):
            ref = math.fsum((p[i, k] * v[k, j] for k in range(11)))
            assert got[i, j] == ref


def test_exact_weighted_rows_key_permutation_bit_exact():
    rng = Prng(46)
    p = rng.uniform((5, 16))
    v = rng.normal((16, 4))
    perm = Prng(6).shuffle(16)
    base = np_impl.exact_weighted_rows(p, v)
    swapped = np_impl.exact_weighted_rows(p[:, perm], v[perm])
    assert np.array_equal(base, swapped)


def _composite_inputs(seed, rays=6, samples=9):
    rng = Prng(seed)
    sigma = rng.uniform((rays, samples)) * 4.0
    delta = rng.uniform((rays, samples)) * 0.4 + 0.02
    sd = sigma * delta
    om = np.exp(-sd)
    alpha = -np.expm1(-sd)
    rgb = rng.uniform((rays, samples, 3))
    bg = rng.uniform(3)
    return om, alpha, rgb, bg, delta


@needs_compiled
def test_composite_scan_backends_bit_equal():
    for seed in range(5):
        om, alpha, rgb, bg, _ = _composite_inputs(seed)
        p1, o1, w1 = c_impl.composite_scan(om, alpha, rgb, bg)
        p2, o2, w2 = np_impl.composite_scan(om, alpha, rgb, bg)
        assert np.array_equal(p1, p2)
        assert np.array_equal(o1, o2)
        assert np.array_equal(w1, w2)


@needs_compiled
def test_composite_scan_backward_backends_bit_equal():
    rng = Prng(88)
    om, alpha, rgb, bg, delta = _composite_inputs(21)
    _, _, w = np_impl.composite_scan(om, alpha, rgb, bg)
    gpix = rng.normal((om.shape[0], 3))
    gop = rng.normal(om.shape[0])
    g1 = c_impl.composite_scan_backward(gpix, gop, delta, rgb, bg, om, w)
    g2 = np_impl.composite_scan_backward(gpix, gop, delta, rgb, bg, om, w)
    assert np.array_equal(g1[0], g2[0])
    assert np.array_equal(g1[1], g2[1])


@needs_compiled
def test_chamfer_nn_backends_bit_equal():
    rng = Prng(30)
    p = rng.normal((40, 3))
    q = rng.normal((25, 3))
    assert np.array_equal(c_impl.chamfer_nn(p, q), np_impl.chamfer_nn(p, q))


def test_chamfer_nn_matches_brute_force():
    rng = Prng(31)
    p = rng.normal((12, 3))
    q = rng.normal((17, 3))
    got = np_impl.chamfer_nn(p, q)

    def d2(a, b):
        dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
        return dx * dx + dy * dy + dz * dz  # same reduction order as axis-sum

    for i in range(12):
        best = min(d2(p[i], q[j]) for j in range(17))
        assert got[i] == math.sqrt(best)


def test_backend_env_var_selection():
    code = ("import nerfdesk.backend as b; print(b.BACKEND_NAME)")
    for want in ("numpy",) + (("compiled",) if c_impl is not None else ()):
        env = dict(os.environ, NERFDESK_BACKEND=want)
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True)
        assert out.returncode == 0, out.stderr
        assert out.stdout.strip() == want


def test_backend_env_var_rejects_unknown():
    env = dict(os.environ, NERFDESK_BACKEND="gpu")
    out = subprocess.run([sys.executable, "-c", "import nerfdesk.backend"],
                         env=env, capture_output=True, text=True)
    assert out.returncode != 0
    assert "NERFDESK_BACKEND" in out.stderr


def test_active_backend_exposes_name():
    assert backend.BACKEND_NAME in ("compiled", "numpy")


def test_wrappers_accept_noncontiguous():
    rng = Prng(50)
    wide = rng.normal((6, 10))
    view = wide[:, ::2]  # stride-2 view
    assert backend.exact_rowsum(view).shape == (6,)
    got = backend.exact_rowsum(np.ascontiguousarray(view))
    assert np.array_equal(backend.exact_rowsum(view), got)
