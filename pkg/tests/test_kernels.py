import os
import subprocess
import sys

import numpy as np
import pytest

from kneurons import _kernels


@pytest.mark.parametrize("seed", range(5))
def test_bilinear_numba_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
    H, W = int(rng.integers(1, 40)), int(rng.integers(1, 40))
    a = _kernels._bilinear_loop(g, H, W)
    b = _kernels._bilinear_numpy(g, H, W)
    assert np.abs(a - b).max() <= 1e-12


def test_gelu_matches_closed_form_and_value_path():
    x = np.random.default_rng(0).normal(scale=3, size=(7, 11))
    out, d = _kernels.gelu_with_grad(x)
    want = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    assert np.abs(out - want).max() <= 1e-13
    assert np.abs(_kernels.gelu(x) - out).max() <= 1e-13


def test_gelu_derivative_finite_difference():
    x = np.linspace(-4, 4, 101)
    _, d = _kernels.gelu_with_grad(x)
    eps = 1e-6
    fd = (_kernels.gelu_with_grad(x + eps)[0] - _kernels.gelu_with_grad(x - eps)[0]) / (2 * eps)
    assert np.abs(d - fd).max() < 1e-8


def test_lcs_length():
    a = np.array([1, 2, 3, 4, 1], dtype=np.int64)
    b = np.array([3, 4, 1, 2, 1], dtype=np.int64)
    assert _kernels.lcs_length(a, b) == 3
    assert _kernels.lcs_length(a[:0], b) == 0


def test_fallback_path_agrees():
    code = (
        "import numpy as np, json;"
        "from kneurons import _kernels as k;"
        "from kneurons.imaging import inpaint;"
        "rng=np.random.default_rng(0);img=rng.integers(0,256,(12,12,3),dtype=np.uint8);"
        "m=np.zeros((12,12),bool);m[3:8,4:9]=True;"
        "print(json.dumps([k.USE_NUMBA, inpaint(img,m,'telea',3).tolist(),"
        "k.bilinear_resize(np.arange(6.).reshape(2,3),5,7).tolist()]))"
    )
    outs = []
    for flag in ("1", "0"):
        env = dict(os.environ, KNEURONS_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True)
        outs.append(res.stdout)
    import json
    (nb, img_a, bl_a), (py, img_b, bl_b) = (json.loads(o) for o in outs)
    assert nb is True and py is False
    assert img_a == img_b
    assert np.abs(np.array(bl_a) - np.array(bl_b)).max() <= 1e-12
