import sys
import numpy as np
import pytest


def naive_conv2d(x, kernels, bias, stride):
    """Six-nested-loop "same"-padded cross-correlation."""
    b, h, w, cin = x.shape
    s, _, _, cout = kernels.shape
    oh, ow = -(-h // stride), -(-w // stride)
    pad_h = max((oh - 1) * stride + s - h, 0) // 2
    pad_w = max((ow - 1) * stride + s - w, 0) // 2
    out = np.zeros((b, oh, ow, cout))
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    acc = bias[o]
                    for di in range(s):
                        for dj in range(s):
                            r, c = i * stride + di - pad_h, j * stride + dj - pad_w
                            if 0 <= r < h and 0 <= c < w:
                                for ci in range(cin):
                                    acc += x[n, r, c, ci] * kernels[di, dj, ci, o]
                    out[n, i, j, o] = acc
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
