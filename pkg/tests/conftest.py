"""Independent oracles shared by the test modules."""

import numpy as np
import pytest


def naive_conv(x, w, b, stride=1, padding=0, groups=1):
    """Direct seven-loop cross-correlation; no vectorisation to share bugs with."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(oh):
                for j in range(ow):
                    acc = b[oc] if b is not None else 0.0
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, g * cg + ci, i * stride + u, j * stride + v] * w[oc, ci, u, v]
                    out[ni, oc, i, j] = acc
    return out


def central_diff(f, x, idx, eps=1e-6):
    """d f / d x[idx] by central differences; restores ``x`` in place."""
    old = x[idx]
    x[idx] = old + eps
    fp = f()
    x[idx] = old - eps
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * eps)


def five_point_diff(f, x, idx, eps=1e-4):
    """Fourth-order stencil; the larger step keeps cancellation noise near 1e-12."""
    old = x[idx]
    vals = []
    for k in (2, 1, -1, -2):
        x[idx] = old + k * eps
        vals.append(f())
    x[idx] = old
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One verdict line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
