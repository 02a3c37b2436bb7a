import numpy as np
import pytest

from physicsnerf import diffmath as dm


def numeric_grad(fn, tensor, h=1e-4, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``."""
    flat = tensor.values.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().values)
        flat[i] = orig - h
        fm = float(fn().values)
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def analytic_grad(fn, tensors):
    for t in tensors:
        t.zero_grad()
    with dm.Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [t.grad.copy() for t in tensors], tape


def rel_error(a, n, floor=1e-8):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance gate reporting: one line per criterion in the terminal summary

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[name] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
