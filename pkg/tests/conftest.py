import numpy as np
import pytest

from nap import diffcore as dc


def numeric_grad(fn, arrays: dict, name: str, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn(arrays)`` with respect to ``arrays[name]``."""
    base = arrays[name]
    g = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        g[idx] = (fn({**arrays, name: plus}) - fn({**arrays, name: minus})) / (2 * step)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_grads(build, arrays: dict, tol: float = 1e-4) -> dict:
    """``build(tensors) -> scalar Tensor``; compare tape gradients with central differences."""
    with dc.Tape():
        ts = {k: dc.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        loss = build(ts)
    _, grads = dc.value_and_grad(loss, ts)

    def fn(arrs):
        return build({k: dc.Tensor(v) for k, v in arrs.items()}).item()

    errors = {k: relative_error(grads[k], numeric_grad(fn, arrays, k)) for k in arrays}
    bad = {k: e for k, e in errors.items() if e >= tol}
    assert not bad, f"gradient mismatch: {bad}"
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
