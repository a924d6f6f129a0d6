import numpy as np
import pytest

from dlrlock import autograd as ag


def fd_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def tape_grad(build, x, requires_grad=True):
    """Gradient of ``build(tape, node)`` with respect to the input array ``x``."""
    t = ag.Tape("train_full")
    n = t.input(x, requires_grad=requires_grad)
    out = build(t, n)
    ig = {}
    t.backward(out, input_grads=ig)
    return out.value, ig.get(n.id)


def tape_value(build, x):
    t = ag.Tape("inference")
    return float(build(t, t.input(x)).value)


@pytest.fixture
def fd():
    return fd_grad


# ---- shared toy models (trained once per session) ---------------------------

# step counts for the desk-scale lock used throughout the suite
TEACHER_STEPS = 500
PHASE1_STEPS = 2000
PHASE2_STEPS = 400


@pytest.fixture(scope="session")
def toy_corpus():
    from dlrlock.datasets import byte_corpus
    return byte_corpus()


@pytest.fixture(scope="session")
def toy_teacher(toy_corpus):
    from dlrlock.lockpipe import train_teacher
    from dlrlock.training import LMTrainConfig
    model, _ = train_teacher(toy_corpus, LMTrainConfig(steps=TEACHER_STEPS, lr=3e-3, batch_size=16,
                                                       seq_len=128))
    return model


@pytest.fixture(scope="session")
def toy_lock(toy_teacher, toy_corpus):
    from dlrlock import lockpipe as lp
    return lp.lock_model(toy_teacher, 4, toy_corpus, lp.phase1_defaults(steps=PHASE1_STEPS),
                         lp.phase2_defaults(steps=PHASE2_STEPS))


# ---- acceptance summary -------------------------------------------------------

ACCEPTANCE: dict = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Accumulate one acceptance check; a criterion passes only if all its checks pass."""
    prev = ACCEPTANCE.get(n)
    if prev is None:
        ACCEPTANCE[n] = (bool(ok), [detail])
    else:
        ACCEPTANCE[n] = (prev[0] and bool(ok), prev[1] + [detail])
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, details = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  " + "; ".join(details))
