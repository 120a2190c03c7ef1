import numpy as np
import pytest

from seqtrans import neuralcore as nc
from seqtrans.datapipe import InteractionEvent, leave_one_out_split


def numeric_grad(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        up = f()
        flat[k] = orig - step
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * step)
    return g


def analytic_grad(build, *leaves: nc.Tensor) -> list[np.ndarray]:
    for t in leaves:
        t.grad = None
    with nc.Tape() as tape:
        root = build()
    nc.backward(tape, root)
    return [t.grad if t.grad is not None else np.zeros_like(t.value) for t in leaves]


def assert_grads_match(build, leaves, rtol=1e-6, step=1e-6):
    analytic = analytic_grad(build, *leaves)
    for t, a in zip(leaves, analytic):
        num = numeric_grad(lambda: float(build().value), t.value, step)
        scale = max(np.abs(num).max(), np.abs(a).max(), 1e-8)
        assert np.abs(a - num).max() / scale < rtol, (t.name, a, num)


def random_events(n_users: int, n_items: int, n_cats: int, length: int, seed: int):
    rng = np.random.default_rng(seed)
    cat_of = rng.integers(n_cats, size=n_items)
    events = []
    for u in range(n_users):
        for t in range(length):
            i = int(rng.integers(n_items))
            events.append(InteractionEvent(f"u{u}", f"i{i}", f"c{cat_of[i]}", t))
    return events


@pytest.fixture
def small_dataset():
    return leave_one_out_split(random_events(12, 30, 4, 9, seed=3))


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
