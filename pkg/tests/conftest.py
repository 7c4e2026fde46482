import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest |a - n| / max(|a|, |n|, floor).

    Central differences carry roughly eps * |loss| / step ~ 1e-11 of roundoff,
    so below ``floor`` the ratio would measure noise rather than the gradient.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def network_gradient_error(seed: int, head: str = "mlcam", per_tensor: int = 40, eps: float = 1e-5) -> float:
    """Worst FD relative error over ``per_tensor`` random entries of every parameter.

    Uses a 16x16 input with taps of 16x16, 8x8 and 8x8, and small random biases
    so bias gradients are exercised away from the zero init.
    """
    from mlcam.autodiff import backward, no_grad
    from mlcam.network import NetworkConfig, batch_loss, forward_batch, init_network

    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(input_size=(16, 16), stem_pool=False, pool_between=(True, False), head=head, seed=seed)
    net = init_network(cfg)
    for name, p in net.params.items():
        if name.endswith(".b"):
            p.data[:] = rng.normal(scale=0.1, size=p.shape)
    x = rng.uniform(size=(2, 1, 16, 16))
    y = np.array([0, 1])

    def loss() -> float:
        return batch_loss(forward_batch(net, x), y)

    backward(loss())
    worst = 0.0
    with no_grad():
        for p in net.params.values():
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
            numeric = np.empty(len(picks))
            for k, i in enumerate(picks):
                old = flat[i]
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                numeric[k] = (up - down) / (2 * eps)
            worst = max(worst, max_rel_error(p.grad.reshape(-1)[picks], numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line and fail the test if it did not pass."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(name: str, passed: bool, detail: str = "") -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
