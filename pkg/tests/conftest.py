import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cryomorph.volume import Volume

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gaussian_blob(d, sigma, center=None, voxel_size=1.0):
    c = (d - 1) / 2.0 if center is None else np.asarray(center, dtype=float)
    g = np.arange(d, dtype=float)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    c = np.broadcast_to(c, (3,))
    r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
    return Volume(np.exp(-r2 / (2 * sigma**2)), voxel_size)


def random_volume(rng, d, voxel_size=1.0):
    return Volume(rng.standard_normal((d, d, d)), voxel_size)


def check_grad(fn, inputs, wrt, eps=1e-6, seed=0):
    """Max relative error between autodiff and central differences.

    ``fn(*tensors)`` returns a DiffTensor; it is contracted with a fixed random
    cotangent to a scalar. ``wrt`` indexes the inputs whose gradients are checked.
    """
    from cryomorph import autodiff as ad

    tensors = [ad.parameter(np.array(x, dtype=np.float64)) for x in inputs]
    out = fn(*tensors)
    w = np.random.default_rng(seed).standard_normal(out.shape)
    (out * ad.as_tensor(w)).sum().backward()
    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad
        x = np.array(inputs[i], dtype=np.float64)
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            vals = []
            for sgn in (1, -1):
                xp = x.copy()
                xp[idx] += sgn * eps
                args = [ad.as_tensor(np.array(a, dtype=np.float64)) for a in inputs]
                args[i] = ad.as_tensor(xp)
                vals.append((fn(*args).values * w).sum())
            numeric[idx] = (vals[0] - vals[1]) / (2 * eps)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        worst = max(worst, err)
    return worst


_CRITERIA = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _CRITERIA.extend(l for l in report.capstdout.splitlines() if l.startswith(("[PASS]", "[FAIL]")))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
