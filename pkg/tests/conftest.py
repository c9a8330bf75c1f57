import numpy as np
import pytest

from calgan.corpus import WorldConfig, generate_world
from calgan.discriminator import Discriminator, DiscriminatorConfig
from calgan.generator import Generator, GeneratorConfig
from calgan.numeric import SeededRng


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(n_images=40, seed=3))


@pytest.fixture(scope="session")
def desk_world():
    return generate_world(WorldConfig(seed=7))


def make_models(ds, seed=0, d=8, kind="cal", init_scale=0.3):
    rng = SeededRng(seed)
    V = len(ds.vocab)
    gen = Generator.create(GeneratorConfig(V, ds.d_img, d, d, 4, ds.t_max, init_scale), rng.child(0))
    disc = Discriminator.create(DiscriminatorConfig(V, ds.d_img, d, d, 10.0, kind, init_scale), rng.child(1))
    return gen, disc


@pytest.fixture
def models(small_world):
    return make_models(small_world)


def param_grad_check(params, loss_fn, names=None, max_coords=40, seed=0):
    """Relative error of analytic vs central-difference gradients on a
    random subset of coordinates of each named parameter."""
    loss = loss_fn()
    params.zero_grad()
    loss.backward()
    grads = {n: params[n].grad.copy() if params[n].grad is not None else np.zeros_like(params[n].data)
             for n in params}
    params.zero_grad()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names or list(params):
        t = params[name]
        flat = t.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = loss_fn().item()
            flat[i] = orig - 1e-5
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / 2e-5
            a = grads[name].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the summary prints one line each."""
    def record(number, title, ok, detail=""):
        _CRITERIA[number] = (title, bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {title}  {detail}")
