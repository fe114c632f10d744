import numpy as np
import pytest

from heterolora import AdapterConfig, ModelConfig, Transformer, inject
from heterolora.tasks import SyntheticTask, make_task


def central_diff(f, arrays, h=1e-4):
    """Numerical gradient of scalar ``f()`` w.r.t. each array, perturbing in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def tiny_config(**kw):
    base = dict(d_model=8, n_layers=2, n_heads=2, d_ff=16, vocab_size=16, max_seq_len=6, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def randomise_adapters(model, seed=1, scale=0.3):
    rng = np.random.default_rng(seed)
    for a in model.adapters.values():
        a.A.data[...] = rng.normal(0, scale, a.A.shape)
        a.B.data[...] = rng.normal(0, scale, a.B.shape)


@pytest.fixture
def tiny_model():
    return Transformer(tiny_config())


@pytest.fixture
def adapted_model():
    model = Transformer(tiny_config())
    inject(model, AdapterConfig(lora_sites=("q_proj", "v_proj"), lora_rank=2,
                                shortcut_kinds=("res1", "res2", "in", "cut"), shortcut_rank=2))
    return model


@pytest.fixture
def tiny_batches():
    task = make_task(SyntheticTask("parity", vocab_size=16, seq_len=6, n_train=64, n_eval=16, seed=3))
    return task.train_batches(8, np.random.default_rng(0))[:4]


ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
