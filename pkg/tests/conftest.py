from __future__ import annotations

import numpy as np
import pytest

from mmcc.autodiff import DenseLayer, Graph, Network, Tensor


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        dn = f(x)
        flat[i] = old
        gflat[i] = (up - dn) / (2 * h)
    return g


def grad_close(analytic, numeric, rel=1e-4, abs_=1e-7) -> bool:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    return bool(np.all((err <= abs_) | (err <= rel * np.maximum(np.abs(analytic), np.abs(numeric)))))


def reverse_grad(fn, *arrays):
    """Gradients of ``fn(*tensors).sum()`` with respect to each input array."""
    ts = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Graph() as g:
        out = fn(*ts).sum()
    grads = g.backward(out)
    return [grads.get(t, np.zeros_like(t.data)) for t in ts]


def random_network(rng, activation):
    widths = [int(n) for n in rng.integers(2, 6, size=4)]
    if activation == "grouped_softmax":
        out = widths[-1]
        cut = int(rng.integers(1, out)) if out > 1 else 1
        groups = [list(range(cut)), list(range(cut, out))] if cut < out else [list(range(out))]
        scales = rng.uniform(0.5, 2.0, size=len(groups))
        layers = [DenseLayer.init(a, b, "relu", rng) for a, b in zip(widths[:-2], widths[1:-1])]
        layers.append(DenseLayer.init(widths[-2], out, activation, rng, groups=groups, scales=scales))
        net = Network(layers)
    else:
        net = Network.mlp(widths, rng, hidden_activation=activation, output_activation=activation)
    for p in net.parameters():
        p.data = p.data + rng.normal(scale=0.1, size=p.data.shape)
    return net


def network_gradient_check(net, x, weights):
    """Compare reverse-mode and finite-difference gradients of ``sum(w * net(x))``."""
    net.set_requires_grad(True)
    with Graph() as g:
        out = (net(Tensor(x)) * weights).sum()
    grads = g.backward(out)
    net.set_requires_grad(False)
    ok = True
    for p in net.parameters():
        def f(v, p=p):
            old = p.data
            p.data = v
            val = float((net(Tensor(x)).data * weights).sum())
            p.data = old
            return val
        ok &= grad_close(grads[p], central_difference(f, p.data.copy()))
    return ok


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report ---------------------------------------------------
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records a PASS/FAIL line for the terminal summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
