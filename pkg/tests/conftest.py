import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(loss_fn, tensors, n_samples=None, step=1e-5, seed=0, floor=1e-6):
    """Max relative error between autograd and central differences.

    ``loss_fn()`` must rebuild the graph from the current values of
    ``tensors`` (leaf tensors with requires_grad). Entries are sampled
    uniformly when ``n_samples`` is given. The denominator is
    ``|g_fd| + floor * max(1, |loss|)``: gradients below that scale sit
    under the round-off of a float64 central difference.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    tau = floor * max(1.0, abs(loss.item()))
    analytic = [t.grad.detach().clone() for t in tensors]
    slots = [(i, j) for i, t in enumerate(tensors) for j in range(t.numel())]
    if n_samples is not None and n_samples < len(slots):
        pick = np.random.default_rng(seed).choice(len(slots), n_samples, replace=False)
        slots = [slots[k] for k in pick]
    worst = 0.0
    with torch.no_grad():
        for i, j in slots:
            flat = tensors[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            up = loss_fn().item()
            flat[j] = orig - step
            down = loss_fn().item()
            flat[j] = orig
            g_fd = (up - down) / (2 * step)
            g_an = analytic[i].view(-1)[j].item()
            worst = max(worst, abs(g_an - g_fd) / (abs(g_fd) + tau))
    return worst


ACCEPTANCE_LINES = {}


def record_acceptance(number, ok, detail):
    """Store the one-line verdict for an acceptance criterion and echo it."""
    verdict = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    line = f"criterion {number:>2}: {verdict:<9} {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
