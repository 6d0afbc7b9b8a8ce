import numpy as np
import pytest

from hdmi_lab.diffnet import LayerSpec
from hdmi_lab.hypotheses import build_set


def random_probs(rng, n, k, sharpness=1.0):
    z = rng.normal(scale=sharpness, size=(n, k))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def tiny_set(seed=0, M=2, in_dim=2, k=3, variant="IC", dropout=0.0, width=6, bottleneck=4):
    ext = [LayerSpec(in_dim, width, "relu"), LayerSpec(width, bottleneck, "relu")]
    clf = [LayerSpec(bottleneck, bottleneck, "relu", dropout), LayerSpec(bottleneck, k, "identity")]
    return build_set(ext, clf, M, variant, seed=seed)


def all_params(hset):
    for key, store in hset.named_stores():
        for name in store:
            yield key, store, name


def zero_all(hset):
    for _, store in hset.named_stores():
        store.zero_grad()


def max_fd_rel_error(hset, loss_fn, value_fn=None, step=1e-5, floor=1e-6):
    """Largest relative gap between analytic and central-difference grads.

    ``loss_fn()`` returns the scalar loss and accumulates grads into the
    set. ``value_fn()`` (default ``loss_fn``) returns the loss only and is
    re-evaluated at every perturbed parameter. ``floor`` bounds the
    denominator so near-zero components are compared absolutely.
    """
    value_fn = value_fn or loss_fn
    zero_all(hset)
    loss_fn()
    analytic = {(key, name): store.grads(name).copy() for key, store, name in all_params(hset)}
    zero_all(hset)
    worst = 0.0
    for key, store, name in all_params(hset):
        w = store.values(name)
        flat = w.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value_fn()
            flat[i] = orig - step
            fm = value_fn()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = analytic[(key, name)].reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    zero_all(hset)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in rep.user_properties if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
