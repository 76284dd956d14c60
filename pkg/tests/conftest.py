import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_difference(f, tensors, eps=1e-5):
    """Numerical gradient of the scalar-valued closure f with respect to
    every element of the given tensors (perturbed in place)."""
    grads = []
    for t in tensors:
        num = np.zeros_like(t.data)
        flat = t.data.ravel()
        out = num.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = float(f().data)
            flat[i] = old - eps
            lm = float(f().data)
            flat[i] = old
            out[i] = (lp - lm) / (2 * eps)
        grads.append(num)
    return grads


def assert_grads_close(f, tensors, rtol=1e-4, eps=1e-5):
    """Analytic vs central-difference gradients, relative error < rtol."""
    for t in tensors:
        t.grad = None
    loss = f()
    loss.backward()
    numeric = central_difference(f, tensors, eps=eps)
    for t, num in zip(tensors, numeric):
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        scale = np.maximum(np.abs(num) + np.abs(got), 1e-6)
        rel = np.abs(got - num) / scale
        assert rel.max() < rtol, f"gradient mismatch: rel={rel.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
