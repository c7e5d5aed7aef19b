"""Central finite-difference gradient oracle shared by the test suite."""

import numpy as np

from triforge.autodiff import Tensor, Tape


def numeric_grad(fn, tensors, wrt, h=1e-3):
    """Central-difference gradient of scalar fn(*tensors) w.r.t. tensors[wrt].

    Evaluates in float64 by temporarily swapping perturbed float32 data in.
    """
    target = tensors[wrt]
    base = target.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        for sgn in (+1.0, -1.0):
            pert = flat.copy()
            pert[i] += sgn * h
            target.data = pert.reshape(base.shape).astype(np.float32)
            val = float(fn(*tensors).data.reshape(()))
            gflat[i] += sgn * val
    target.data = base
    return (grad / (2.0 * h)).astype(np.float64)


def numeric_grad_f64(fn64, arrays, wrt, h=1e-5):
    """Central differences of a pure-float64 function of numpy arrays."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    base = arrays[wrt]
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn64(*arrays))
        flat[i] = orig - h
        dn = float(fn64(*arrays))
        flat[i] = orig
        gflat[i] = (up - dn) / (2.0 * h)
    return grad


def analytic_grad(fn, tensors, wrt):
    with Tape() as tape:
        out = fn(*tensors)
    tape.backward(out)
    g = tensors[wrt].grad
    return np.zeros_like(tensors[wrt].data) if g is None else g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return np.linalg.norm(a - b) / denom


def check_grad(fn, tensors, wrt, h=1e-3, tol=1e-3):
    num = numeric_grad(fn, tensors, wrt, h=h)
    ana = analytic_grad(fn, tensors, wrt)
    err = rel_err(num, ana)
    assert err < tol, f"gradient mismatch wrt arg {wrt}: rel err {err:.2e}"
    return err


def make_params(rng, *shapes, scale=0.5):
    return [
        Tensor(rng.standard_normal(s).astype(np.float32) * scale, requires_grad=True)
        for s in shapes
    ]
