"""Reverse-mode automatic differentiation over dense float32 tensors.

A Tensor wraps a row-major numpy float32 array. Operations defined in
:mod:`triforge.autodiff.ops` record themselves on the active Tape; calling
``tape.backward(root)`` replays the records in exact reverse order and
accumulates gradients into ``tensor.grad``.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(AutodiffError):
    """Raised when a forward op produces NaN or Inf."""


class TapeError(AutodiffError):
    """Raised on tape misuse (double backward, nested recording, ...)."""


_ACTIVE_TAPE = None


def active_tape():
    return _ACTIVE_TAPE


def check_finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{opname}'")


class Tensor:
    """Dense float32 tensor. Data is immutable by convention once it has
    been consumed by a recorded op; leaf parameters may be updated between
    tapes (e.g. by an optimizer)."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def copy(self, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops.py to avoid an import cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from . import ops
        return ops.sum_all(self)

    def mean(self):
        from . import ops
        return ops.mean_all(self)


class Tape:
    """Ordered record of ops for one forward pass. Single-owner: must not
    be shared across threads while recording or running backward."""

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a Tape is already recording; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, root, seed=None, extra_roots=None):
        """Accumulate gradients of ``root`` w.r.t. every recorded tensor.

        ``seed`` is the upstream gradient injected at ``root``; defaults to
        ones (so a scalar root behaves as a loss). ``extra_roots`` is an
        optional list of (tensor, seed-or-None) pairs whose gradients are
        summed into the same walk (e.g. auxiliary regularizer losses).
        After the walk, every participating tensor with ``requires_grad``
        has ``.grad`` set; tensors with no path to a root get exact zeros.
        """
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is self:
            raise TapeError("backward called while tape is still recording")
        if self._consumed:
            raise TapeError("backward already run on this tape; re-record first")
        self._consumed = True

        if seed is None:
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=np.float32)
            if seed.shape != root.data.shape:
                raise TapeError("seed gradient shape must match root shape")

        acc = {id(root): seed.astype(np.float32, copy=True)}
        for extra, eseed in (extra_roots or []):
            if eseed is None:
                eseed = np.ones_like(extra.data)
            else:
                eseed = np.asarray(eseed, dtype=np.float32)
                if eseed.shape != extra.data.shape:
                    raise TapeError("extra seed shape must match its root")
            prev = acc.get(id(extra))
            if prev is None:
                acc[id(extra)] = eseed.astype(np.float32, copy=True)
            else:
                prev += eseed
        touched = {}
        for out, inputs, fn in reversed(self._records):
            for t in inputs:
                if isinstance(t, Tensor) and t.requires_grad:
                    touched[id(t)] = t
            g = acc.pop(id(out), None)
            if g is None:
                continue
            grads = fn(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                prev = acc.get(id(t))
                if prev is None:
                    acc[id(t)] = gi.astype(np.float32, copy=False)
                else:
                    prev += gi

        for tid, t in touched.items():
            g = acc.get(tid)
            t.grad = np.zeros_like(t.data) if g is None else g
        if root.requires_grad and root.grad is None:
            root.grad = seed
