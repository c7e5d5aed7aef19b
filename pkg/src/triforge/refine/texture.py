"""Multiresolution hash-grid 3D texture with a tiny MLP head.

All-zero tables with the (zero-bias) head give RGB (0.5, 0.5, 0.5) since the
pre-sigmoid output is exactly zero.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Tensor, ops
from ..autodiff.io import save_bundle, load_bundle

DEFAULT_LEVELS = (4, 8, 16)
DEFAULT_TABLE_SIZE = 4096
DEFAULT_FEATURES = 4
DEFAULT_HIDDEN = 16
INIT_SCALE = 1e-4


class HashGridTexture:
    """levels -> hash tables of trilinear features -> concat -> MLP -> RGB."""

    def __init__(self, levels=DEFAULT_LEVELS, table_size=DEFAULT_TABLE_SIZE,
                 features=DEFAULT_FEATURES, hidden=DEFAULT_HIDDEN, seed=0,
                 bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), zero_init=False):
        rng = np.random.default_rng(seed)
        self.levels = tuple(int(l) for l in levels)
        self.table_size = int(table_size)
        self.features = int(features)
        self.bounds = (np.asarray(bounds[0], np.float32),
                       np.asarray(bounds[1], np.float32))
        scale = 0.0 if zero_init else INIT_SCALE
        self.tables = [
            Tensor(
                rng.uniform(-scale, scale,
                            (table_size, features)).astype(np.float32),
                requires_grad=True,
            )
            for _ in self.levels
        ]
        fan_in = len(self.levels) * features
        w_scale = 0.0 if zero_init else math.sqrt(2.0 / fan_in)
        self.w1 = Tensor(
            rng.standard_normal((fan_in, hidden)).astype(np.float32) * w_scale,
            requires_grad=True,
        )
        self.b1 = Tensor(np.zeros(hidden, np.float32), requires_grad=True)
        self.w2 = Tensor(
            rng.standard_normal((hidden, 3)).astype(np.float32)
            * (0.0 if zero_init else math.sqrt(2.0 / hidden)),
            requires_grad=True,
        )
        self.b2 = Tensor(np.zeros(3, np.float32), requires_grad=True)

    def params(self):
        return self.tables + [self.w1, self.b1, self.w2, self.b2]

    def _normalize(self, xyz):
        lo, hi = self.bounds
        span = np.maximum(hi - lo, 1e-8)
        return ((np.asarray(xyz, np.float32) - lo) / span).astype(np.float32)

    def lookup(self, xyz) -> Tensor:
        """World points (N, 3) -> RGB (N, 3) in [0, 1].

        Accepts a Tensor (gradients flow into the query points) or an array.
        """
        if isinstance(xyz, Tensor):
            lo, hi = self.bounds
            span = np.maximum(hi - lo, 1e-8).astype(np.float32)
            shifted = ops.sub(xyz, Tensor(np.tile(lo, (xyz.shape[0], 1))))
            pts = ops.mul(shifted, Tensor(np.tile(1.0 / span,
                                                  (xyz.shape[0], 1))))
        else:
            pts = Tensor(self._normalize(xyz))
        feats = [
            ops.hash_interp(table, pts, res)
            for table, res in zip(self.tables, self.levels)
        ]
        h = ops.concat(feats, axis=1)
        h = ops.relu(ops.linear(h, self.w1, self.b1))
        return ops.sigmoid(ops.linear(h, self.w2, self.b2))

    # ------------------------------------------------------------ persistence

    def state_arrays(self):
        out = {f"table{i}": t.data for i, t in enumerate(self.tables)}
        out.update(w1=self.w1.data, b1=self.b1.data,
                   w2=self.w2.data, b2=self.b2.data)
        return out

    def load_state(self, arrays):
        for i, t in enumerate(self.tables):
            t.data = arrays[f"table{i}"].astype(np.float32)
        self.w1.data = arrays["w1"].astype(np.float32)
        self.b1.data = arrays["b1"].astype(np.float32)
        self.w2.data = arrays["w2"].astype(np.float32)
        self.b2.data = arrays["b2"].astype(np.float32)

    def snapshot(self):
        """Deep copy of all parameter arrays (frozen coarse texture)."""
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def save(self, directory):
        meta = {
            "kind": "hash_texture",
            "levels": list(self.levels),
            "table_size": self.table_size,
            "features": self.features,
            "hidden": int(self.b1.shape[0]),
            "bounds": [self.bounds[0].tolist(), self.bounds[1].tolist()],
        }
        return save_bundle(directory, self.state_arrays(), meta)

    @classmethod
    def load(cls, directory):
        arrays, meta = load_bundle(directory)
        tex = cls(levels=meta["levels"], table_size=meta["table_size"],
                  features=meta["features"], hidden=meta["hidden"],
                  bounds=meta["bounds"])
        tex.load_state(arrays)
        return tex
