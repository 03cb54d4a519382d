"""Fusion baselines: a gated multimodal unit over two tasks, and concatenation over eight."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .hypernet import torch_default_init

CONCAT_TASKS = ("a", "e", "i", "o", "u", "pa", "ta", "ka")
ADAPTER_DIM = 32


class GMU:
    """Gated multimodal unit followed by fc(hidden -> 2).

    h_t = tanh(f_t Wt + bt), h_v = tanh(f_v Wv + bv),
    z = sigmoid([f_v; f_t] Wz + bz), h = z * h_v + (1 - z) * h_t.
    """

    def __init__(self, in_features: int = 768, hidden: int = 768, n_classes: int = 2, seed: int = 0, dtype=np.float32):
        if hidden <= 0:
            raise ShapeError("GMU hidden size must be positive")
        rng = np.random.default_rng(seed)
        self.in_features = in_features
        p = self.params = ad.ParamStore()
        for name, fi in (("t", in_features), ("v", in_features), ("z", 2 * in_features)):
            p.add(f"gmu.W{name}", torch_default_init(rng, fi, (fi, hidden)), dtype)
            p.add(f"gmu.b{name}", torch_default_init(rng, fi, (hidden,)), dtype)
        p.add("gmu.head.weight", torch_default_init(rng, hidden, (hidden, n_classes)), dtype)
        p.add("gmu.head.bias", torch_default_init(rng, hidden, (n_classes,)), dtype)

    def gate(self, f_t: ad.Tensor, f_v: ad.Tensor):
        p = self.params
        for f in (f_t, f_v):
            if f.data.ndim != 2 or f.shape[1] != self.in_features:
                raise ShapeError(f"GMU inputs must be (n, {self.in_features}), got {f.shape}")
        if f_t.shape != f_v.shape:
            raise ShapeError(f"GMU inputs differ in shape: {f_t.shape} vs {f_v.shape}")
        h_t = ad.tanh(ad.linear(f_t, p["gmu.Wt"], p["gmu.bt"]))
        h_v = ad.tanh(ad.linear(f_v, p["gmu.Wv"], p["gmu.bv"]))
        z = ad.sigmoid(ad.linear(ad.concat([f_v, f_t], axis=1), p["gmu.Wz"], p["gmu.bz"]))
        h = z * h_v + (1.0 - z) * h_t
        return h, z, h_t, h_v

    def __call__(self, f_t: ad.Tensor, f_v: ad.Tensor) -> ad.Tensor:
        h = self.gate(f_t, f_v)[0]
        return ad.linear(h, self.params["gmu.head.weight"], self.params["gmu.head.bias"])


def gmu_forward(f_t, f_v, gmu: GMU) -> ad.Tensor:
    f_t, f_v = ad.as_tensor(f_t), ad.as_tensor(f_v)
    single = f_t.data.ndim == 1
    if single:
        f_t, f_v = ad.reshape(f_t, (1, -1)), ad.reshape(f_v, (1, -1))
    y = gmu(f_t, f_v)
    return y[0] if single else y


class ConcatHead:
    """Per-task fc(768 -> 32) + ReLU adapters, concatenated in CONCAT_TASKS order, then fc(256 -> 2)."""

    def __init__(self, in_features: int = 768, tasks=CONCAT_TASKS, n_classes: int = 2, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.tasks = tuple(tasks)
        self.in_features = in_features
        p = self.params = ad.ParamStore()
        for t in self.tasks:
            p.add(f"concat.adapter.{t}.weight", torch_default_init(rng, in_features, (in_features, ADAPTER_DIM)), dtype)
            p.add(f"concat.adapter.{t}.bias", torch_default_init(rng, in_features, (ADAPTER_DIM,)), dtype)
        width = ADAPTER_DIM * len(self.tasks)
        p.add("concat.head.weight", torch_default_init(rng, width, (width, n_classes)), dtype)
        p.add("concat.head.bias", torch_default_init(rng, width, (n_classes,)), dtype)

    def adapt(self, task: str, f: ad.Tensor) -> ad.Tensor:
        p = self.params
        return ad.relu(ad.linear(f, p[f"concat.adapter.{task}.weight"], p[f"concat.adapter.{task}.bias"]))

    def head(self, parts) -> ad.Tensor:
        if len(parts) != len(self.tasks):
            raise ShapeError(f"concatenation head needs {len(self.tasks)} inputs, got {len(parts)}")
        for part in parts:
            if part.data.ndim != 2 or part.shape[1] != ADAPTER_DIM:
                raise ShapeError(f"each input must be (n, {ADAPTER_DIM}), got {part.shape}")
        return ad.linear(ad.concat(parts, axis=1), self.params["concat.head.weight"], self.params["concat.head.bias"])

    def __call__(self, features: dict) -> ad.Tensor:
        """``features`` maps task -> (n, 768) backbone output."""
        return self.head([self.adapt(t, features[t]) for t in self.tasks])


def concat_head_forward(features, head: ConcatHead) -> ad.Tensor:
    """Eight 32-d vectors (or (n, 32) batches) in task order -> logits."""
    parts = [ad.as_tensor(f) for f in features]
    single = bool(parts) and parts[0].data.ndim == 1
    if single:
        parts = [ad.reshape(p, (1, -1)) for p in parts]
    y = head.head(parts)
    return y[0] if single else y
