"""Hypernetwork head: an MLP maps a condition vector to the weights of a linear classifier.

``HyperNetwork`` is H(C; Phi): C -> ReLU(C W1 + b1) W2 + b2, whose 1538
outputs are split into a 768x2 weight matrix (row-major) and a 2-vector
bias.  Only Phi is a trainable parameter; the generated weights are
intermediate graph values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ParameterError, ShapeError, StateError

NOISE_DIM = 128
EGEMAPS_DIM = 88
HIDDEN = 512


def torch_default_init(rng, fan_in, shape, dtype=np.float32):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ConditionVector:
    values: np.ndarray
    mode: str = "noise"
    source: object = None

    def __post_init__(self):
        expected = {"noise": NOISE_DIM, "data": EGEMAPS_DIM}.get(self.mode)
        if expected is None:
            raise ParameterError(f"unknown condition mode {self.mode!r}")
        if self.values.shape[-1] != expected:
            raise ShapeError(f"{self.mode} condition must have {expected} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("condition vector is not finite")


class ConditionSampler:
    """Seeded N(0, 1) condition vectors.

    ``fixed_per_run`` draws once and reuses that vector everywhere.
    ``per_step`` draws a fresh vector for every training step; evaluation
    always uses the run vector.
    """

    def __init__(self, seed: int, policy: str = "fixed_per_run", dim: int = NOISE_DIM):
        if policy not in ("fixed_per_run", "per_step"):
            raise ParameterError(f"unknown condition policy {policy!r}")
        self.seed = seed
        self.policy = policy
        self.dim = dim
        self._rng = np.random.default_rng(seed)
        self._run_vector = self._rng.standard_normal(dim)
        self._steps = 0

    def run_vector(self) -> ConditionVector:
        return ConditionVector(self._run_vector.copy(), "noise", self.seed)

    def for_step(self) -> ConditionVector:
        if self.policy == "fixed_per_run":
            return self.run_vector()
        self._steps += 1
        return ConditionVector(self._rng.standard_normal(self.dim), "noise", (self.seed, self._steps))

    def for_eval(self) -> ConditionVector:
        return self.run_vector()


def sample_condition(seed: int, policy: str = "fixed_per_run") -> ConditionVector:
    return ConditionSampler(seed, policy).run_vector()


class HyperNetwork:
    """Phi = (W1, b1, W2, b2) with W2 of width in_features * n_classes + n_classes.

    ``bias_mode="separate"`` instead keeps the target bias as a direct
    parameter and H emits only the in_features * n_classes weights.
    """

    def __init__(
        self,
        cond_dim: int = NOISE_DIM,
        hidden: int = HIDDEN,
        in_features: int = 768,
        n_classes: int = 2,
        bias_mode: str = "joint",
        seed: int = 0,
        dtype=np.float32,
        prefix: str = "hyper",
    ):
        if bias_mode not in ("joint", "separate"):
            raise ParameterError(f"unknown bias_mode {bias_mode!r}")
        self.cond_dim, self.hidden = cond_dim, hidden
        self.in_features, self.n_classes = in_features, n_classes
        self.bias_mode = bias_mode
        self.n_weights = in_features * n_classes
        out = self.n_weights + (n_classes if bias_mode == "joint" else 0)
        rng = np.random.default_rng(seed)
        self.params = ad.ParamStore()
        self.prefix = prefix
        self.params.add(f"{prefix}.W1", torch_default_init(rng, cond_dim, (cond_dim, hidden)), dtype)
        self.params.add(f"{prefix}.b1", torch_default_init(rng, cond_dim, (hidden,)), dtype)
        self.params.add(f"{prefix}.W2", torch_default_init(rng, hidden, (hidden, out)), dtype)
        self.params.add(f"{prefix}.b2", torch_default_init(rng, hidden, (out,)), dtype)
        if bias_mode == "separate":
            self.params.add(f"{prefix}.target_bias", np.zeros(n_classes), dtype)

    def phi(self):
        p, q = self.params, self.prefix
        return p[f"{q}.W1"], p[f"{q}.b1"], p[f"{q}.W2"], p[f"{q}.b2"]

    def generate(self, C) -> tuple[ad.Tensor, ad.Tensor]:
        """C (m, d) -> W (m, in_features, n_classes), b (m, n_classes)."""
        C = ad.as_tensor(C)
        if C.data.ndim == 1:
            C = ad.reshape(C, (1, -1))
        if C.shape[1] != self.cond_dim:
            raise ShapeError(f"condition has {C.shape[1]} values, hypernetwork expects {self.cond_dim}")
        W1, b1, W2, b2 = self.phi()
        o = ad.linear(ad.relu(ad.linear(C, W1, b1)), W2, b2)
        m = C.shape[0]
        W = ad.reshape(o[:, : self.n_weights], (m, self.in_features, self.n_classes))
        if self.bias_mode == "joint":
            b = o[:, self.n_weights :]
        else:
            b = ad.reshape(self.params[f"{self.prefix}.target_bias"], (1, self.n_classes))
            if m > 1:
                b = ad.concat([b] * m, axis=0)
        return W, b


def generate_params(C, hyper: HyperNetwork) -> tuple[ad.Tensor, ad.Tensor]:
    """Theta = H(C; Phi) for a single condition vector: W (768, 2), b (2,)."""
    values = C.values if isinstance(C, ConditionVector) else C
    W, b = hyper.generate(values)
    return W[0], b[0]


def target_forward(X, W, b) -> ad.Tensor:
    """Logits X W + b.  X is (768,) or (n, 768); W (768, 2) or (m, 768, 2)."""
    X, W, b = ad.as_tensor(X), ad.as_tensor(W), ad.as_tensor(b)
    single = X.data.ndim == 1
    if single:
        X = ad.reshape(X, (1, -1))
    if W.data.ndim == 2:
        W = ad.reshape(W, (1,) + W.shape)
        b = ad.reshape(b, (1, -1))
    if X.shape[1] != W.shape[1]:
        raise ShapeError(f"features have {X.shape[1]} values, generated W expects {W.shape[1]}")
    y = ad.batched_affine(X, W, b)
    return y[0] if single else y


class HyperHead:
    """Target head F(X; H(C; Phi))."""

    def __init__(self, hyper: HyperNetwork, mode: str = "noise"):
        self.hyper = hyper
        self.mode = mode
        self.params = hyper.params
        self._last = None

    def __call__(self, X: ad.Tensor, C) -> ad.Tensor:
        W, b = self.hyper.generate(C)
        logits = ad.batched_affine(X, W, b)
        self._last = logits
        return logits

    def backward(self, dlogits):
        """Push a logits gradient into Phi (and X if it requires grad)."""
        if self._last is None:
            raise StateError("backward called before forward")
        out, self._last = self._last, None
        out.backward(np.asarray(dlogits, dtype=out.data.dtype))


class PlainHead:
    """Ordinary trainable fc(768 -> 2); the hypernetwork-removed ablation."""

    def __init__(self, in_features: int = 768, n_classes: int = 2, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.params = ad.ParamStore()
        self.params.add("plain.weight", torch_default_init(rng, in_features, (in_features, n_classes)), dtype)
        self.params.add("plain.bias", torch_default_init(rng, in_features, (n_classes,)), dtype)

    def __call__(self, X: ad.Tensor, C=None) -> ad.Tensor:
        return ad.linear(X, self.params["plain.weight"], self.params["plain.bias"])


def plain_head_forward(X, head: PlainHead) -> ad.Tensor:
    X = ad.as_tensor(X)
    if X.data.ndim == 1:
        return head(ad.reshape(X, (1, -1)))[0]
    return head(X)
