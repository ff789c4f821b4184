"""Control parameterization: a free period-0 control plus one network per later period."""
from __future__ import annotations

import hashlib
import struct
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Network, Tensor
from .errors import ConfigurationError, ContractError, DimensionError, UsageError

__all__ = [
    "Head", "IdentityHead", "SigmoidBoxHead", "GroupedSoftmaxHead",
    "PolicyNetwork", "PolicyStack", "evaluate", "clone_period", "restore_period",
    "default_hidden",
]


class Head:
    """Maps raw network outputs (B, n_c) onto the feasible control set."""

    def __call__(self, raw: Tensor, state: Tensor) -> Tensor:
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__


class IdentityHead(Head):
    def __call__(self, raw, state):
        return raw

    def describe(self):
        return "unconstrained"


class SigmoidBoxHead(Head):
    """``lower + (upper - lower) * sigmoid(raw)`` coordinatewise.

    The box passed here should already sit strictly inside the true
    constraint set; saturation of the sigmoid then lands on the box edge,
    never on the constraint boundary.
    """

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if np.any(self.upper <= self.lower):
            raise ConfigurationError("sigmoid box needs upper > lower")
        self.width = self.upper - self.lower

    def __call__(self, raw, state):
        return ad.sigmoid(raw) * self.width + self.lower

    def describe(self):
        return f"sigmoid-box[{self.lower.tolist()}, {self.upper.tolist()}]"


class GroupedSoftmaxHead(Head):
    """Grouped softmax whose per-group scales may depend on the state.

    ``scale_fn(state) -> Tensor (B, G)``; constant scales may be given as an
    array instead.
    """

    def __init__(self, groups: Sequence[Sequence[int]], scale_fn: Callable | np.ndarray):
        width = sum(len(g) for g in groups)
        self.groups = ad._check_groups(groups, width)
        self.width = width
        if callable(scale_fn):
            self.scale_fn = scale_fn
        else:
            const = np.asarray(scale_fn, dtype=float)
            self.scale_fn = lambda state: Tensor(const)

    def __call__(self, raw, state):
        return ad.grouped_softmax(raw, self.groups, self.scale_fn(state))

    def describe(self):
        return f"grouped-softmax[{len(self.groups)} groups]"


def default_hidden(n_s: int) -> list[int]:
    w = max(32, 4 * n_s)
    return [w, w]


def _identity_features(t, s):
    return s


class PolicyNetwork:
    """Policy for a single period ``t >= 1``: ``head(net(features(s)))``."""

    def __init__(self, t: int, net: Network, head: Head, features: Callable = _identity_features):
        self.t = t
        self.net = net
        self.head = head
        self.features = features

    def __call__(self, s: Tensor) -> Tensor:
        return self.head(self.net(self.features(self.t, s)), s)


class PolicyStack:
    """The full control parameter ``(c0, theta_1, ..., theta_{T-1})``.

    ``c0`` is stored as raw pre-head values and passes through ``head0``.
    """

    def __init__(self, c0, networks: Sequence[PolicyNetwork], head0: Head | None = None):
        self.c0 = c0 if isinstance(c0, Tensor) else Tensor(np.asarray(c0, dtype=float).copy())
        if self.c0.data.ndim != 1 or not np.all(np.isfinite(self.c0.data)):
            raise ContractError("c0 must be a finite vector")
        self.networks = list(networks)
        for i, pn in enumerate(self.networks):
            if pn.t != i + 1:
                raise ContractError(f"network {i} is tagged with period {pn.t}, expected {i + 1}")
        self.head0 = head0 if head0 is not None else IdentityHead()

    @property
    def T(self) -> int:
        return len(self.networks) + 1

    @classmethod
    def initialize(cls, problem, rng: np.random.Generator | int = 0, hidden: Sequence[int] | None = None,
                   hidden_activation: str = "relu") -> "PolicyStack":
        """Random stack for ``problem``: Glorot weights, zero biases, ``problem.c0_init`` raw c0."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        hidden = list(hidden if hidden is not None else (problem.hidden or default_hidden(problem.n_s)))
        nets = []
        for t in range(1, problem.T):
            net = Network.mlp([problem.n_features] + hidden + [problem.n_c], rng, hidden_activation)
            nets.append(PolicyNetwork(t, net, problem.head, problem.features))
        c0 = problem.c0_init if problem.c0_init is not None else np.zeros(problem.n_c0)
        return cls(np.array(c0, dtype=float), nets, problem.head0)

    def control(self, t: int, s: Tensor) -> Tensor:
        return evaluate(self, t, s)

    def period_parameters(self, t: int) -> list[Tensor]:
        self._check_t(t)
        return [self.c0] if t == 0 else self.networks[t - 1].net.parameters()

    def _check_t(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise ContractError(f"period {t} outside 0..{self.T - 1}")

    @contextmanager
    def trainable(self, t: int):
        """Mark only period ``t``'s parameters as requiring gradients."""
        params = self.period_parameters(t)
        for p in params:
            p.requires_grad = True
        try:
            yield params
        finally:
            for p in params:
                p.requires_grad = False

    # serialization ------------------------------------------------------------
    def to_bytes(self) -> bytes:
        """``b"MMCS"``, u32 network count, u32 len(c0), c0 f64s, then per network u64 length + snapshot."""
        parts = [b"MMCS", struct.pack("<II", len(self.networks), self.c0.data.size),
                 np.ascontiguousarray(self.c0.data, dtype="<f8").tobytes()]
        for pn in self.networks:
            blob = ad.dump_snapshot(pn.net)
            parts.append(struct.pack("<Q", len(blob)))
            parts.append(blob)
        return b"".join(parts)

    def load_bytes(self, blob: bytes) -> None:
        """Load parameters saved by :meth:`to_bytes` into this (same-architecture) stack."""
        if blob[:4] != b"MMCS":
            raise UsageError("not an MMCC policy stack")
        n_net, n_c0 = struct.unpack_from("<II", blob, 4)
        if n_net != len(self.networks) or n_c0 != self.c0.data.size:
            raise DimensionError("stored stack does not match this architecture")
        pos = 12
        self.c0.data = np.frombuffer(blob, dtype="<f8", count=n_c0, offset=pos).astype(np.float64)
        pos += 8 * n_c0
        for pn in self.networks:
            (n,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            loaded = ad.load_snapshot(blob[pos:pos + n])
            pos += n
            if loaded.widths != pn.net.widths:
                raise DimensionError(f"stored widths {loaded.widths} != {pn.net.widths} at period {pn.t}")
            pn.net.set_vector(loaded.get_vector())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def evaluate(stack: PolicyStack, t: int, s) -> Tensor:
    """Control at period ``t`` for states ``s`` (B, n_s).

    For ``t == 0`` the stored c0 is broadcast over the batch; the state is
    only consulted by heads with state-dependent scales.
    """
    stack._check_t(t)
    s = s if isinstance(s, Tensor) else Tensor(s)
    if t == 0:
        if s.data.ndim == 1:
            return stack.head0(ad.reshape(stack.c0, (1, -1)), ad.reshape(s, (1, -1)))[0]
        raw = Tensor(np.ones((s.data.shape[0], 1))) * stack.c0
        return stack.head0(raw, s)
    if s.data.ndim == 1:
        return evaluate(stack, t, ad.reshape(s, (1, -1)))[0]
    return stack.networks[t - 1](s)


def clone_period(stack: PolicyStack, t: int) -> np.ndarray:
    stack._check_t(t)
    if t == 0:
        return stack.c0.data.copy()
    return stack.networks[t - 1].net.get_vector()


def restore_period(stack: PolicyStack, t: int, vector: np.ndarray) -> None:
    stack._check_t(t)
    vector = np.asarray(vector, dtype=np.float64)
    if t == 0:
        if vector.shape != stack.c0.data.shape:
            raise ContractError(f"c0 vector must have length {stack.c0.data.size}, got {vector.size}")
        stack.c0.data = vector.copy()
        return
    net = stack.networks[t - 1].net
    if vector.shape != (net.size,):
        raise ContractError(f"period {t} needs {net.size} parameters, got {vector.size}")
    net.set_vector(vector)
