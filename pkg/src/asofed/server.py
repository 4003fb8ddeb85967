"""Central-server aggregation rules.

``aggregate_async`` folds one client's update into the central model in
proportion to the client's share of all currently visible samples;
``reweight_first_layer`` then rescales the first layer by a softmax over
entry magnitudes.  Synchronous FedAvg averaging and the FedAsync mixing
rule are the baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .models import ParamSet

STRATEGIES = ("asofed", "fedavg", "fedasync")


class AggregationError(ValueError):
    pass


@dataclass(eq=False)
class ServerState:
    w: ParamSet
    n_clients: int
    t: int = 0
    sample_registry: dict[int, int] = field(default_factory=dict)
    strategy: str = "asofed"
    fedasync_alpha: float = 0.6
    fedasync_a: float = 0.5
    # client id -> the exact model last dispatched to it
    dispatched: dict[int, ParamSet] = field(default_factory=dict, repr=False)

    @property
    def N_total(self) -> int:
        return sum(self.sample_registry.values())

    def register(self, client_id: int, n_samples: int) -> None:
        self._check_client(client_id)
        self.sample_registry[client_id] = int(n_samples)

    def dispatch(self, client_id: int) -> ParamSet:
        """Snapshot of the central model handed to ``client_id``."""
        self._check_client(client_id)
        snap = self.w.copy()
        self.dispatched[client_id] = snap
        return snap

    def _check_client(self, client_id):
        if not 0 <= client_id < self.n_clients:
            raise AggregationError(f"unknown client id {client_id}")


def aggregate_async(server: ServerState, client_id: int, w_k_new: ParamSet,
                    w_k_sent: ParamSet | None = None, n_k_now: int = 0) -> ParamSet:
    """``w <- w - (n'_k / N') (w_k_sent - w_k_new)``; ``t += 1``.

    ``w_k_sent`` defaults to the model the server last dispatched to the
    client.  Re-weighting is applied separately.
    """
    server._check_client(client_id)
    if n_k_now <= 0:
        raise AggregationError(f"client {client_id} reported {n_k_now} samples; update rejected")
    if w_k_sent is None:
        if client_id not in server.dispatched:
            raise AggregationError(f"no model was dispatched to client {client_id}")
        w_k_sent = server.dispatched[client_id]
    server.w.check_compatible(w_k_new)
    server.w.check_compatible(w_k_sent)
    server.register(client_id, n_k_now)
    frac = n_k_now / server.N_total
    kernels.async_merge(server.w.flat, w_k_sent.flat, w_k_new.flat, frac)
    server.t += 1
    return server.w


REWEIGHT_SCALES = {"none": 0, "mean": 1, "norm": 2}


def reweight_first_layer(w: ParamSet, axis: str = "row", scale: str = "none") -> ParamSet:
    """Softmax re-weighting of the first layer, in place.

    ``alpha[i, j] = exp|w[i, j]| / sum_j exp|w[i, j]|`` and
    ``w[i, j] <- alpha[i, j] * w[i, j]``.  ``axis="column"`` normalizes
    over rows instead.

    ``scale`` post-processes each normalized slice: ``"none"`` applies the
    coefficients as they are (every entry shrinks), ``"mean"`` multiplies
    them by the slice length so they average 1, and ``"norm"`` restores the
    slice's L2 norm so only the direction is re-weighted.
    """
    if axis not in ("row", "column"):
        raise ValueError(f"axis must be 'row' or 'column', got {axis!r}")
    if scale not in REWEIGHT_SCALES:
        raise ValueError(f"scale must be one of {tuple(REWEIGHT_SCALES)}, got {scale!r}")
    kernels.reweight(w.first_layer, 1 if axis == "row" else 0, REWEIGHT_SCALES[scale])
    return w


def reweight_coefficients(mat: np.ndarray, axis: str = "row") -> np.ndarray:
    """The softmax coefficients alone (for inspection and tests)."""
    ax = 1 if axis == "row" else 0
    a = np.abs(mat)
    a = np.exp(a - a.max(axis=ax, keepdims=True))
    return a / a.sum(axis=ax, keepdims=True)


def aggregate_sync_fedavg(server: ServerState, updates) -> ParamSet:
    """Sample-weighted mean of ``(client_id, w_k_new, n_k)`` updates."""
    updates = list(updates)
    if not updates:
        raise AggregationError("empty update list")
    total = 0
    acc = np.zeros_like(server.w.flat)
    for cid, w_new, n in updates:
        server.w.check_compatible(w_new)
        if n <= 0:
            raise AggregationError(f"client {cid} reported {n} samples")
        server.register(cid, n)
        acc += n * w_new.flat
        total += n
    server.w.flat[:] = acc / total
    server.t += 1
    return server.w


def subset_size(fraction: float, n_clients: int) -> int:
    """``ceil(C * K)``, at least one."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return max(1, math.ceil(fraction * n_clients - 1e-9))


def fedasync_weight(alpha: float, staleness: int, a: float) -> float:
    return alpha * (staleness + 1) ** (-a)


def aggregate_fedasync(server: ServerState, w_k_new: ParamSet, staleness: int) -> ParamSet:
    """``w <- (1 - alpha_t) w + alpha_t w_k_new`` with polynomial staleness decay."""
    if staleness < 0:
        raise AggregationError(f"negative staleness {staleness}")
    server.w.check_compatible(w_k_new)
    kernels.mix(server.w.flat, w_k_new.flat,
                fedasync_weight(server.fedasync_alpha, staleness, server.fedasync_a))
    server.t += 1
    return server.w
