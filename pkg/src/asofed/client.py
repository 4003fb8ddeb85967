"""Local client procedures.

The ASO-Fed client trains on the visible prefix of its stream against a
surrogate objective ``f_k(w_k) + lam/2 ||w_k - w||^2``, corrects each step
with decay-balanced gradient memory and scales its step by a multiplier
derived from its own past round durations.  The FedAvg, FedProx and
FedAsync local rules reuse the same epoch loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import ClientShard
from .models import ModelSpec, ParamSet, loss_and_grad

ALGORITHMS = ("asofed", "fedavg", "fedprox", "fedasync")
BALANCE_ORDERS = ("alg2", "eq9")


class NumericDivergenceError(FloatingPointError):
    """A local update produced a non-finite parameter."""


@dataclass(eq=False)
class ClientState:
    id: int
    w_k: ParamSet
    h_k: ParamSet
    v_k: ParamSet
    grad_s_prev: ParamSet
    rng: np.random.Generator = field(repr=False)
    n_visible: int = 0
    delay_history: list[float] = field(default_factory=list)
    r_multiplier: float = 1.0
    base_lr: float = 0.001
    lam: float = 1.0
    beta: float = 0.001
    local_epochs: int = 2
    batch_size: int = 32
    dynamic_lr: bool = True
    balance: bool = True
    balance_order: str = "alg2"
    last_loss: float = float("nan")
    rounds: int = 0

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.balance_order not in BALANCE_ORDERS:
            raise ValueError(f"balance_order must be one of {BALANCE_ORDERS}")
        for buf in (self.h_k, self.v_k, self.grad_s_prev):
            self.w_k.check_compatible(buf)


def new_client(client_id: int, template: ParamSet, seed, **hyper) -> ClientState:
    """Fresh state: ``w_k`` copies ``template``, all accumulators zero."""
    return ClientState(
        id=client_id,
        w_k=template.copy(),
        h_k=template.zeros_like(),
        v_k=template.zeros_like(),
        grad_s_prev=template.zeros_like(),
        rng=np.random.default_rng(seed),
        **hyper,
    )


def surrogate_grad(state: ClientState, spec: ModelSpec, w_server: ParamSet, X, y) -> ParamSet:
    """Gradient of the surrogate objective at ``state.w_k``."""
    state.w_k.check_compatible(w_server)
    g = loss_and_grad(spec, state.w_k, X, y).grad
    g.flat[:] += state.lam * (state.w_k.flat - w_server.flat)
    return g


def balanced_grad(state: ClientState, grad_s: ParamSet) -> ParamSet:
    """``grad_s - grad_s_prev + h_pre`` where ``h_pre`` is ``h_k`` as it
    stands at the start of the round.  Pure; see ``finish_round``."""
    state.w_k.check_compatible(grad_s)
    return ParamSet(grad_s.flat - state.grad_s_prev.flat + state.h_k.flat,
                    grad_s.shape_signature, grad_s.first_layer_index)


def finish_round(state: ClientState, grad_s: ParamSet) -> None:
    """Roll the accumulators forward after a round.

    ``alg2``: ``h <- beta h + (1 - beta) v`` then ``v <- grad_s``.
    ``eq9`` already folded ``v`` into ``h`` before the round started.
    """
    if state.balance_order == "alg2":
        kernels.ema_update(state.h_k.flat, state.v_k.flat, state.beta)
    state.v_k.flat[:] = grad_s.flat
    state.grad_s_prev.flat[:] = grad_s.flat


def update_multiplier(state: ClientState, round_duration: float) -> float:
    """Record a round duration and return ``max(1, ln(mean duration))``."""
    if not round_duration > 0:
        raise ValueError(f"round duration must be > 0, got {round_duration}")
    state.delay_history.append(float(round_duration))
    if state.dynamic_lr:
        mean = math.fsum(state.delay_history) / len(state.delay_history)
        state.r_multiplier = max(1.0, math.log(mean))
    else:
        state.r_multiplier = 1.0
    return state.r_multiplier


def _batches(state: ClientState, n: int):
    b = state.batch_size if state.batch_size > 0 else n
    for _ in range(state.local_epochs):
        perm = state.rng.permutation(n)
        for i in range(0, n, b):
            yield perm[i:i + b]


def _epochs(state, spec, X, y, w_server, lam, step, s_prev, h_pre, plain):
    """Run ``local_epochs`` of mini-batch steps on ``state.w_k`` in place.

    Returns the surrogate gradient of the first step (taken at the
    received model) and the mean mini-batch loss.
    """
    w = state.w_k
    grad = w.zeros_like()
    grad_s = np.empty_like(w.flat)
    first = None
    losses = []
    for idx in _batches(state, len(y)):
        res = loss_and_grad(spec, w, X[idx], y[idx], out=grad)
        losses.append(res.loss)
        if plain:
            kernels.sgd_step(w.flat, grad.flat, step)
        else:
            kernels.asofed_step(w.flat, w_server.flat, grad.flat, s_prev, h_pre,
                                lam, step, grad_s)
        if first is None:
            first = (grad.flat if plain else grad_s).copy()
    if not w.is_finite():
        raise NumericDivergenceError(f"client {state.id}: non-finite parameters after local update")
    state.last_loss = float(np.mean(losses))
    state.rounds += 1
    return ParamSet(first, w.shape_signature, w.first_layer_index)


def local_step(state: ClientState, spec: ModelSpec, w_server: ParamSet,
               shard: ClientShard) -> ParamSet | None:
    """One ASO-Fed client round; returns the model to upload, or ``None``
    when there is no visible data (the round is skipped)."""
    state.w_k.check_compatible(w_server)
    if shard.visible_count == 0:
        return None
    X, y = shard.visible()
    state.n_visible = shard.visible_count
    state.w_k.flat[:] = w_server.flat
    if state.balance:
        if state.balance_order == "eq9":
            kernels.ema_update(state.h_k.flat, state.grad_s_prev.flat, state.beta)
        h_pre = state.h_k.flat.copy()
        s_prev = state.grad_s_prev.flat.copy()
    else:
        h_pre = np.zeros_like(state.w_k.flat)
        s_prev = h_pre
    step = state.r_multiplier * state.base_lr
    first = _epochs(state, spec, X, y, w_server, state.lam, step, s_prev, h_pre, plain=False)
    if state.balance:
        finish_round(state, first)
    return state.w_k.copy()


def local_step_fedavg(state: ClientState, spec: ModelSpec, w_server: ParamSet,
                      shard: ClientShard) -> ParamSet | None:
    """E epochs of plain SGD on ``f_k`` at the fixed base rate."""
    state.w_k.check_compatible(w_server)
    if shard.visible_count == 0:
        return None
    X, y = shard.visible()
    state.n_visible = shard.visible_count
    state.w_k.flat[:] = w_server.flat
    _epochs(state, spec, X, y, w_server, 0.0, state.base_lr, None, None, plain=True)
    return state.w_k.copy()


def local_step_proximal(state: ClientState, spec: ModelSpec, w_server: ParamSet,
                        shard: ClientShard, mu: float) -> ParamSet | None:
    """SGD on ``f_k + mu/2 ||w_k - w||^2`` without gradient balancing.

    FedProx uses ``mu = lam``; FedAsync uses its own ``rho``.
    """
    state.w_k.check_compatible(w_server)
    if shard.visible_count == 0:
        return None
    X, y = shard.visible()
    state.n_visible = shard.visible_count
    state.w_k.flat[:] = w_server.flat
    zeros = np.zeros_like(state.w_k.flat)
    _epochs(state, spec, X, y, w_server, mu, state.base_lr, zeros, zeros, plain=False)
    return state.w_k.copy()
