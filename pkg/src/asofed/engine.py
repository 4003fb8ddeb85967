"""Deterministic discrete-event simulation of a federation.

Simulated time only: client compute and network delays are drawn from
per-client delay models, events are ordered by ``(time, seq)`` and every
random stream is derived from the run seed, so a run is a pure function of
its configuration.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import client as cl
from . import data as dt
from .config import RunConfig
from .metrics import RunRecord, classification_metrics, regression_metrics
from .models import ModelSpec, ParamSet, init_params, predict
from .server import (ServerState, aggregate_async, aggregate_fedasync,
                     aggregate_sync_fedavg, reweight_first_layer, subset_size)

log = logging.getLogger(__name__)

EVENT_KINDS = ("dispatch", "client-finish", "update-arrive", "data-tick", "dropout-on", "dropout-off")


class SimulationError(RuntimeError):
    """Terminal run failure (numeric divergence) with the offending iteration."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (global iteration {iteration})")
        self.iteration = iteration


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    client_id: int = field(compare=False, default=-1)
    payload: object = field(compare=False, default=None, repr=False)


@dataclass
class DelayModel:
    base_delay: float
    jitter: float = 0.0
    compute_time_per_sample: float = 0.0


def sample_delay(model: DelayModel, n_samples: int, rng: np.random.Generator) -> float:
    """``base * U(1 - jitter, 1 + jitter) + compute_per_sample * n``."""
    d = (model.base_delay * rng.uniform(1.0 - model.jitter, 1.0 + model.jitter)
         + model.compute_time_per_sample * n_samples)
    if not d > 0:
        raise ValueError(f"non-positive delay {d} from {model}")
    return d


@dataclass
class DropoutPlan:
    permanent_fraction: float = 0.0
    periodic_rate: float = 0.0
    silent: frozenset = frozenset()

    def __post_init__(self):
        for name in ("permanent_fraction", "periodic_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def assign(self, n_clients: int, rng: np.random.Generator) -> DropoutPlan:
        """Fix the permanently silent set: ``round(fraction * K)`` clients."""
        n_silent = int(round(self.permanent_fraction * n_clients))
        silent = rng.choice(n_clients, size=n_silent, replace=False) if n_silent else []
        return DropoutPlan(self.permanent_fraction, self.periodic_rate,
                           frozenset(int(k) for k in silent))


def apply_dropout(plan: DropoutPlan, client_id: int, t: int, rng: np.random.Generator) -> bool:
    """True when ``client_id`` takes part in iteration ``t``.

    ``t`` is informational; periodic decisions are independent draws.
    """
    if client_id in plan.silent:
        return False
    return not (plan.periodic_rate > 0 and rng.random() < plan.periodic_rate)


@dataclass
class Federation:
    spec: ModelSpec
    shards: list[dt.ClientShard]
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def task(self):
        return self.spec.task


def build_federation(cfg: RunConfig) -> Federation:
    """Data shards and model spec for a run; depends on ``data.seed`` and ``seed``."""
    d = cfg.data
    rng = np.random.default_rng([d.seed, cfg.seed])
    shard_kw = dict(initial_fraction=(d.initial_fraction_min, d.initial_fraction_max),
                    growth=(d.growth_min, d.growth_max), train_rate=d.train_rate)
    if d.source == "synthetic-regression":
        shards = dt.synth_quadratic(d.dim, d.n_clients, d.dissimilarity, rng,
                                    samples_per_client=d.samples_per_client, size_skew=0.5,
                                    initial_fraction=shard_kw["initial_fraction"],
                                    growth=shard_kw["growth"])
        if d.train_rate < 1:
            shards = [dt.make_shard(s.X, s.y, rng, optimum=s.optimum, **shard_kw) for s in shards]
        n_out, task = 1, "regression"
    else:
        if d.source == "fashion-mnist":
            paths = dt.find_fashion_mnist(d.path or None)
            if paths is None:
                raise FileNotFoundError("Fashion-MNIST IDX files not found")
            ds = dt.load_idx(*paths)
            X, y = ds.features, ds.labels
        else:
            X, y = dt.synth_classification(d.n_classes, d.dim, d.samples_per_class, rng,
                                           separation=d.separation)
        plan = dt.partition_noniid(y, rng, n_clients=d.n_clients, shard_ratio=d.shard_ratio,
                                   shards_per_client=d.shards_per_client)
        shards = [dt.make_shard(X[idx], y[idx], rng, **shard_kw) for idx in plan.client_indices]
        n_out, task = int(y.max()) + 1, "classification"
    spec = ModelSpec(cfg.model.family, shards[0].X.shape[1], n_out,
                     cfg.model.hidden_dim if cfg.model.family == "mlp-1hidden" else 0, task)
    X_test = np.concatenate([s.X[s.test_idx] for s in shards])
    y_test = np.concatenate([s.y[s.test_idx] for s in shards])
    return Federation(spec, shards, X_test, y_test)


def evaluate(fed: Federation, w: ParamSet) -> dict[str, float]:
    """Test metrics over every client's test split, dropouts included."""
    preds = predict(fed.spec, w, fed.X_test)
    if fed.task == "regression":
        mae, smape = regression_metrics(preds, fed.y_test)
        return {"mae": mae, "smape": smape}
    return classification_metrics(preds, fed.y_test, fed.spec.output_dim)


class Simulation:
    def __init__(self, cfg: RunConfig, federation: Federation | None = None):
        self.cfg = cfg
        self.fed = federation or build_federation(cfg)
        self.strategy = cfg.strategy
        K = len(self.fed.shards)
        ss = np.random.SeedSequence([cfg.seed, 0xA50FED])
        init_ss, delay_ss, drop_ss, sel_ss, client_ss = ss.spawn(5)
        self.rng_delay = np.random.default_rng(delay_ss)
        self.rng_drop = np.random.default_rng(drop_ss)
        self.rng_select = np.random.default_rng(sel_ss)
        w0 = init_params(self.fed.spec, np.random.default_rng(init_ss))
        s, c = cfg.sim, cfg.client
        self.server = ServerState(w0, K, strategy=self.strategy,
                                  fedasync_alpha=cfg.server.fedasync_alpha,
                                  fedasync_a=cfg.server.fedasync_a)
        hyper = dict(base_lr=c.base_lr, lam=c.lam, beta=c.beta, local_epochs=c.epochs,
                     batch_size=c.batch_size, dynamic_lr=c.dynamic_lr, balance=c.balance,
                     balance_order=c.balance_order)
        self.clients = [cl.new_client(k, w0, css, **hyper)
                        for k, css in enumerate(client_ss.spawn(K))]
        bases = self.rng_delay.uniform(s.delay_min, s.delay_max, size=K)
        self.delays = [DelayModel(float(b), s.jitter, s.compute_per_sample) for b in bases]
        self.dropout = DropoutPlan(s.permanent_dropout, s.periodic_dropout).assign(K, self.rng_drop)
        self.shards = list(self.fed.shards)
        self.records: list[RunRecord] = []
        self.now = 0.0
        self.events_processed = 0
        self._queue: list[Event] = []
        self._seq = itertools.count()

    # -- helpers ---------------------------------------------------------
    def schedule(self, time, kind, client_id=-1, payload=None):
        heapq.heappush(self._queue, Event(time, next(self._seq), kind, client_id, payload))

    def _local(self, k: int, w_sent: ParamSet) -> ParamSet | None:
        state, shard, spec = self.clients[k], self.shards[k], self.fed.spec
        alg = self.cfg.client.algorithm
        try:
            if alg == "asofed":
                return cl.local_step(state, spec, w_sent, shard)
            if alg == "fedavg":
                return cl.local_step_fedavg(state, spec, w_sent, shard)
            if alg == "fedprox":
                return cl.local_step_proximal(state, spec, w_sent, shard, state.lam)
            return cl.local_step_proximal(state, spec, w_sent, shard, self.cfg.client.fedasync_rho)
        except cl.NumericDivergenceError as e:
            raise SimulationError(str(e), self.server.t + 1) from e

    def _record(self, train_loss: float, force=False):
        t = self.server.t
        if not force and t % self.cfg.sim.eval_every:
            return
        if self.records and self.records[-1].global_iter == t:
            return
        if not self.server.w.is_finite():
            raise SimulationError("non-finite central model", t)
        self.records.append(RunRecord(
            sim_time=float(self.now), global_iter=t,
            train_loss=float(train_loss) if math.isfinite(train_loss) else 0.0,
            test_metric=evaluate(self.fed, self.server.w),
            strategy=self.cfg.label, seed=self.cfg.seed))

    def _advance(self, k: int):
        self.shards[k] = dt.advance_stream(self.shards[k])

    def _data_tick(self):
        for k in range(len(self.shards)):
            self._advance(k)

    def _done(self) -> bool:
        return self.server.t >= self.cfg.sim.max_iter

    # -- asynchronous strategies ----------------------------------------
    def _dispatch(self, k: int):
        if not apply_dropout(self.dropout, k, self.server.t, self.rng_drop):
            # sits this round out; comes back after one round's worth of time
            back = self.now + sample_delay(self.delays[k], 0, self.rng_delay)
            self.schedule(self.now, "dropout-on", k)
            self.schedule(back, "dropout-off", k)
            return
        shard = self.shards[k]
        self.server.register(k, shard.visible_count)
        w_sent = self.server.dispatch(k)
        w_new = self._local(k, w_sent)
        if w_new is None:
            return
        n = shard.visible_count
        compute = self.delays[k].compute_time_per_sample * n
        total = sample_delay(self.delays[k], n, self.rng_delay)
        info = {"w_new": w_new, "w_sent": w_sent, "t_sent": self.server.t,
                "time_sent": self.now, "n": n, "loss": self.clients[k].last_loss}
        self.schedule(self.now + compute, "client-finish", k)
        self.schedule(self.now + total, "update-arrive", k, info)

    def _arrive(self, k: int, info: dict):
        state = self.clients[k]
        cl.update_multiplier(state, self.now - info["time_sent"])
        if self.strategy == "asofed":
            base = info["w_sent"] if self.cfg.server.delta_base == "dispatched" else self.server.w.copy()
            aggregate_async(self.server, k, info["w_new"], base, info["n"])
            if self.cfg.server.feature_reweight:
                reweight_first_layer(self.server.w, self.cfg.server.reweight_axis,
                                     self.cfg.server.reweight_scale)
        else:
            self.server.register(k, info["n"])
            aggregate_fedasync(self.server, info["w_new"], self.server.t - info["t_sent"])
        self._record(info["loss"])
        self._advance(k)

    def _run_async(self):
        for k in range(len(self.clients)):
            if k not in self.dropout.silent:
                self.schedule(0.0, "dispatch", k)
        if self.cfg.sim.data_tick > 0:
            self.schedule(self.cfg.sim.data_tick, "data-tick")
        last_loss = float("nan")
        while self._queue and not self._done():
            if self._queue[0].time > self.cfg.sim.max_time:
                break
            ev = heapq.heappop(self._queue)
            if ev.time < self.now:
                raise AssertionError("simulated clock went backwards")
            self.now = ev.time
            self.events_processed += 1
            if ev.kind in ("dispatch", "dropout-off"):
                self._dispatch(ev.client_id)
            elif ev.kind == "update-arrive":
                self._arrive(ev.client_id, ev.payload)
                last_loss = ev.payload["loss"]
                if not self._done():
                    self.schedule(self.now, "dispatch", ev.client_id)
            elif ev.kind == "data-tick":
                self._data_tick()
                self.schedule(self.now + self.cfg.sim.data_tick, "data-tick")
        if self.server.t:
            self._record(last_loss, force=True)

    # -- synchronous strategies -----------------------------------------
    def _run_sync(self):
        K = len(self.clients)
        m = subset_size(self.cfg.server.fraction, K)
        next_tick = self.cfg.sim.data_tick or math.inf
        last_loss = float("nan")
        while not self._done():
            live = [k for k in range(K)
                    if apply_dropout(self.dropout, k, self.server.t, self.rng_drop)]
            if not live:
                # nobody answers this round; wait the shortest base delay
                self.now += self.cfg.sim.delay_min
                if self.now > self.cfg.sim.max_time:
                    break
                continue
            members = sorted(int(k) for k in self.rng_select.choice(
                live, size=min(m, len(live)), replace=False))
            w_sent = self.server.w.copy()
            updates, durations, losses = [], [], []
            for k in members:
                n = self.shards[k].visible_count
                w_new = self._local(k, w_sent)
                durations.append(sample_delay(self.delays[k], n, self.rng_delay))
                if w_new is not None:
                    updates.append((k, w_new, n))
                    losses.append(self.clients[k].last_loss * n)
            end = self.now + max(durations)  # the round waits for its slowest member
            if end > self.cfg.sim.max_time:
                break
            while next_tick <= end:
                self.now = next_tick
                self._data_tick()
                next_tick += self.cfg.sim.data_tick
            self.now = end
            self.events_processed += 1
            if updates:
                aggregate_sync_fedavg(self.server, updates)
                last_loss = sum(losses) / sum(n for _, _, n in updates)
                self._record(last_loss)
            for k in members:
                self._advance(k)
        if self.server.t:
            self._record(last_loss, force=True)

    def run(self) -> list[RunRecord]:
        if self.strategy == "fedavg":
            self._run_sync()
        else:
            self._run_async()
        return self.records


def run(cfg: RunConfig, federation: Federation | None = None) -> list[RunRecord]:
    return Simulation(cfg, federation).run()
