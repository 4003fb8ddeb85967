"""Numerical checks of the convergence analysis on synthetic objectives.

A probe federation is a list of client objectives ``f_k`` with sample
counts ``n_k``; the central objective is ``F = sum_k (n_k / N) f_k``.
Trajectories use the real server aggregation: each global iteration one
client, drawn uniformly, receives the current model, takes a single full
gradient step and is folded in with weight ``n_k / N``.  Feature
re-weighting is never applied here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import data as dt
from .models import ParamSet
from .server import ServerState, aggregate_async


class UndefinedDissimilarityError(ValueError):
    """Every probe point has a vanishing central gradient."""


class PreconditionError(ValueError):
    """A theorem's hypotheses do not hold, so the probe will not certify."""


# --- objectives -----------------------------------------------------------

@dataclass
class Quadratic:
    """``f(w) = 1/2 w'Aw - b'w + c``."""
    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def value(self, w):
        return float(0.5 * w @ self.A @ w - self.b @ w + self.c)

    def grad(self, w):
        return self.A @ w - self.b

    @classmethod
    def least_squares(cls, X, y):
        """``1/(2n) ||Xw - y||^2``."""
        n = len(y)
        return cls(X.T @ X / n, X.T @ y / n, float(y @ y) / (2 * n))


@dataclass
class DoubleWell:
    """``scale * 1/4 sum_i (w_i^2 - 1)^2``: non-convex, minimum 0 at w = +-1."""
    scale: float = 1.0

    def value(self, w):
        return float(self.scale * 0.25 * np.sum((w * w - 1.0) ** 2))

    def grad(self, w):
        return self.scale * w * (w * w - 1.0)


@dataclass
class Federation:
    clients: list
    sizes: np.ndarray

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        if len(self.clients) != len(self.sizes) or len(self.clients) == 0:
            raise ValueError("need one positive size per client")
        if (self.sizes <= 0).any():
            raise ValueError("client sizes must be positive")

    @property
    def weights(self):
        return self.sizes / self.sizes.sum()

    def value(self, w):
        return float(sum(p * f.value(w) for p, f in zip(self.weights, self.clients)))

    def grad(self, w):
        return sum(p * f.grad(w) for p, f in zip(self.weights, self.clients))

    def client_grads(self, w):
        return np.stack([f.grad(w) for f in self.clients])


def central_quadratic(fed: Federation) -> Quadratic:
    """Closed form of ``F`` when every client is quadratic."""
    p = fed.weights
    return Quadratic(sum(pk * f.A for pk, f in zip(p, fed.clients)),
                     sum(pk * f.b for pk, f in zip(p, fed.clients)),
                     float(sum(pk * f.c for pk, f in zip(p, fed.clients))))


def curvature(A) -> tuple[float, float]:
    """(mu, L) of a quadratic with Hessian ``A``."""
    ev = np.linalg.eigvalsh(0.5 * (A + A.T))
    return float(ev[0]), float(ev[-1])


def random_quadratic(dim: int, rng, *, mu=None, L=None):
    """Random SPD quadratic with a random minimizer; returns (Quadratic, w*, F*)."""
    rng = np.random.default_rng(rng)
    mu = rng.uniform(0.1, 1.0) if mu is None else mu
    L = mu * rng.uniform(1.0, 20.0) if L is None else L
    Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    ev = np.concatenate([[mu, L], rng.uniform(mu, L, size=max(dim - 2, 0))])[:dim]
    A = (Q * ev) @ Q.T
    A = 0.5 * (A + A.T)
    w_star = rng.normal(size=dim)
    F_star = float(rng.normal())
    b = A @ w_star
    c = F_star + 0.5 * w_star @ A @ w_star
    return Quadratic(A, b, c), w_star, F_star


def quadratic_federation(dim, n_clients, dissimilarity, seed, *, samples_per_client=200,
                         noise=0.0, size_skew=0.0) -> Federation:
    """Least-squares clients from the synthetic regression generator."""
    shards = dt.synth_quadratic(dim, n_clients, dissimilarity, seed,
                                samples_per_client=samples_per_client, noise=noise,
                                size_skew=size_skew)
    return Federation([Quadratic.least_squares(s.X, s.y) for s in shards],
                      [len(s.y) for s in shards])


def double_well_federation(n_clients, spread, seed) -> Federation:
    """Clients ``c_k * W`` with ``mean(c) == 1``, so ``F = W`` and V^2 = mean(c^2)."""
    rng = np.random.default_rng(seed)
    c = 1.0 + spread * rng.uniform(-1.0, 1.0, size=n_clients)
    c = np.clip(c, 0.05, None)
    c /= c.mean()
    return Federation([DoubleWell(float(s)) for s in c], np.full(n_clients, 100))


# --- constants ------------------------------------------------------------

@dataclass
class TheoryProbe:
    mu: float
    L: float
    V_hat: float
    eps_hat: float
    F_star: float
    w_star: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.mu > self.L + 1e-12:
            raise ValueError(f"mu={self.mu} exceeds L={self.L}")


def estimate_V(fed: Federation, points, tol=1e-10) -> float:
    """``max_w sqrt(E_k ||grad f_k(w)||^2 / ||grad F(w)||^2)``, clients uniform."""
    best = -math.inf
    for w in points:
        g = fed.grad(w)
        gg = float(g @ g)
        if gg <= tol ** 2:
            continue
        G = fed.client_grads(w)
        best = max(best, float(np.mean(np.sum(G * G, axis=1))) / gg)
    if best == -math.inf:
        raise UndefinedDissimilarityError("central gradient vanishes at every probe point")
    return math.sqrt(best)


def estimate_eps(fed: Federation, points, tol=1e-10) -> float:
    """``min_w grad F . E_k grad f_k / ||grad F||^2``, clipped to (0, 1]."""
    worst = math.inf
    for w in points:
        g = fed.grad(w)
        gg = float(g @ g)
        if gg <= tol ** 2:
            continue
        worst = min(worst, float(g @ fed.client_grads(w).mean(axis=0)) / gg)
    if worst == math.inf:
        raise UndefinedDissimilarityError("central gradient vanishes at every probe point")
    if worst <= 0:
        raise PreconditionError(f"no positive eps: min alignment {worst:.3g}")
    return min(worst, 1.0)


def check_assumption_norm(fed: Federation, points, tol=1e-9) -> bool:
    """``||E_k grad f_k(w)|| <= ||grad F(w)||`` at every point."""
    return all(np.linalg.norm(fed.client_grads(w).mean(axis=0))
               <= np.linalg.norm(fed.grad(w)) * (1 + tol) + tol for w in points)


# --- Lemma 1 --------------------------------------------------------------

def check_lemma1(F, mu: float, F_star: float, points, tol=1e-9) -> np.ndarray:
    """Per point: ``2 mu (F(w) - F*) <= ||grad F(w)||^2 + tol`` (relative to scale)."""
    if not mu > 0:
        raise PreconditionError(f"needs a strongly convex objective, got mu={mu}")
    out = []
    for w in points:
        g = F.grad(w)
        lhs = 2 * mu * (F.value(w) - F_star)
        rhs = float(g @ g)
        out.append(lhs <= rhs + tol * max(1.0, abs(rhs)))
    return np.array(out, dtype=bool)


# --- trajectories ---------------------------------------------------------

def run_trajectory(fed: Federation, w0, lr: float, steps: int, seed) -> dict:
    """One seeded run of single-step clients through ``aggregate_async``.

    Returns ``F(w^t)`` and ``||grad F(w^t)||^2`` for ``t = 0..steps``.
    """
    rng = np.random.default_rng(seed)
    K = len(fed.clients)
    server = ServerState(ParamSet.from_layers([np.asarray(w0, dtype=np.float64)]), K)
    for k, n in enumerate(fed.sizes):
        server.register(k, int(n))
    values = np.empty(steps + 1)
    sq_grads = np.empty(steps + 1)
    points = np.empty((steps + 1, len(w0)))
    for t in range(steps + 1):
        w = server.w.flat
        g = fed.grad(w)
        values[t], sq_grads[t], points[t] = fed.value(w), float(g @ g), w
        if t == steps:
            break
        k = int(rng.integers(K))
        sent = server.dispatch(k)
        new = ParamSet(sent.flat - lr * fed.clients[k].grad(sent.flat), sent.shape_signature)
        aggregate_async(server, k, new, n_k_now=int(fed.sizes[k]))
        if not server.w.is_finite():
            raise FloatingPointError(f"probe trajectory diverged at step {t + 1}")
    return {"values": values, "sq_grads": sq_grads, "points": points}


def monte_carlo(fed, w0, lr, steps, n_seeds, seed=0):
    runs = [run_trajectory(fed, w0, lr, steps, [seed, s]) for s in range(n_seeds)]
    return {key: np.stack([r[key] for r in runs]) for key in ("values", "sq_grads", "points")}


def _mean_se(a):
    m = a.mean(axis=0)
    se = a.std(axis=0, ddof=1) / math.sqrt(a.shape[0]) if a.shape[0] > 1 else np.zeros_like(m)
    return m, se


def step_ceiling_thm1(fed: Federation, probe: TheoryProbe) -> float:
    """Smallest ``2 eps N' / (L V^2 n'_k)`` over clients."""
    N = fed.sizes.sum()
    return float(min(2 * probe.eps_hat * N / (probe.L * probe.V_hat ** 2 * n) for n in fed.sizes))


def step_ceiling_thm2(probe: TheoryProbe) -> float:
    return (2 * probe.eps_hat - 1) / (probe.L * probe.V_hat ** 2)


def _contraction(mu, gamma, eta_bar, T):
    factor = 1 - 2 * mu * gamma * eta_bar
    return factor, factor ** np.arange(T + 1, dtype=np.float64)


def check_theorem1(fed: Federation, probe: TheoryProbe, lr: float, runs: dict,
                   eta_bar: float | None = None) -> dict:
    """Compare the seed-mean optimality gap with the geometric bound.

    Two readings of ``gamma'`` are reported.  ``ceiling`` plugs in the step
    ceiling itself, which makes ``gamma' = eps (1 - N'/n'_k) <= 0`` and the
    bound non-binding.  ``applied`` uses the step actually taken, as the
    derivation does before telescoping.  ``holds`` refers to ``applied``.
    """
    ceiling = step_ceiling_thm1(fed, probe)
    eta_bar = lr if eta_bar is None else eta_bar
    if not (0 < eta_bar <= lr < ceiling):
        raise PreconditionError(
            f"need 0 < eta_bar <= eta < {ceiling:.6g}; got eta_bar={eta_bar}, eta={lr}")
    gaps = runs["values"] - probe.F_star
    mean, se = _mean_se(gaps)
    gap0 = float(mean[0])
    T = len(mean) - 1
    # gaps cannot be resolved below the rounding of F itself
    floor = 16 * np.finfo(np.float64).eps * max(1.0, abs(probe.F_star))
    report = {"T": list(range(T + 1)), "mean_gap": mean.tolist(), "se": se.tolist(),
              "step_ceiling": ceiling, "eta": lr, "eta_bar": eta_bar, "float_floor": floor,
              "mu": probe.mu, "L": probe.L, "V_hat": probe.V_hat, "eps_hat": probe.eps_hat}
    for name, step in (("ceiling", ceiling), ("applied", lr)):
        gamma = probe.eps_hat - probe.L * step * probe.V_hat ** 2 / 2
        factor, powers = _contraction(probe.mu, gamma, eta_bar, T)
        binding = gamma > 0 and 0 <= factor < 1
        bound = powers * gap0
        viol = [t for t in range(T + 1) if binding and mean[t] - 2 * se[t] > bound[t] + floor]
        report[name] = {"gamma": gamma, "factor": factor, "binding": bool(binding),
                        "bound": bound.tolist() if binding else None,
                        "violations": viol, "holds": bool(binding and not viol)}
    report["holds"] = report["applied"]["holds"]
    return report


def check_theorem2(fed: Federation, probe: TheoryProbe, lr: float, runs: dict,
                   F_min: float) -> dict:
    """Running ``sum_t (eta/2) E||grad F(w^t)||^2`` against ``F(w^0) - F_min``."""
    ceiling = step_ceiling_thm2(probe)
    if probe.eps_hat <= 0.5:
        raise PreconditionError(f"needs eps > 1/2, estimated {probe.eps_hat:.4g}")
    if not 0 < lr < ceiling:
        raise PreconditionError(f"need 0 < eta < {ceiling:.6g}; got {lr}")
    terms = 0.5 * lr * runs["sq_grads"][:, :-1]
    lhs = np.cumsum(terms, axis=1)
    mean, se = _mean_se(lhs)
    rhs = float(runs["values"][:, 0].mean() - F_min)
    viol = [t + 1 for t in range(len(mean)) if mean[t] - 2 * se[t] > rhs]
    return {"T": list(range(1, len(mean) + 1)), "lhs_mean": mean.tolist(), "se": se.tolist(),
            "rhs": rhs, "step_ceiling": ceiling, "eta": lr, "L": probe.L,
            "V_hat": probe.V_hat, "eps_hat": probe.eps_hat,
            "violations": viol, "holds": not viol}


# --- probe drivers --------------------------------------------------------

def _random_points(rng, center, n, radius=2.0):
    return center + radius * rng.normal(size=(n, len(center)))


def probe_lemma1(n_objectives=10, n_points=1000, dim=5, seed=0, tol=1e-9) -> dict:
    """Random strongly convex quadratics plus the equality case ``1/2 ||w||^2``."""
    rng = np.random.default_rng(seed)
    rows = []
    cases = [(Quadratic(np.eye(dim), np.zeros(dim)), np.zeros(dim), 0.0, 1.0)]
    for _ in range(n_objectives):
        q, w_star, F_star = random_quadratic(dim, rng)
        cases.append((q, w_star, F_star, curvature(q.A)[0]))
    for i, (q, w_star, F_star, mu) in enumerate(cases):
        pts = _random_points(rng, w_star, n_points)
        ok = check_lemma1(q, mu, F_star, pts, tol)
        slack = [float(q.grad(w) @ q.grad(w) - 2 * mu * (q.value(w) - F_star)) for w in pts]
        rows.append({"objective": "half_norm" if i == 0 else f"random_{i}", "mu": mu,
                     "points": len(pts), "failures": int((~ok).sum()),
                     "min_slack": min(slack)})
    return {"which": "lemma1", "tol": tol, "objectives": rows,
            "holds": all(r["failures"] == 0 for r in rows)}


def build_probe(fed: Federation, points, F_star, w_star, mu, L) -> TheoryProbe:
    return TheoryProbe(mu, L, estimate_V(fed, points), estimate_eps(fed, points), F_star, w_star)


def probe_theorem1(n_clients=4, dim=5, samples_per_client=200, steps=200, n_seeds=30,
                   lr_fraction=0.5, seed=0) -> dict:
    """IID least-squares federation (shared optimum, no label noise).

    The step is ``lr_fraction * 2 eps / (L V^2)``, which keeps the applied
    ``gamma`` positive and lies under the theorem's ceiling.
    """
    fed = quadratic_federation(dim, n_clients, 0.0, seed, samples_per_client=samples_per_client)
    F = central_quadratic(fed)
    mu, L = curvature(F.A)
    w_star = np.linalg.solve(F.A, F.b)
    F_star = F.value(w_star)
    rng = np.random.default_rng([seed, 1])
    w0 = w_star + rng.normal(size=dim) * 3.0
    # constants are estimated on points spread around the optimum, then
    # refined on the trajectory itself
    pts = list(_random_points(rng, w_star, 200))
    probe = build_probe(fed, pts, F_star, w_star, mu, L)
    lr = lr_fraction * 2 * probe.eps_hat / (L * probe.V_hat ** 2)
    runs = monte_carlo(fed, w0, lr, steps, n_seeds, seed)
    traj = runs["points"].reshape(-1, dim)[:: max(1, steps // 20)]
    probe = build_probe(fed, pts + list(traj), F_star, w_star, mu, L)
    lr = min(lr, 0.999 * step_ceiling_thm1(fed, probe))
    rep = check_theorem1(fed, probe, lr, runs)
    rep.update(which="thm1", n_clients=n_clients, n_seeds=n_seeds)
    return rep


def probe_theorem2(n_clients=4, dim=5, steps=200, n_seeds=30, lr_fraction=0.5, spread=0.2,
                   seed=0) -> dict:
    """Double-well clients ``c_k W`` started on a fixed point of the box [-1.5, 1.5]."""
    fed = double_well_federation(n_clients, spread, seed)
    rng = np.random.default_rng([seed, 2])
    w0 = rng.uniform(-1.5, 1.5, size=dim)
    F0 = fed.value(w0)
    # every iterate stays in {F <= F(w0)} for admissible steps, where
    # |w_i|^2 <= 1 + 2 sqrt(F0) bounds the Hessian diagonal 3 w_i^2 - 1
    L = 3 * (1 + 2 * math.sqrt(F0)) - 1
    pts = list(rng.uniform(-1.5, 1.5, size=(200, dim)))
    probe = build_probe(fed, pts, 0.0, np.ones(dim), 0.0, L)
    lr = lr_fraction * step_ceiling_thm2(probe)
    runs = monte_carlo(fed, w0, lr, steps, n_seeds, seed)
    hess_max = float(np.max(3 * runs["points"] ** 2 - 1))
    rep = check_theorem2(fed, probe, lr, runs, F_min=0.0)
    rep.update(which="thm2", n_clients=n_clients, n_seeds=n_seeds, F0=F0,
               max_hessian_on_path=hess_max, L_covers_path=hess_max <= L)
    return rep


def probe_dissimilarity(n_clients=4, dim=5, dissimilarity=2.0, samples_per_client=200,
                        n_points=200, seed=0) -> dict:
    """V-hat for shifted-optimum quadratics, next to the shared-optimum case."""
    rng = np.random.default_rng([seed, 3])
    rows = []
    for delta in sorted({0.0, float(dissimilarity)}):
        fed = quadratic_federation(dim, n_clients, delta, seed,
                                   samples_per_client=samples_per_client)
        F = central_quadratic(fed)
        w_star = np.linalg.solve(F.A, F.b)
        pts = _random_points(rng, w_star, n_points, radius=3.0)
        rows.append({"dissimilarity": delta, "V_hat": estimate_V(fed, pts),
                     "eps_hat": estimate_eps(fed, pts)})
    return {"which": "dissimilarity", "rows": rows,
            "holds": all(r["V_hat"] >= 1 - 1e-9 for r in rows)}


def run_probe(cfg) -> dict:
    """Dispatch on ``cfg.probe.which``."""
    p = cfg.probe
    if p.which == "lemma1":
        return probe_lemma1(p.n_objectives, p.n_points, p.dim, cfg.seed)
    if p.which == "thm1":
        return probe_theorem1(p.n_clients, p.dim, p.samples_per_client, p.steps, p.n_seeds,
                              p.lr_fraction, cfg.seed)
    if p.which == "thm2":
        return probe_theorem2(p.n_clients, p.dim, p.steps, p.n_seeds, p.lr_fraction,
                              seed=cfg.seed)
    return probe_dissimilarity(p.n_clients, p.dim, p.dissimilarity or 2.0,
                               p.samples_per_client, seed=cfg.seed)
