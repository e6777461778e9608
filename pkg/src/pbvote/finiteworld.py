"""Exhaustively enumerable instances for ground-truth verification.

A finite world pins down everything the population risk definitions quantify
over: finitely many labeled points with probabilities, a finite noise set with
per-point noise distributions, and finitely many voters given as value tables
with vote weights.  Every population quantity — averaged, averaged-max for any
n, worst-case, their linear-loss surrogates, and the total-variation gap
between the randomly-perturbed and worst-case-perturbed pushforward
distributions — is then an exact finite sum, so the inequality chain and the
factor-2 relation can be checked with no statistics in the way.

Sums use math.fsum (exactly rounded), which makes the rearrangement
identities (risk under the pushforward table == the double sum) hold to the
last bit when no two (point, noise) pairs collide on the same perturbed point.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class FiniteWorld:
    xs: np.ndarray             # (m, dim) points
    ys: np.ndarray             # (m,) labels in {-1, +1}
    probs: np.ndarray          # (m,) point probabilities
    noises: np.ndarray         # (K, dim) the finite noise set B
    omegas: np.ndarray         # (m, K) per-point noise distributions
    voter_values: np.ndarray   # (V, m, K) voter outputs on x_i + eps_j
    voter_weights: np.ndarray  # (V,) vote weights
    budget: float              # l-inf radius of B

    def __post_init__(self):
        for name in ("xs", "ys", "probs", "noises", "omegas", "voter_values",
                     "voter_weights"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        m, dim = self.xs.shape
        K = self.noises.shape[0]
        V = self.voter_weights.shape[0]
        if self.ys.shape != (m,) or self.probs.shape != (m,):
            raise ContractError("ys/probs shape mismatch")
        if not np.all(np.isin(self.ys, (-1.0, 1.0))):
            raise ContractError("labels must be -1 or +1")
        if self.noises.shape != (K, dim) or self.omegas.shape != (m, K):
            raise ContractError("noise table shape mismatch")
        if self.voter_values.shape != (V, m, K):
            raise ContractError("voter value table shape mismatch")
        if abs(math.fsum(self.probs) - 1.0) > _PROB_TOL or (self.probs < 0).any():
            raise ContractError("point probabilities must sum to 1")
        if abs(math.fsum(self.voter_weights) - 1.0) > _PROB_TOL or (self.voter_weights < 0).any():
            raise ContractError("vote weights must sum to 1")
        for i in range(m):
            if abs(math.fsum(self.omegas[i]) - 1.0) > _PROB_TOL or (self.omegas[i] < 0).any():
                raise ContractError(f"noise distribution of point {i} must sum to 1")
        if np.abs(self.voter_values).max(initial=0.0) > 1.0:
            raise ContractError("voter outputs must lie in [-1, 1]")
        if K and np.abs(self.noises).max() > self.budget + 1e-12:
            raise ContractError("noise vectors must satisfy the l-inf budget")

    @property
    def n_points(self):
        return self.xs.shape[0]

    @property
    def n_noises(self):
        return self.noises.shape[0]

    @property
    def n_voters(self):
        return self.voter_weights.shape[0]


def mv_table(world: FiniteWorld) -> np.ndarray:
    """Vote score on every perturbed point, shape (m, K)."""
    return np.tensordot(world.voter_weights, world.voter_values, axes=1)


def wrong_table(world: FiniteWorld) -> np.ndarray:
    """0-1 error indicator of the vote, with sign(0) = +1."""
    mv = mv_table(world)
    sign = np.where(mv >= 0.0, 1.0, -1.0)
    return (sign != world.ys[:, None]).astype(np.float64)


def exact_averaged(world: FiniteWorld) -> float:
    """P(vote errs on one randomly drawn perturbed example)."""
    wrong = wrong_table(world)
    terms = [world.probs[i] * world.omegas[i, j]
             for i in range(world.n_points) for j in range(world.n_noises)
             if wrong[i, j]]
    return math.fsum(terms)


def _correct_prob(world: FiniteWorld) -> np.ndarray:
    wrong = wrong_table(world)
    return np.array([math.fsum(world.omegas[i, j]
                               for j in range(world.n_noises) if not wrong[i, j])
                     for i in range(world.n_points)])


def exact_avgmax(world: FiniteWorld, n: int) -> float:
    """P(at least one of n i.i.d. perturbations fools the vote).

    Uses the product form: the n draws are independent given the example, so
    the all-correct probability is p_i^n.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    p = _correct_prob(world)
    return math.fsum(world.probs[i] * (1.0 - p[i] ** n)
                     for i in range(world.n_points))


def exact_worstcase(world: FiniteWorld) -> float:
    """Error under the worst noise in B, per point."""
    wrong = wrong_table(world)
    return math.fsum(world.probs[i] for i in range(world.n_points)
                     if wrong[i].max(initial=0.0) > 0)


def exact_avg_surrogate(world: FiniteWorld) -> float:
    mv = mv_table(world)
    return math.fsum(world.probs[i] * world.omegas[i, j] * 0.5 * (1.0 - world.ys[i] * mv[i, j])
                     for i in range(world.n_points) for j in range(world.n_noises))


def exact_avgmax_surrogate(world: FiniteWorld, n: int) -> float:
    """Exact E[(1 - min margin of n i.i.d. draws)/2] via margin order statistics."""
    if n < 1:
        raise ContractError("n must be >= 1")
    mv = mv_table(world)
    total = []
    for i in range(world.n_points):
        margins = world.ys[i] * mv[i]
        vals, inv = np.unique(margins, return_inverse=True)
        mass = np.zeros(vals.shape[0])
        np.add.at(mass, inv, world.omegas[i])
        tail = np.concatenate([np.cumsum(mass[::-1])[::-1], [0.0]])
        e_min = math.fsum(vals[t] * (tail[t] ** n - tail[t + 1] ** n)
                          for t in range(vals.shape[0]))
        total.append(world.probs[i] * 0.5 * (1.0 - e_min))
    return math.fsum(total)


def _point_key(x: np.ndarray, y: float) -> bytes:
    return np.ascontiguousarray(x, dtype="<f8").tobytes() + (b"+" if y > 0 else b"-")


def delta_pi_tv(world: FiniteWorld):
    """Pushforward tables of perturbed and adversarial examples, and their TV.

    delta(x', y') aggregates D(x,y)*omega(eps) over pairs with x+eps = x';
    pi(x', y') puts each point's mass on its worst perturbation (the first
    loss-maximizing index when tied).  Returns (delta, pi, tv) where the
    tables map point keys to (probability, error indicator).
    """
    wrong = wrong_table(world)
    delta, pi = {}, {}
    for i in range(world.n_points):
        eps_star = int(np.argmax(wrong[i]))  # all-zero row -> index 0
        for j in range(world.n_noises):
            key = _point_key(world.xs[i] + world.noises[j], world.ys[i])
            mass = world.probs[i] * world.omegas[i, j]
            ind = bool(wrong[i, j])
            if key in delta:
                old_mass, old_ind, parts = delta[key]
                if old_ind != ind:
                    raise ContractError("inconsistent vote on colliding perturbed points")
                parts.append(mass)
                delta[key] = (math.fsum(parts), ind, parts)
            else:
                delta[key] = (mass, ind, [mass])
            if j == eps_star:
                if key in pi:
                    old_mass, old_ind, parts = pi[key]
                    if old_ind != ind:
                        raise ContractError("inconsistent vote on colliding adversarial points")
                    parts.append(world.probs[i])
                    pi[key] = (math.fsum(parts), ind, parts)
                else:
                    pi[key] = (world.probs[i], ind, [world.probs[i]])
    dd = {k: (v[0], v[1]) for k, v in delta.items()}
    pp = {k: (v[0], v[1]) for k, v in pi.items()}
    support = set(dd) | set(pp)
    tv = 0.5 * math.fsum(abs(pp.get(k, (0.0,))[0] - dd.get(k, (0.0,))[0])
                         for k in support)
    return dd, pp, tv


def risk_under_table(table: dict) -> float:
    """0-1 risk of the vote under a pushforward table."""
    return math.fsum(mass for mass, ind in table.values() if ind)


@dataclass(frozen=True)
class ExactRisks:
    averaged: float
    avgmax: dict           # n -> value
    worstcase: float
    avg_surrogate: float
    avgmax_surrogate: dict # n -> value
    tv_pi_delta: float


def exact_risks(world: FiniteWorld, ns=(1, 2, 3, 5, 8)) -> ExactRisks:
    _, _, tv = delta_pi_tv(world)
    return ExactRisks(
        averaged=exact_averaged(world),
        avgmax={n: exact_avgmax(world, n) for n in ns},
        worstcase=exact_worstcase(world),
        avg_surrogate=exact_avg_surrogate(world),
        avgmax_surrogate={n: exact_avgmax_surrogate(world, n) for n in ns},
        tv_pi_delta=tv,
    )


# ---------------------------------------------------------------------------
# Invariant verification.

def verify_world(world: FiniteWorld, ns=(1, 2, 3, 5, 8), tol=1e-12):
    """Check every enumerable law on one world.

    Returns a list of (name, ok, detail) triples; exact identities are checked
    with zero tolerance, inequalities at tol.
    """
    ns = sorted(ns)
    r = exact_risks(world, ns)
    delta, pi, tv = delta_pi_tv(world)
    checks = []

    chain_ok = r.averaged <= r.avgmax[ns[0]] + tol and all(
        r.avgmax[a] <= r.avgmax[b] + tol for a, b in zip(ns, ns[1:])
    ) and r.avgmax[ns[-1]] <= r.worstcase + tol
    n1_ok = ns[0] != 1 or abs(r.avgmax[1] - r.averaged) <= tol
    checks.append(("risk_chain", chain_ok and n1_ok,
                   f"avg={r.averaged:.6g} worst={r.worstcase:.6g}"))

    sandwich_ok = r.worstcase - tv <= r.averaged + tol
    checks.append(("tv_sandwich", sandwich_ok,
                   f"worst-tv={r.worstcase - tv:.6g} avg={r.averaged:.6g}"))

    ident_delta = risk_under_table(delta) == r.averaged
    checks.append(("perturbed_pushforward_identity", ident_delta,
                   f"{risk_under_table(delta)!r} vs {r.averaged!r}"))
    ident_pi = risk_under_table(pi) == r.worstcase
    checks.append(("adversarial_pushforward_identity", ident_pi,
                   f"{risk_under_table(pi)!r} vs {r.worstcase!r}"))

    fac2 = r.averaged <= 2.0 * r.avg_surrogate + tol and all(
        r.avgmax[n] <= 2.0 * r.avgmax_surrogate[n] + tol for n in ns)
    checks.append(("factor2_surrogate", fac2, ""))
    return checks


def random_world(rng: np.random.Generator, max_points=16, max_noises=8,
                 max_voters=8, dim=3, budget=0.5) -> FiniteWorld:
    """Random instance within the enumeration caps; occasionally degenerate
    (Dirac noise distributions) so edge cases stay covered."""
    m = int(rng.integers(1, max_points + 1))
    K = int(rng.integers(1, max_noises + 1))
    V = int(rng.integers(1, max_voters + 1))
    xs = rng.uniform(0.0, 1.0, (m, dim))
    ys = rng.choice([-1.0, 1.0], m)
    probs = rng.random(m) + 1e-3
    probs /= probs.sum()
    noises = rng.uniform(-budget, budget, (K, dim))
    if rng.random() < 0.2:
        omegas = np.zeros((m, K))
        omegas[np.arange(m), rng.integers(0, K, m)] = 1.0
    else:
        omegas = rng.random((m, K)) + 1e-3
        omegas /= omegas.sum(axis=1, keepdims=True)
    voter_values = rng.uniform(-1.0, 1.0, (V, m, K))
    weights = rng.random(V) + 1e-3
    weights /= weights.sum()
    return FiniteWorld(xs, ys, probs, noises, omegas, voter_values, weights, budget)


def run_verification(master_seed=0, n_worlds=500, ns=(1, 2, 3, 5, 8),
                     fixture_worlds=(), tol=1e-12):
    """Sweep fixtures plus freshly generated worlds; returns (ok, failures, count)."""
    from .rng import stream
    failures = []
    count = 0
    for tag, world in fixture_worlds:
        count += 1
        for name, ok, detail in verify_world(world, ns, tol):
            if not ok:
                failures.append((tag, name, detail))
    rng = stream(master_seed, "oracle-worlds")
    for k in range(n_worlds):
        count += 1
        world = random_world(rng)
        for name, ok, detail in verify_world(world, ns, tol):
            if not ok:
                failures.append((f"random[{k}]", name, detail))
    return not failures, failures, count


# ---------------------------------------------------------------------------
# JSON fixtures.

def world_to_json(world: FiniteWorld) -> dict:
    return {
        "schema_version": 1,
        "budget": world.budget,
        "points": [{"x": world.xs[i].tolist(), "y": int(world.ys[i]),
                    "prob": world.probs[i], "omega": world.omegas[i].tolist()}
                   for i in range(world.n_points)],
        "noises": world.noises.tolist(),
        "voters": [{"weight": world.voter_weights[v],
                    "values": world.voter_values[v].tolist()}
                   for v in range(world.n_voters)],
    }


def world_from_json(d: dict) -> FiniteWorld:
    try:
        xs = np.asarray([p["x"] for p in d["points"]], dtype=np.float64)
        ys = np.asarray([p["y"] for p in d["points"]], dtype=np.float64)
        probs = np.asarray([p["prob"] for p in d["points"]], dtype=np.float64)
        omegas = np.asarray([p["omega"] for p in d["points"]], dtype=np.float64)
        noises = np.asarray(d["noises"], dtype=np.float64)
        weights = np.asarray([v["weight"] for v in d["voters"]], dtype=np.float64)
        values = np.asarray([v["values"] for v in d["voters"]], dtype=np.float64)
        budget = float(d["budget"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"malformed finite-world fixture: {exc}") from exc
    return FiniteWorld(xs, ys, probs, noises, omegas, values, weights, budget)


def load_world(path) -> FiniteWorld:
    with open(path) as fh:
        return world_from_json(json.load(fh))


def save_world(path, world: FiniteWorld):
    with open(path, "w") as fh:
        json.dump(world_to_json(world), fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# Sampling from a world: used for statistical validity checks of the bounds.

def sample_perturbed_indices(world: FiniteWorld, m: int, n: int,
                             rng: np.random.Generator):
    """Draw m examples i.i.d. from the world and n noises per example."""
    pts = rng.choice(world.n_points, size=m, p=world.probs)
    noise_idx = np.stack([rng.choice(world.n_noises, size=n, p=world.omegas[i])
                          for i in pts])
    return pts, noise_idx


def empirical_estimates(world: FiniteWorld, pts, noise_idx):
    """Surrogate estimates plus the voter-disagreement TV term on a drawn sample.

    The vote here is exact (weighted over all voters), matching the population
    quantities the bounds certify.
    """
    m, n = noise_idx.shape
    mv = mv_table(world)
    mv_s = mv[pts[:, None], noise_idx]                    # (m, n)
    y = world.ys[pts]
    margins = y[:, None] * mv_s
    emp_avg = float(np.mean(0.5 * (1.0 - margins)))
    emp_avgmax = float(np.mean(0.5 * (1.0 - margins.min(axis=1))))

    vals = world.voter_values[:, pts[:, None], noise_idx]  # (V, m, n)
    v_margins = y[None, :, None] * vals
    jstar = v_margins.argmin(axis=2)                       # (V, m)
    tv_total = 0.0
    for i in range(m):
        pi_mass = np.zeros(n)
        np.add.at(pi_mass, jstar[:, i], world.voter_weights)
        tv_total += float(np.sum(world.voter_weights * (1.0 - pi_mass[jstar[:, i]])))
    return {"emp_avg_surrogate": emp_avg, "emp_avgmax_surrogate": emp_avgmax,
            "tv": tv_total / m}
