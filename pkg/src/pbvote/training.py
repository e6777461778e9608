"""Two-step robust training of a Gaussian weight distribution.

Step one performs adversarial training of the distribution mean on the prior
split: each batch is perturbed against a freshly sampled network, another
sampled network is evaluated on the perturbed batch, and the mean takes an
Adam step on the linear loss.  The epoch snapshot whose sampled linear risk on
the posterior split is lowest becomes the reference distribution P.

Step two starts the posterior Q at P's mean and minimizes a bound-derived
objective through the sampled weights w' = w + sqrt(lambda)*zeta (the noise is
frozen per batch, so the gradient at w' applies to w unchanged), plus the
closed-form KL path ||w - v||^2 / (2*lambda).  The exp-concave objective
co-trains its concentration constant C; the additive objective needs no extra
parameter.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import attacks, datasets, nets, posterior
from .errors import ConfigError, ContractError, NumericError
from .optim import adam_step, init_adam
from .rng import stream

log = logging.getLogger(__name__)

C_MIN, C_MAX = 1e-4, 100.0


@dataclass(frozen=True)
class TrainConfig:
    defense: attacks.AttackConfig
    epochs_prior: int = 20
    epochs_posterior: int = 20
    lr: float = 1e-4
    lr_posterior: float = None
    batch_size: int = 64
    lam: float = 0.01
    delta: float = 0.05
    c_init: float = 0.05
    bound: str = "seeger"
    master_seed: int = 0

    def __post_init__(self):
        if self.lr_posterior is None:
            object.__setattr__(self, "lr_posterior", self.lr)
        if self.epochs_prior < 1 or self.epochs_posterior < 1:
            raise ConfigError("epoch counts must be positive")
        if self.lr < 0 or self.lr_posterior < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not (0 < self.delta < 1):
            raise ConfigError("delta must lie in (0, 1)")
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if self.c_init <= 0:
            raise ConfigError("c_init must be positive")
        if self.bound not in ("seeger", "avgmax"):
            raise ConfigError("bound selector must be 'seeger' or 'avgmax'")

    def to_dict(self):
        d = asdict(self)
        d["defense"] = self.defense.to_dict()
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["defense"] = attacks.AttackConfig.from_dict(d["defense"])
        return TrainConfig(**d)


@dataclass
class PriorTrace:
    means: list          # per-epoch snapshots of the distribution mean
    scores: list         # per-epoch sampled linear risk on the selection split
    chosen: int

    def __post_init__(self):
        if len(self.means) != len(self.scores):
            raise ContractError("trace means/scores length mismatch")
        if self.scores and self.chosen != int(np.argmin(self.scores)):
            raise ContractError("chosen epoch must minimize the selection score")


# ---------------------------------------------------------------------------
# Bound-derived objectives (per-example; weight path enters through lin_loss,
# the KL path through the closed form).

def _log_penalty_avg(m, n_priors, delta):
    return math.log(n_priors * (m + 1) / delta)


def _log_penalty_avgmax(m, n_priors, delta):
    return math.log(2.0 * n_priors * math.sqrt(m) / delta)


def clamp_c(c: float) -> float:
    if not (C_MIN < c <= C_MAX):
        clamped = min(max(c, C_MIN * (1 + 1e-9)), C_MAX)
        log.warning("concentration constant %.3g outside (%g, %g]; clamped to %.3g",
                    c, C_MIN, C_MAX, clamped)
        return clamped
    return c


def loss_seeger(lin_loss, kl, m, n_priors, delta, c):
    """Exp-concave objective whose optimum over c matches the kl-inverse bound."""
    c = clamp_c(c)
    a = c * np.asarray(lin_loss) + (kl + _log_penalty_avg(m, n_priors, delta)) / m
    return (1.0 - np.exp(-a)) / (1.0 - math.exp(-c))


def loss_seeger_grads(lin_loss, kl, m, n_priors, delta, c):
    """(d/dlin, d/dkl, d/dc) of loss_seeger, per example."""
    c = clamp_c(c)
    lin = np.asarray(lin_loss)
    a = c * lin + (kl + _log_penalty_avg(m, n_priors, delta)) / m
    ea = np.exp(-a)
    denom = 1.0 - math.exp(-c)
    dlin = c * ea / denom
    dkl = ea / (m * denom)
    dc = (lin * ea * denom - (1.0 - ea) * math.exp(-c)) / (denom * denom)
    return dlin, dkl, dc


def loss_avgmax(lin_loss, kl, m, n_priors, delta):
    """Linear loss plus the square-root complexity penalty (TV term excluded:
    it vanishes for the single-voter approximation used during training)."""
    pen = math.sqrt((kl + _log_penalty_avgmax(m, n_priors, delta)) / (2.0 * m))
    return np.asarray(lin_loss) + pen


def loss_avgmax_grads(lin_loss, kl, m, n_priors, delta):
    """(d/dlin, d/dkl) of loss_avgmax."""
    pen = math.sqrt((kl + _log_penalty_avgmax(m, n_priors, delta)) / (2.0 * m))
    dlin = np.ones_like(np.asarray(lin_loss, dtype=np.float64))
    return dlin, 1.0 / (4.0 * m * pen)


# ---------------------------------------------------------------------------
# Defense: perturb a batch with a single draw per example (fresh every pass).

def defend_batch(att: attacks.AttackConfig, spec, w_target, Xb, Yb, rng):
    if att.kind == "none":
        return Xb
    if att.kind == "unif":
        eps = rng.uniform(-att.budget, att.budget, Xb.shape)
    else:
        base_kind = att.kind[:-2] if att.kind in attacks.OFFSET_KINDS else att.kind
        base = replace(att, kind=base_kind, clamp_input=False)
        eps = attacks.attack_batch(base, spec, w_target, Xb, Yb, rng=rng)
        if att.kind in attacks.OFFSET_KINDS:
            u = att.uniform_offset
            eps = attacks.clip_linf(eps + rng.uniform(-u, u, Xb.shape), att.budget)
    if att.clamp_input:
        eps = np.clip(Xb + eps, 0.0, 1.0) - Xb
    return Xb + eps


def _batches(n, batch_size, order):
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


# ---------------------------------------------------------------------------
# Step one: adversarial training of the reference distribution.

def train_prior(spec, cfg: TrainConfig, s_prime, s):
    """Returns (reference distribution P, per-epoch trace)."""
    datasets.assert_disjoint(s_prime, s, ("prior split", "posterior split"))
    seed = cfg.master_seed
    rootlam = math.sqrt(cfg.lam)
    d = spec.n_params
    v = nets.init_weights(spec, seed)
    state = init_adam(d, lr=cfg.lr)
    snapshots = []
    gb = 0
    for epoch in range(cfg.epochs_prior):
        order = stream(seed, "prior-batch-order", epoch).permutation(len(s_prime))
        for idx in _batches(len(s_prime), cfg.batch_size, order):
            Xb, Yb = s_prime.x[idx], s_prime.y[idx].astype(np.float64)
            w_atk = v + rootlam * stream(seed, "prior-attack-sample", gb).standard_normal(d)
            Xadv = defend_batch(cfg.defense, spec, w_atk, Xb, Yb,
                                stream(seed, "prior-defense-noise", gb))
            v_sample = v + rootlam * stream(seed, "prior-weight-sample", gb).standard_normal(d)
            dscore = -Yb / (2.0 * len(idx))
            _, gw, _ = nets.score_and_grads(spec, v_sample, Xadv, dscore,
                                            need_xgrad=False)
            state, v = adam_step(state, v, gw)
            gb += 1
        snapshots.append(v.copy())

    scores = [_selection_score(spec, cfg, vt, s, epoch)
              for epoch, vt in enumerate(snapshots)]
    chosen = int(np.argmin(scores))
    trace = PriorTrace(snapshots, scores, chosen)
    prior = posterior.GaussianPosterior(spec, snapshots[chosen], cfg.lam)
    return prior, trace


def _selection_score(spec, cfg, v_epoch, s, epoch):
    """Sampled linear risk on the selection split, one weight draw per batch."""
    seed = cfg.master_seed
    rootlam = math.sqrt(cfg.lam)
    d = spec.n_params
    order = np.arange(len(s))
    total = 0.0
    n_batches = math.ceil(len(s) / cfg.batch_size)
    for bi, idx in enumerate(_batches(len(s), cfg.batch_size, order)):
        w = v_epoch + rootlam * stream(seed, "prior-select-sample",
                                       epoch * n_batches + bi).standard_normal(d)
        scores = nets.forward_batch(spec, w, s.x[idx])
        total += float(np.sum(0.5 * (1.0 - s.y[idx] * scores)))
    return total / len(s)


# ---------------------------------------------------------------------------
# Step two: posterior training on a bound-derived objective.

def train_posterior(spec, cfg: TrainConfig, prior: posterior.GaussianPosterior, s):
    """Returns (Q, extras) where extras records the trained C (if any), the
    final KL, and the per-epoch mean objective."""
    if prior.spec != spec:
        raise ContractError("prior distribution parametrizes a different network")
    seed = cfg.master_seed
    rootlam = math.sqrt(cfg.lam)
    d = spec.n_params
    v_best = prior.mean
    w = v_best.copy()
    state = init_adam(d, lr=cfg.lr_posterior)
    c = cfg.c_init
    c_state = init_adam(1, lr=cfg.lr_posterior)
    m = len(s)
    n_priors = cfg.epochs_prior
    loss_trace = []
    gb = 0
    for epoch in range(cfg.epochs_posterior):
        order = stream(seed, "post-batch-order", epoch).permutation(m)
        epoch_loss, n_seen = 0.0, 0
        for idx in _batches(m, cfg.batch_size, order):
            Xb, Yb = s.x[idx], s.y[idx].astype(np.float64)
            w_atk = w + rootlam * stream(seed, "post-attack-sample", gb).standard_normal(d)
            Xadv = defend_batch(cfg.defense, spec, w_atk, Xb, Yb,
                                stream(seed, "post-defense-noise", gb))
            zeta = stream(seed, "post-noise", gb).standard_normal(d)
            w_prime = w + rootlam * zeta
            diff = w - v_best
            kl = float(diff @ diff) / (2.0 * cfg.lam)
            B = len(idx)

            if cfg.bound == "seeger":
                def dscore(scores):
                    lin = 0.5 * (1.0 - Yb * scores)
                    dlin, _, _ = loss_seeger_grads(lin, kl, m, n_priors, cfg.delta, c)
                    return dlin * (-Yb / 2.0) / B
            else:
                def dscore(scores):
                    return -Yb / (2.0 * B)

            scores, gw, _ = nets.score_and_grads(spec, w_prime, Xadv, dscore,
                                                 need_xgrad=False)
            lin = 0.5 * (1.0 - Yb * scores)
            if cfg.bound == "seeger":
                batch_loss = float(np.mean(loss_seeger(lin, kl, m, n_priors, cfg.delta, c)))
                _, dkl, dc = loss_seeger_grads(lin, kl, m, n_priors, cfg.delta, c)
                gw = gw + float(np.mean(dkl)) * diff / cfg.lam
                c_state, c_arr = adam_step(c_state, np.array([c]),
                                           np.array([float(np.mean(dc))]))
                c = clamp_c(float(c_arr[0]))
            else:
                batch_loss = float(np.mean(loss_avgmax(lin, kl, m, n_priors, cfg.delta)))
                _, dkl = loss_avgmax_grads(lin, kl, m, n_priors, cfg.delta)
                gw = gw + dkl * diff / cfg.lam

            if not math.isfinite(batch_loss):
                raise NumericError(
                    "non-finite training objective",
                    snapshot={"epoch": epoch, "batch": gb, "kl": kl, "c": c,
                              "w_norm": float(np.linalg.norm(w)),
                              "score_range": [float(scores.min()), float(scores.max())]})
            state, w = adam_step(state, w, gw)
            epoch_loss += batch_loss * B
            n_seen += B
            gb += 1
        loss_trace.append(epoch_loss / max(n_seen, 1))

    q = posterior.GaussianPosterior(spec, w, cfg.lam)
    extras = {
        "c_final": c if cfg.bound == "seeger" else None,
        "kl_final": posterior.kl_gaussians(q, prior),
        "loss_trace": loss_trace,
    }
    return q, extras


# ---------------------------------------------------------------------------
# Run manifest: everything a certificate needs to be reproduced.

MANIFEST_SCHEMA_VERSION = 1


def build_manifest(cfg: TrainConfig, spec, s_prime, s, trace: PriorTrace,
                   extras, checkpoints) -> dict:
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "spec": spec.to_dict(),
        "data": {
            "prior_split_hash": s_prime.content_hash(),
            "posterior_split_hash": s.content_hash(),
            "prior_split_size": len(s_prime),
            "posterior_split_size": len(s),
        },
        "n_priors": cfg.epochs_prior,
        "chosen_epoch": trace.chosen,
        "selection_scores": trace.scores,
        "c_final": extras.get("c_final"),
        "kl_final": extras.get("kl_final"),
        "loss_trace": extras.get("loss_trace"),
        "checkpoints": checkpoints,
    }


def save_manifest(path, manifest: dict):
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def load_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ConfigError("unsupported manifest schema version")
    return manifest
