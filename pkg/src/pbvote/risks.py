"""Empirical risk estimators on perturbed samples.

All five estimators share one sampled voter ensemble and, when given the same
data, the same majority-vote scores; that makes the pointwise relation
I(sign(mv) != y) <= 1 - y*mv (and hence 0-1 <= 2 * surrogate) hold exactly for
the computed numbers, not just in expectation.
"""

from dataclasses import dataclass

import numpy as np

from . import attacks, posterior
from .errors import ContractError
from .rng import stream

RISK_KINDS = ("avg01", "avgmax01", "avg_surrogate", "avgmax_surrogate", "worstcase01")


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    kind: str
    m: int
    n: int
    n_voters: int

    def __post_init__(self):
        if self.kind not in RISK_KINDS:
            raise ContractError(f"unknown risk kind {self.kind!r}")
        if not (-1e-12 <= self.value <= 1 + 1e-12):
            raise ContractError(f"risk estimate {self.value} outside [0, 1]")


def _check_data(data):
    if not data:
        raise ContractError("risk estimate over empty data")
    n = data[0].n
    if any(s.n != n for s in data):
        raise ContractError("all perturbed samples must share the same n")
    return len(data), n


def voter_score_tensor(ens: posterior.VoterEnsemble, data) -> np.ndarray:
    """Per-voter scores on every perturbed point, shape (N, m, n)."""
    m, n = _check_data(data)
    pts = np.concatenate([s.x[None, :] + s.eps for s in data])  # (m*n, d)
    flat = posterior.voter_scores(ens, pts)                      # (N, m*n)
    return flat.reshape(ens.n_voters, m, n)


def _mv_and_labels(ens, data, scores):
    m, n = _check_data(data)
    if scores is None:
        scores = voter_score_tensor(ens, data)
    mv = scores.mean(axis=0)                       # (m, n)
    y = np.asarray([s.y for s in data], dtype=np.float64)
    return mv, y, m, n


def avg_risk_01(ens, data, scores=None) -> RiskEstimate:
    """Fraction of perturbed points the vote misclassifies."""
    mv, y, m, n = _mv_and_labels(ens, data, scores)
    wrong = posterior.vote_sign(mv) != y[:, None]
    return RiskEstimate(float(np.mean(wrong)), "avg01", m, n, ens.n_voters)


def avgmax_risk_01(ens, data, scores=None) -> RiskEstimate:
    """Fraction of examples with at least one fooling perturbation."""
    mv, y, m, n = _mv_and_labels(ens, data, scores)
    wrong = posterior.vote_sign(mv) != y[:, None]
    return RiskEstimate(float(np.mean(wrong.max(axis=1))), "avgmax01", m, n, ens.n_voters)


def avg_surrogate(ens, data, scores=None) -> RiskEstimate:
    """Linear-loss relaxation (1 - y*mv)/2 averaged over all perturbed points."""
    mv, y, m, n = _mv_and_labels(ens, data, scores)
    vals = 0.5 * (1.0 - y[:, None] * mv)
    return RiskEstimate(float(np.mean(vals)), "avg_surrogate", m, n, ens.n_voters)


def avgmax_surrogate(ens, data, scores=None) -> RiskEstimate:
    """Per-example worst margin version: (1 - min_j y*mv_j)/2 averaged."""
    mv, y, m, n = _mv_and_labels(ens, data, scores)
    worst = (y[:, None] * mv).min(axis=1)
    return RiskEstimate(float(np.mean(0.5 * (1.0 - worst))), "avgmax_surrogate",
                        m, n, ens.n_voters)


def worstcase_risk_estimate(ens, X, Y, cfg: attacks.AttackConfig, target_w=None,
                            master_seed=0, tag="worstcase-attack") -> RiskEstimate:
    """Vote error under the configured gradient attack on clean examples.

    A lower estimate of the true max over the ball: the attack is white-box
    against one target network (the ensemble's sample mean unless given).
    """
    if cfg.kind not in attacks.GRADIENT_KINDS:
        raise ContractError("worst-case estimate needs a gradient attack kind")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] == 0:
        raise ContractError("risk estimate over empty data")
    if target_w is None:
        target_w = ens.samples.mean(axis=0)
    eps = attacks.attack_batch(cfg, ens.spec, target_w, X, Y,
                               rng=stream(master_seed, tag))
    mv = posterior.mv_scores(ens, X + eps)
    wrong = posterior.vote_sign(mv) != Y
    return RiskEstimate(float(np.mean(wrong)), "worstcase01", X.shape[0], 1,
                        ens.n_voters)


def factor2_pointwise_holds(ens, data, scores=None) -> bool:
    """Exact pointwise check that 0-1 estimates sit under twice the surrogates."""
    if scores is None:
        scores = voter_score_tensor(ens, data)
    a01 = avg_risk_01(ens, data, scores).value
    asur = avg_surrogate(ens, data, scores).value
    m01 = avgmax_risk_01(ens, data, scores).value
    msur = avgmax_surrogate(ens, data, scores).value
    return a01 <= 2.0 * asur and m01 <= 2.0 * msur
