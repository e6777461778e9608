"""Isotropic Gaussian distributions over weight vectors.

The same type serves the learned distribution Q = N(w, lambda*I) and the
reference distribution P = N(v, lambda*I); with a shared scale their KL
divergence has the closed form ||w - v||^2 / (2*lambda).  Majority-vote
scoring is Monte Carlo: an ensemble of sampled weight vectors is drawn once
and reused, so pointwise comparisons between 0-1 and surrogate estimates stay
exact.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nets
from .errors import ContractError, ShapeError
from .rng import stream


@dataclass(frozen=True)
class GaussianPosterior:
    spec: nets.NetworkSpec
    mean: np.ndarray
    lam: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        if mean.ndim != 1 or mean.shape[0] != self.spec.n_params:
            raise ShapeError("mean length does not match the network spec")
        if not np.isfinite(mean).all():
            raise ContractError("posterior mean must be finite")
        if not (self.lam > 0):
            raise ContractError("lambda must be positive")


def sample(post: GaussianPosterior, rng: np.random.Generator) -> np.ndarray:
    """Draw w' = mean + sqrt(lambda) * zeta, zeta ~ N(0, I)."""
    return post.mean + np.sqrt(post.lam) * rng.standard_normal(post.mean.shape[0])


def kl_gaussians(q: GaussianPosterior, p: GaussianPosterior) -> float:
    """KL(Q||P) for two isotropic Gaussians sharing the same scale."""
    if q.lam != p.lam:
        raise ContractError("closed-form KL assumes a shared isotropic scale")
    if q.spec != p.spec:
        raise ContractError("distributions parametrize different networks")
    diff = q.mean - p.mean
    return float(diff @ diff) / (2.0 * q.lam)


@dataclass(frozen=True)
class VoterEnsemble:
    """N weight vectors drawn once from a posterior, reused across estimates."""

    spec: nets.NetworkSpec
    samples: np.ndarray  # (N, d)
    master_seed: int
    tag: str = "ensemble"

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", s)
        if s.ndim != 2 or s.shape[0] < 1:
            raise ContractError("ensemble needs at least one sampled voter")
        if s.shape[1] != self.spec.n_params:
            raise ShapeError("sample length does not match the network spec")

    @property
    def n_voters(self) -> int:
        return self.samples.shape[0]


def draw_ensemble(post: GaussianPosterior, n_voters: int, master_seed: int,
                  tag: str = "ensemble") -> VoterEnsemble:
    """One stream per voter index, so ensembles extend without reshuffling."""
    if n_voters < 1:
        raise ContractError("n_voters must be >= 1")
    samples = np.stack([sample(post, stream(master_seed, tag, k))
                        for k in range(n_voters)])
    return VoterEnsemble(post.spec, samples, master_seed, tag)


def voter_scores(ens: VoterEnsemble, X) -> np.ndarray:
    """Per-voter scores, shape (N, B)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.stack([nets.forward_batch(ens.spec, ens.samples[k], X)
                     for k in range(ens.n_voters)])


def mv_scores(ens: VoterEnsemble, X) -> np.ndarray:
    """Majority-vote scores: mean voter output, in [-1, 1]. Prediction is the sign."""
    return voter_scores(ens, X).mean(axis=0)


def mv_score(ens: VoterEnsemble, x) -> float:
    return float(mv_scores(ens, np.atleast_2d(x))[0])


def vote_sign(scores) -> np.ndarray:
    """Sign convention of the vote: sign(0) = +1."""
    return np.where(np.asarray(scores) >= 0.0, 1, -1)


# ---------------------------------------------------------------------------
# Posterior checkpoint: one JSON header line, then the raw weight checkpoint.

def dump_posterior(post: GaussianPosterior, master_seed: int) -> bytes:
    header = {
        "format": "pbvote-posterior",
        "version": 1,
        "lambda": post.lam,
        "master_seed": int(master_seed),
        "spec": post.spec.to_dict(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    return struct.pack("<I", len(head)) + head + nets.dump_weights(post.spec, post.mean)


def parse_posterior(blob: bytes):
    """Returns (GaussianPosterior, master_seed)."""
    (hlen,) = struct.unpack("<I", blob[:4])
    header = json.loads(blob[4:4 + hlen].decode())
    if header.get("format") != "pbvote-posterior":
        raise ContractError("not a posterior checkpoint")
    spec = nets.NetworkSpec.from_dict(header["spec"])
    mean = nets.parse_weights(spec, blob[4 + hlen:])
    return GaussianPosterior(spec, mean, float(header["lambda"])), int(header["master_seed"])


def save_posterior(path, post, master_seed):
    with open(path, "wb") as fh:
        fh.write(dump_posterior(post, master_seed))


def load_posterior(path):
    with open(path, "rb") as fh:
        return parse_posterior(fh.read())
