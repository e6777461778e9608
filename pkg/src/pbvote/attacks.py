"""l-inf bounded perturbation generators.

Gradient attacks (fgsm / ifgsm / pgd) climb the linear loss (1 - y*h(x+e))/2
of a single target network; the 0-1 objective itself is not differentiable, so
these are the usual ascent approximations.  The *_u variants follow one
gradient attack with n uniform offsets in [-u, +u]^d, which is how perturbed
evaluation sets are populated; plain uniform noise and the no-op generator
round out the menu.

Every emitted perturbation satisfies ||e||_inf <= budget, and when
clamp_input is set, x+e additionally stays in [0, 1]^d (clamping toward the
unit box never grows the l-inf norm because x itself lies in the box).
"""

import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nets, posterior
from .errors import ContractError
from .rng import stream

KINDS = ("none", "unif", "fgsm", "ifgsm", "pgd", "ifgsm_u", "pgd_u")
GRADIENT_KINDS = ("fgsm", "ifgsm", "pgd")
OFFSET_KINDS = ("ifgsm_u", "pgd_u")


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    budget: float
    iterations: int = 100
    step_size: float = 0.008
    uniform_offset: float = 0.01
    n_perturbations: int = 1
    clamp_input: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown attack kind {self.kind!r}")
        if self.budget < 0:
            raise ContractError("budget must be non-negative")
        if self.step_size <= 0:
            raise ContractError("step_size must be positive")
        if not (0 <= self.uniform_offset <= self.budget or self.kind not in OFFSET_KINDS):
            raise ContractError("uniform_offset must lie in [0, budget]")
        if self.n_perturbations < 1:
            raise ContractError("n_perturbations must be >= 1")
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return AttackConfig(**d)


@dataclass(frozen=True)
class PerturbedSample:
    x: np.ndarray       # (d,)
    y: int              # -1 or +1
    eps: np.ndarray     # (n, d)

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "eps", np.asarray(self.eps, dtype=np.float64))
        if self.y not in (-1, 1):
            raise ContractError("label must be -1 or +1")
        if self.eps.ndim != 2 or self.eps.shape[1] != self.x.shape[0]:
            raise ContractError("eps must be (n, d) matching x")

    @property
    def n(self) -> int:
        return self.eps.shape[0]


def sign_pm1(g) -> np.ndarray:
    """Gradient sign with the tie convention sign(0) = +1."""
    return np.where(np.asarray(g) >= 0.0, 1.0, -1.0)


def clip_linf(eps, budget) -> np.ndarray:
    return np.clip(eps, -budget, budget)


def _clamp_to_box(x, eps):
    return np.clip(x + eps, 0.0, 1.0) - x


def _loss_grad_x(spec, w, X, Y):
    """Per-example input gradient of the linear loss (1 - y h(x))/2."""
    _, _, gX = nets.score_and_grads(spec, w, X, lambda s: -0.5 * Y,
                                    need_wgrad=False, need_xgrad=True)
    return gX


def attack_batch(cfg: AttackConfig, spec, w, X, Y, rng=None, starts=None):
    """Run one gradient attack on every row of X; returns (B, d) perturbations.

    pgd draws its random start from rng (or uses the provided starts, one row
    per example, enabling per-example reproducible streams).
    """
    if cfg.kind not in GRADIENT_KINDS:
        raise ContractError(f"{cfg.kind!r} is not a gradient attack")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0])
    b = cfg.budget
    if cfg.kind == "fgsm":
        eps = b * sign_pm1(_loss_grad_x(spec, w, X, Y))
    else:
        if cfg.kind == "pgd":
            if starts is not None:
                eps = np.array(starts, dtype=np.float64)
            else:
                if rng is None:
                    raise ContractError("pgd needs an rng stream for its random start")
                eps = rng.uniform(-b, b, X.shape)
        else:
            eps = np.zeros_like(X)
        for _ in range(cfg.iterations):
            g = _loss_grad_x(spec, w, X + eps, Y)
            eps = clip_linf(eps + cfg.step_size * sign_pm1(g), b)
    if cfg.clamp_input:
        eps = _clamp_to_box(X, eps)
    return eps


def attack_once(cfg: AttackConfig, spec, w, x, y, rng=None):
    """Single-example gradient attack; see attack_batch."""
    x = np.asarray(x, dtype=np.float64)
    return attack_batch(cfg, spec, w, x[None, :], [y], rng=rng)[0]


def unif_noise(cfg: AttackConfig, x, rng):
    """Uniform noise in [-b, +b]^d (the naive defense)."""
    if cfg.kind != "unif":
        raise ContractError("unif_noise requires kind='unif'")
    x = np.asarray(x, dtype=np.float64)
    eps = rng.uniform(-cfg.budget, cfg.budget, x.shape)
    return _clamp_to_box(x, eps) if cfg.clamp_input else eps


def build_perturbation_set(cfg: AttackConfig, spec, w, x, y, n, rng) -> PerturbedSample:
    """Materialize the n-perturbation list for one example.

    Draw order is fixed (attack randomness first, then one offset per slot) so
    the first n' rows built with a given stream equal the set built for n'
    with the same stream — the prefix property the risk estimators rely on.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    if cfg.kind == "none":
        eps = np.zeros((n, d))
    elif cfg.kind == "unif":
        base = replace(cfg, clamp_input=False)
        eps = np.stack([unif_noise(base, x, rng) for _ in range(n)])
    elif cfg.kind in OFFSET_KINDS:
        base = replace(cfg, kind=cfg.kind[:-2], clamp_input=False)
        eps0 = attack_once(base, spec, w, x, y, rng=rng)
        u = cfg.uniform_offset
        eps = np.stack([clip_linf(eps0 + rng.uniform(-u, u, d), cfg.budget)
                        for _ in range(n)])
    else:
        raise ContractError(f"kind {cfg.kind!r} does not define a perturbation set")
    if cfg.clamp_input:
        eps = _clamp_to_box(x, eps)
    return PerturbedSample(x, int(y), eps)


def attack_target_for_eval(prior: posterior.GaussianPosterior, master_seed: int,
                           tag: str = "eval-attack-target") -> np.ndarray:
    """The white-box target used when generating perturbed evaluation sets:
    one network sampled from the reference distribution."""
    return posterior.sample(prior, stream(master_seed, tag))


def build_eval_set(cfg: AttackConfig, spec, w_target, X, Y, n, master_seed,
                   tag="perturbed-set"):
    """Perturbation sets for a whole dataset against one target network.

    Per-example streams are keyed by (master_seed, tag, example index), and the
    result row-for-row equals calling build_perturbation_set example by
    example; the gradient loop itself runs batched for speed.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y)
    m, d = X.shape
    if cfg.kind == "none":
        return [PerturbedSample(X[i], int(Y[i]), np.zeros((n, d))) for i in range(m)]
    rngs = [stream(master_seed, tag, i) for i in range(m)]
    if cfg.kind == "unif":
        out = []
        for i in range(m):
            eps = np.stack([rngs[i].uniform(-cfg.budget, cfg.budget, d) for _ in range(n)])
            if cfg.clamp_input:
                eps = _clamp_to_box(X[i], eps)
            out.append(PerturbedSample(X[i], int(Y[i]), eps))
        return out
    if cfg.kind not in OFFSET_KINDS:
        raise ContractError(f"kind {cfg.kind!r} does not define a perturbation set")
    base_kind = cfg.kind[:-2]
    base = replace(cfg, kind=base_kind, clamp_input=False)
    starts = None
    if base_kind == "pgd":
        starts = np.stack([rngs[i].uniform(-cfg.budget, cfg.budget, d) for i in range(m)])
    eps0 = attack_batch(base, spec, w_target, X, Y, starts=starts)
    out = []
    u = cfg.uniform_offset
    for i in range(m):
        eps = np.stack([clip_linf(eps0[i] + rngs[i].uniform(-u, u, d), cfg.budget)
                        for _ in range(n)])
        if cfg.clamp_input:
            eps = _clamp_to_box(X[i], eps)
        out.append(PerturbedSample(X[i], int(Y[i]), eps))
    return out


# ---------------------------------------------------------------------------
# Persistence: binary record stream + JSON sidecar carrying the config.
# Records reference examples by index; certificates are only meaningful
# against the dataset hash and attack config stored in the sidecar.

SET_MAGIC = b"PBES0001"


def save_perturbed_set(path, samples, cfg: AttackConfig, meta=None):
    d = samples[0].x.shape[0]
    with open(path, "wb") as fh:
        fh.write(SET_MAGIC + struct.pack("<II", d, len(samples)))
        for i, s in enumerate(samples):
            fh.write(struct.pack("<IiI", i, int(s.y), s.n))
            fh.write(np.ascontiguousarray(s.eps, dtype="<f4").tobytes())
    sidecar = {"attack": cfg.to_dict(), "d": d, "m": len(samples)}
    sidecar.update(meta or {})
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)


def load_perturbed_set(path, X, Y):
    """Rehydrate against the dataset rows the records index into."""
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    samples = []
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != SET_MAGIC:
        raise ContractError("bad perturbed-set magic")
    d, m = struct.unpack("<II", blob[8:16])
    off = 16
    for _ in range(m):
        idx, y, n = struct.unpack("<IiI", blob[off:off + 12])
        off += 12
        eps = np.frombuffer(blob[off:off + 4 * n * d], dtype="<f4").reshape(n, d)
        off += 4 * n * d
        if int(Y[idx]) != y:
            raise ContractError(f"label mismatch at example {idx}; wrong dataset?")
        samples.append(PerturbedSample(X[idx], y, eps.astype(np.float64)))
    return samples, sidecar
