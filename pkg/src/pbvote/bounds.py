"""Risk certificates: binary kl inversion and the three bound flavors.

All bounds hold at the surrogate (linear-loss) level and lift to the 0-1
majority-vote risk by a factor of 2; reports carry both numbers, and doubled
certificates above 1 are reported as-is (they are simply vacuous).

The complexity budgets, with m examples, T candidate priors folded in by a
union bound, and confidence delta:

  seeger:     kl(emp || true) <= (KL + ln(T(m+1)/delta)) / m     -> invert kl
  pinsker:    true <= emp + sqrt((KL + ln(T(m+1)/delta)) / 2m)
  averaged-max: true <= emp_max + TV + sqrt((KL + ln(2T sqrt(m)/delta)) / 2m)

where the TV term charges the disagreement among voters about which
perturbation in each example's list is the worst one.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import risks
from .errors import ContractError


def binary_kl(q: float, p: float) -> float:
    """kl between Bernoulli(q) and Bernoulli(p), with 0*ln(0) = 0."""
    if not (0.0 <= q <= 1.0 and 0.0 <= p <= 1.0):
        raise ContractError("binary_kl arguments must lie in [0, 1]")
    if q == p:
        return 0.0
    if p in (0.0, 1.0):
        return math.inf
    out = 0.0
    if q > 0.0:
        out += q * math.log(q / p)
    if q < 1.0:
        out += (1.0 - q) * math.log((1.0 - q) / (1.0 - p))
    return out


KL_INV_TOL = 1e-9
_BISECT_ITERS = 80


def kl_inverse_sup(q_emp: float, c: float) -> float:
    """Largest r in [q_emp, 1] with kl(q_emp || r) <= c, via bisection.

    The loop runs to float convergence (80 halvings), far inside the
    documented KL_INV_TOL guarantee; the returned value always satisfies the
    kl constraint itself.
    """
    if not (0.0 <= q_emp <= 1.0):
        raise ContractError("empirical risk must lie in [0, 1]")
    if c < 0:
        raise ContractError("complexity budget must be non-negative")
    if c == 0.0 or q_emp == 1.0:
        return q_emp
    if math.isinf(c):
        return 1.0
    almost_one = np.nextafter(1.0, 0.0)
    if binary_kl(q_emp, almost_one) <= c:
        return float(almost_one)
    lo, hi = q_emp, 1.0  # kl(q||lo) = 0 <= c < kl(q||hi)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if binary_kl(q_emp, mid) <= c:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class BoundInputs:
    emp_avg_surrogate: float
    emp_avgmax_surrogate: float
    kl: float
    tv: float
    m: int
    n: int
    n_voters: int
    n_priors: int
    delta: float

    def __post_init__(self):
        if self.m < 1 or self.n_priors < 1 or self.n < 1 or self.n_voters < 1:
            raise ContractError("m, n, N and T must all be >= 1")
        if not (0.0 < self.delta < 1.0):
            raise ContractError("delta must lie in (0, 1)")
        for name in ("emp_avg_surrogate", "emp_avgmax_surrogate", "tv"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ContractError(f"{name}={v} outside [0, 1]")
        if self.kl < 0:
            raise ContractError("KL must be non-negative")


def seeger_budget(bi: BoundInputs) -> float:
    return (bi.kl + math.log(bi.n_priors * (bi.m + 1) / bi.delta)) / bi.m


def bound_avg_seeger(bi: BoundInputs) -> float:
    """Seeger-style certificate on the averaged surrogate risk."""
    return kl_inverse_sup(bi.emp_avg_surrogate, seeger_budget(bi))


def bound_avg_pinsker(bi: BoundInputs) -> float:
    """Pinsker relaxation of bound_avg_seeger; never tighter, easier to read."""
    return bi.emp_avg_surrogate + math.sqrt(seeger_budget(bi) / 2.0)


def bound_avgmax(bi: BoundInputs) -> float:
    """Certificate on the averaged-max surrogate risk, incl. the TV term."""
    budget = (bi.kl + math.log(2.0 * bi.n_priors * math.sqrt(bi.m) / bi.delta)) / bi.m
    return bi.emp_avgmax_surrogate + bi.tv + math.sqrt(budget / 2.0)


def lift_to_01(surrogate_bound: float) -> float:
    """Factor-2 lift from the surrogate level to the 0-1 vote risk.

    Values above 1 are reported as-is: a vacuous certificate is still a
    faithful one.
    """
    return 2.0 * surrogate_bound


def tv_term(ens, data, scores=None) -> float:
    """Mean voter disagreement about each example's worst perturbation.

    For voter k and example i, rho is a point mass on the loss-maximizing
    index (ties -> lowest); pi averages those point masses over the ensemble.
    The per-voter total variation is then 1 - pi(argmax_k), and the term is
    its mean over voters and examples.  Zero when N = 1 or when every voter
    agrees.
    """
    if scores is None:
        scores = risks.voter_score_tensor(ens, data)
    N, m, n = scores.shape
    y = np.asarray([s.y for s in data], dtype=np.float64)
    margins = y[None, :, None] * scores          # (N, m, n); loss max = margin min
    jstar = margins.argmin(axis=2)               # (N, m)
    total = 0.0
    for i in range(m):
        counts = np.bincount(jstar[:, i], minlength=n)
        pi = counts / N
        total += float(np.sum(counts * (1.0 - pi))) / N
    return total / m


# ---------------------------------------------------------------------------
# Reports.

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BoundReport:
    inputs: BoundInputs
    bound_avg_seeger: float
    bound_avg_pinsker: float
    bound_avgmax: float
    cert_avg_seeger: float
    cert_avg_pinsker: float
    cert_avgmax: float
    test_avg01: float
    test_avgmax01: float
    test_avg_surrogate: float
    test_avgmax_surrogate: float
    defense: dict
    attack: dict
    budget: float
    seeds: dict
    backend: str
    extra: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def __post_init__(self):
        if self.bound_avg_seeger > self.bound_avg_pinsker:
            raise ContractError("seeger bound exceeded its pinsker relaxation")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["inputs"] = asdict(self.inputs)
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "BoundReport":
        d = dict(d)
        d["inputs"] = BoundInputs(**d["inputs"])
        return BoundReport(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1)


def assemble_report(bi: BoundInputs, *, test_avg01, test_avgmax01,
                    test_avg_surrogate, test_avgmax_surrogate,
                    defense, attack, budget, seeds, backend, extra=None) -> BoundReport:
    b8, b9, b10 = bound_avg_seeger(bi), bound_avg_pinsker(bi), bound_avgmax(bi)
    return BoundReport(
        inputs=bi,
        bound_avg_seeger=b8, bound_avg_pinsker=b9, bound_avgmax=b10,
        cert_avg_seeger=lift_to_01(b8), cert_avg_pinsker=lift_to_01(b9), cert_avgmax=lift_to_01(b10),
        test_avg01=test_avg01, test_avgmax01=test_avgmax01,
        test_avg_surrogate=test_avg_surrogate,
        test_avgmax_surrogate=test_avgmax_surrogate,
        defense=defense, attack=attack, budget=budget,
        seeds=seeds, backend=backend, extra=extra or {},
    )


CSV_COLUMNS = ("defense", "attack", "budget", "n", "risk", "avg_certificate",
               "avgmax_risk", "avgmax_certificate")


def csv_header() -> str:
    return ",".join(CSV_COLUMNS)


def csv_row(report: BoundReport) -> str:
    """One row in the defense/attack result-table layout."""
    cells = (
        report.defense.get("kind", "none"),
        report.attack.get("kind", "none"),
        f"{report.budget:g}",
        str(report.inputs.n),
        f"{report.test_avg01:.4f}",
        f"{report.cert_avg_seeger:.4f}",
        f"{report.test_avgmax01:.4f}",
        f"{report.cert_avgmax:.4f}",
    )
    return ",".join(cells)


def save_report(path, report: BoundReport):
    with open(path, "w") as fh:
        fh.write(report.dumps())


def load_report(path) -> BoundReport:
    with open(path) as fh:
        return BoundReport.from_json_dict(json.load(fh))
