import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from pbvote import attacks, bounds, nets, posterior
from pbvote.errors import ContractError


def test_binary_kl_zero_on_diagonal():
    for q in (0.0, 0.3, 1.0):
        assert bounds.binary_kl(q, q) == 0.0


def test_binary_kl_closed_form_at_zero():
    for p in (0.1, 0.5, 0.9):
        assert bounds.binary_kl(0.0, p) == pytest.approx(-math.log(1 - p), rel=1e-15)


def test_binary_kl_against_high_precision_oracle():
    getcontext().prec = 60
    q, p = Decimal("0.1"), Decimal("0.3")
    oracle = q * (q / p).ln() + (1 - q) * ((1 - q) / (1 - p)).ln()
    assert bounds.binary_kl(0.1, 0.3) == pytest.approx(float(oracle), rel=1e-12)


def test_binary_kl_boundary_and_domain():
    assert bounds.binary_kl(0.5, 0.0) == math.inf
    assert bounds.binary_kl(0.5, 1.0) == math.inf
    with pytest.raises(ContractError):
        bounds.binary_kl(-0.1, 0.5)
    with pytest.raises(ContractError):
        bounds.binary_kl(0.5, 1.5)


def test_kl_inverse_zero_budget_returns_empirical():
    for q in (0.0, 0.2, 0.7, 1.0):
        assert bounds.kl_inverse_sup(q, 0.0) == q


def test_kl_inverse_closed_form_at_zero_empirical():
    for c in (0.01, 0.1, 1.0, 3.0):
        assert bounds.kl_inverse_sup(0.0, c) == pytest.approx(1 - math.exp(-c), abs=1e-9)


def test_kl_inverse_against_grid_search():
    q, c = 0.2, 0.05
    grid = np.arange(q, 1.0, 1e-7)
    grid = grid[grid < 1.0]
    kl = q * np.log(q / grid) + (1 - q) * np.log((1 - q) / (1 - grid))
    oracle = grid[np.nonzero(kl <= c)[0][-1]]
    assert bounds.kl_inverse_sup(q, c) == pytest.approx(oracle, abs=2e-7)


def test_kl_inverse_composition_and_monotonicity():
    rng = np.random.default_rng(0)
    prev_cols = None
    for _ in range(200):
        q = float(rng.uniform(0, 1))
        c = float(rng.uniform(0, 3))
        r = bounds.kl_inverse_sup(q, c)
        assert q <= r <= 1.0
        assert bounds.binary_kl(q, r) <= c + 1e-8
        assert bounds.kl_inverse_sup(q, c + 0.1) >= r
        if q < 0.9:
            assert bounds.kl_inverse_sup(min(q + 0.05, 1.0), c) >= r - 1e-12


def _bi(emp=0.0, emp_max=0.0, kl=0.0, tv=0.0, m=5000, n=50, N=100, T=1, delta=0.05):
    return bounds.BoundInputs(emp_avg_surrogate=emp, emp_avgmax_surrogate=emp_max,
                              kl=kl, tv=tv, m=m, n=n, n_voters=N, n_priors=T,
                              delta=delta)


def test_bound_avg_seeger_trivial_inputs_closed_form():
    # with zero empirical risk the kl inverse has the closed form 1 - e^{-c}
    bi = _bi()
    c = math.log(5001 / 0.05) / 5000
    assert bounds.bound_avg_seeger(bi) == pytest.approx(1 - math.exp(-c), abs=1e-9)
    assert bounds.bound_avg_seeger(bi) == pytest.approx(0.002300, abs=5e-6)


def test_bound_avg_seeger_vacuous_on_infinite_kl():
    bi = _bi(emp=0.5, kl=math.inf)
    assert bounds.bound_avg_seeger(bi) == 1.0


def test_bound_avg_seeger_monotone_in_kl():
    rng = np.random.default_rng(1)
    for _ in range(100):
        emp = float(rng.uniform(0, 0.9))
        kl1 = float(rng.uniform(0, 50))
        kl2 = kl1 + float(rng.uniform(0, 50))
        m = int(rng.integers(10, 10_000))
        b1 = bounds.bound_avg_seeger(_bi(emp=emp, emp_max=emp, kl=kl1, m=m))
        b2 = bounds.bound_avg_seeger(_bi(emp=emp, emp_max=emp, kl=kl2, m=m))
        assert b2 >= b1


def test_bound_avg_pinsker_direct_formula():
    bi = _bi()
    expect = math.sqrt(math.log(5001 / 0.05) / 10_000)
    assert bounds.bound_avg_pinsker(bi) == pytest.approx(expect, rel=1e-12)
    assert bounds.bound_avg_pinsker(bi) == pytest.approx(0.0339, abs=5e-4)


def test_bound_avg_pinsker_vacuous_at_full_empirical_risk():
    assert bounds.bound_avg_pinsker(_bi(emp=1.0)) >= 1.0


def test_seeger_never_exceeds_pinsker():
    rng = np.random.default_rng(2)
    for _ in range(300):
        bi = _bi(emp=float(rng.uniform(0, 1)), kl=float(rng.uniform(0, 80)),
                 m=int(rng.integers(1, 20_000)), T=int(rng.integers(1, 200)),
                 delta=float(rng.uniform(0.001, 0.5)))
        assert bounds.bound_avg_seeger(bi) <= bounds.bound_avg_pinsker(bi)


def test_bound_avgmax_direct_formula():
    bi = _bi()
    expect = math.sqrt(math.log(2 * math.sqrt(5000) / 0.05) / 10_000)
    assert bounds.bound_avgmax(bi) == pytest.approx(expect, rel=1e-12)
    assert bounds.bound_avgmax(bi) == pytest.approx(0.02822, abs=5e-5)


def test_bound_avgmax_tv_is_additive():
    base = bounds.bound_avgmax(_bi())
    assert bounds.bound_avgmax(_bi(tv=0.25)) == pytest.approx(base + 0.25, rel=1e-12)


def test_avgmax_vs_pinsker_differ_only_in_log_constant():
    # with identical empirical risks and KL the two relaxations differ only
    # through ln(T(m+1)) vs ln(2T sqrt(m))
    bi = _bi(emp=0.3, emp_max=0.3, kl=2.0, m=4000)
    gap9 = bounds.bound_avg_pinsker(bi) - bi.emp_avg_surrogate
    gap10 = bounds.bound_avgmax(bi) - bi.emp_avgmax_surrogate
    pen9 = math.sqrt((2.0 + math.log(1 * 4001 / 0.05)) / 8000)
    pen10 = math.sqrt((2.0 + math.log(2 * math.sqrt(4000) / 0.05)) / 8000)
    assert gap9 == pytest.approx(pen9, rel=1e-12)
    assert gap10 == pytest.approx(pen10, rel=1e-12)
    assert gap10 < gap9  # 2 sqrt(m) < m + 1 for m >= 4


def test_lift_to_01():
    assert bounds.lift_to_01(0.5) == 1.0
    assert bounds.lift_to_01(0.14285) == pytest.approx(0.2857, abs=1e-12)
    assert bounds.lift_to_01(0.7) == 1.4  # vacuous values reported as-is
    a, b = sorted(np.random.default_rng(3).uniform(0, 1, 2))
    assert bounds.lift_to_01(a) <= bounds.lift_to_01(b)


# ---------------------------------------------------------------------------
# TV term.

def two_voter_disagreement_fixture():
    spec = nets.mlp(1, ())
    ens = posterior.VoterEnsemble(spec, np.array([[1.0, 0.0], [-1.0, 0.0]]), 0)
    data = [attacks.PerturbedSample(np.zeros(1), 1, np.array([[-0.1], [0.1]])),
            attacks.PerturbedSample(np.array([0.5]), 1, np.array([[-0.2], [0.2]]))]
    return ens, data


def test_tv_term_zero_for_single_voter():
    spec = nets.mlp(1, ())
    ens = posterior.VoterEnsemble(spec, np.array([[1.3, -0.2]]), 0)
    data = [attacks.PerturbedSample(np.array([0.4]), -1,
                                    np.random.default_rng(4).uniform(-0.1, 0.1, (5, 1)))]
    assert bounds.tv_term(ens, data) == 0.0


def test_tv_term_zero_when_all_voters_agree():
    spec = nets.mlp(1, ())
    # identical voters necessarily share every argmax
    ens = posterior.VoterEnsemble(spec, np.array([[1.0, 0.0]] * 4), 0)
    data = [attacks.PerturbedSample(np.array([0.3]), 1, np.array([[-0.1], [0.1], [0.05]]))]
    assert bounds.tv_term(ens, data) == 0.0


def test_tv_term_total_disagreement_is_half():
    # two voters with mirrored weights disagree about the worst perturbation
    # on every example: each per-voter TV is 1/2
    ens, data = two_voter_disagreement_fixture()
    assert bounds.tv_term(ens, data) == 0.5


def test_tv_term_within_unit_interval():
    rng = np.random.default_rng(5)
    spec = nets.mlp(2, (3,))
    for _ in range(20):
        ens = posterior.VoterEnsemble(spec, rng.normal(0, 1, (4, spec.n_params)), 0)
        data = [attacks.PerturbedSample(rng.random(2), int(rng.choice([-1, 1])),
                                        rng.uniform(-0.2, 0.2, (3, 2)))
                for _ in range(5)]
        assert 0.0 <= bounds.tv_term(ens, data) <= 1.0


# ---------------------------------------------------------------------------
# Reports.

def sample_report():
    bi = _bi(emp=0.12, emp_max=0.18, kl=7.5, tv=0.03, m=1000, n=10, N=30, T=20)
    return bounds.assemble_report(
        bi, test_avg01=0.2, test_avgmax01=0.25, test_avg_surrogate=0.3,
        test_avgmax_surrogate=0.33,
        defense={"kind": "pgd_u"}, attack={"kind": "pgd_u"}, budget=0.1,
        seeds={"train": 0, "certify": 1}, backend="python",
        extra={"chosen_epoch": 3})


def test_report_roundtrip_bit_exact(tmp_path):
    rep = sample_report()
    path = tmp_path / "report.json"
    bounds.save_report(path, rep)
    again = bounds.load_report(path)
    assert again == rep
    assert again.dumps() == rep.dumps()
    # serialized floats survive a second round trip unchanged
    path2 = tmp_path / "report2.json"
    bounds.save_report(path2, again)
    assert path.read_text() == path2.read_text()


def test_report_doubles_surrogate_bounds():
    rep = sample_report()
    assert rep.cert_avg_seeger == 2 * rep.bound_avg_seeger
    assert rep.cert_avgmax == 2 * rep.bound_avgmax
    assert rep.bound_avg_seeger <= rep.bound_avg_pinsker


def test_csv_row_layout():
    rep = sample_report()
    header = bounds.csv_header().split(",")
    row = bounds.csv_row(rep).split(",")
    assert len(header) == len(row)
    assert header == ["defense", "attack", "budget", "n", "risk", "avg_certificate",
                      "avgmax_risk", "avgmax_certificate"]
    assert row[0] == "pgd_u" and row[2] == "0.1" and row[3] == "10"
    assert float(row[4]) == pytest.approx(0.2, abs=5e-5)


def test_bound_inputs_validation():
    with pytest.raises(ContractError):
        _bi(delta=1.5)
    with pytest.raises(ContractError):
        _bi(emp=1.2)
    with pytest.raises(ContractError):
        bounds.BoundInputs(0.1, 0.1, -1.0, 0.0, 10, 1, 1, 1, 0.05)
