import numpy as np
import pytest

from uveqfed import analysis, datamodel as dm, flsim
from uveqfed.analysis import TheoryConstants, check_distortion_law, mean_test_threshold
from uveqfed.codec import UVeQFedConfig, ZETA_THREE_SIGMA
from uveqfed.errors import InvalidInputError


def test_mean_threshold_reduces_to_four_sigma():
    assert mean_test_threshold(1) == pytest.approx(4.0, abs=1e-9)
    assert mean_test_threshold(4096) > 5.0


def test_distortion_law_scalar_single_entry_reduces_to_uniform_noise():
    # one entry, one block: predicted energy is zeta^2 h^2 / 12
    cfg = UVeQFedConfig(lattice="scalar", zeta=1.0, rate=None,
                        rate_constrained=False, master_seed=2)
    h = np.array([0.37])
    report = check_distortion_law(cfg, [h], trials=40_000)
    row = report.rows[0]
    assert row.predicted == pytest.approx(0.37 ** 2 / 12.0, rel=1e-2)
    assert row.energy_ok and row.mean_ok
    assert 0.98 < row.ratio < 1.02


def test_distortion_law_hex_golden_ratio():
    cfg = UVeQFedConfig(lattice="hex", zeta=ZETA_THREE_SIGMA, rate=None,
                        rate_constrained=False, master_seed=3)
    rng = np.random.default_rng(4)
    report = check_distortion_law(cfg, [rng.normal(size=256)], trials=10_000)
    assert 0.98 < report.rows[0].ratio < 1.02
    assert report.passed


def test_distortion_law_requires_pinned_scale():
    cfg = UVeQFedConfig(lattice="hex", rate=4.0, master_seed=1)
    with pytest.raises(InvalidInputError):
        analysis.conditional_error_monte_carlo(cfg, np.ones(8), 10)


def test_theory_constants_formulas():
    c = TheoryConstants(rho_s=5.0, rho_c=0.5, tau=4, zeta=0.3, num_blocks=32,
                        sigma_sq=0.185, psi=0.2, xi_sq=(2.0, 3.0),
                        alphas=(0.5, 0.5))
    assert c.gamma == 4 * max(1.0, 4 * 5.0 / 0.5)
    quant = 1 + 4 * 32 * 0.3 ** 2 * 0.185 * 16
    expected_b = quant * (0.25 * 2 + 0.25 * 3) + 6 * 5.0 * 0.2 \
        + 8 * 9 * (0.5 * 2 + 0.5 * 3)
    assert c.b == pytest.approx(expected_b, rel=1e-12)
    rhs = analysis.convergence_bound_rhs(c, t=100.0, delta0=2.0)
    inner = max((0.5 ** 2 + 16 * c.b) / (4 * 0.5), c.gamma * 2.0)
    assert rhs == pytest.approx(5.0 / (2 * (100 + c.gamma)) * inner)


def test_aggregation_bound_report_on_short_run():
    model, users = dm.make_linreg_users(3, 10, 25, seed=6, heterogeneity=0.2,
                                        lam=0.1)
    rho_s, rho_c = dm.smooth_strong_convex_constants(model, users)
    alphas = np.full(3, 1 / 3)
    logs = []
    for s in (7, 8):
        cfg = flsim.FederationConfig(
            num_users=3, tau=2, total_rounds=12,
            compressor=flsim.CompressorSpec(kind="uveqfed-l2", rate=4.0,
                                            norm_rms_cap=0.1),
            alphas=tuple(alphas), schedule=("decay", rho_c, rho_s),
            batch_size=1, master_seed=s)
        logs.append(flsim.run_federation(cfg, model, users))
    xi = analysis.estimate_xi_sq(logs, model, users)
    report = analysis.check_aggregation_bound(logs, xi, alphas)
    assert report.measured_mean.shape == (12,)
    assert report.frac_ok == 1.0 and report.passed


def test_convergence_bound_report_structure():
    rng = np.random.default_rng(9)
    steps = np.arange(1, 41) * 4.0
    sub = 50.0 / steps * (1 + 0.01 * rng.normal(size=40))

    class FakeLog:
        def __init__(self):
            self.steps = steps
            self.loss = sub + 1.0

    c = TheoryConstants(rho_s=2.0, rho_c=1.0, tau=4, zeta=0.5, num_blocks=8,
                        sigma_sq=0.08, psi=0.05, xi_sq=(4.0,), alphas=(1.0,))
    report = analysis.check_convergence_bound([FakeLog(), FakeLog()], c, f_opt=1.0,
                                     delta0=100.0)
    assert report.slope == pytest.approx(-1.0, abs=0.05)
    assert report.slope_ok


def test_distortion_sweep_smoke(tmp_path):
    res = analysis.distortion_sweep("iid", rates=(3.0,),
                                    compressors=("uveqfed-l1", "qsgd"),
                                    realizations=2, master_seed=1, size=24)
    assert set(res.mse) == {("uveqfed-l1", 3.0), ("qsgd", 3.0)}
    assert all(v > 0 for v in res.mse.values())
    path = tmp_path / "sweep.csv"
    res.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "compressor,rate,mse,se"
    with pytest.raises(InvalidInputError):
        analysis.distortion_sweep("nope", rates=(3.0,))


def test_check_sweep_ordering_logic():
    class R:
        def __init__(self, kind, mse):
            self.kind, self.mse, self.rates = kind, mse, (2.0,)
    good = {("uveqfed-l2", 2.0): 1.0, ("uveqfed-l1", 2.0): 2.0,
            ("qsgd", 2.0): 3.0, ("rotated", 2.0): 4.0, ("masked", 2.0): 5.0}
    corr = {k: v * 2 for k, v in good.items()}
    corr[("uveqfed-l2", 2.0)] = 1.0  # bigger relative gain on correlated data
    checks = analysis.check_sweep_ordering(R("iid", good), R("correlated", corr))
    assert checks["iid-ordering-R2.0"]
    assert checks["correlation-gain-R2.0"]
    bad = dict(good)
    bad[("qsgd", 2.0)] = 0.5
    checks = analysis.check_sweep_ordering(R("iid", bad), R("correlated", corr))
    assert not checks["iid-ordering-R2.0"]
