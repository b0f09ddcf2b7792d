import numpy as np
import pytest

from mhdstab.mms import ManufacturedCase, eval_exact, eval_forcing, solenoidality_check

from .oracles import fd_divergence, fd_forcing

NUS = [(1.0, 1.0), (1e-10, 1e-2)]


def fd_gate(case, samples=200, seed=0):
    """Largest absolute gap between analytic and finite-difference forcing
    at random interior space-time points."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        x = rng.uniform(0.05, 0.95, size=3)
        t = rng.uniform(0.05, 1.0)
        f_fd, g_fd = fd_forcing(case, x, t)
        worst = max(
            worst,
            np.abs(case.eval_forcing("f", x, t) - f_fd).max(),
            np.abs(case.eval_forcing("G", x, t) - g_fd).max(),
        )
    return worst


@pytest.mark.parametrize("name", ["example1", "example2"])
@pytest.mark.parametrize("nus", NUS)
def test_forcing_matches_finite_differences(name, nus):
    assert fd_gate(ManufacturedCase(name, *nus), samples=60, seed=1) <= 1e-6


@pytest.mark.parametrize("name", ["example1", "example2"])
def test_origin_values(name):
    case = ManufacturedCase(name, 1.0, 1.0)
    o = np.zeros(3)
    for t in (0.0, 0.4, 1.0):
        assert np.abs(eval_exact(case, "u", o, t)).max() == 0
    assert np.abs(eval_exact(case, "B", o, 0.0)).max() == 0
    assert abs(float(np.squeeze(eval_exact(case, "p", o, 0.0)))) < 1e-15


def test_example1_quarter_period():
    case = ManufacturedCase("example1", 1.0, 1.0)
    rng = np.random.default_rng(2)
    for x in rng.uniform(0, 1, size=(20, 3)):
        f = eval_forcing(case, "f", x, 2.0)
        b = case.eval_exact("B", x, 2.0)
        # at t=2 the velocity vanishes, so f holds the time derivative and the
        # terms that do not involve u
        rest = np.cross(b, case.curl_B(x[None], 2.0)[0]) - case.grad_p(x[None], 2.0)[0]
        assert np.allclose(f, case.dt_u(x[None], 2.0)[0] + rest, atol=1e-12)
        assert np.abs(case.eval_exact("u", x, 2.0)).max() < 1e-15


def test_example2_initial_forcing():
    case = ManufacturedCase("example2", 1e-10, 1e-2)
    rng = np.random.default_rng(3)
    for x in rng.uniform(0, 1, size=(20, 3)):
        b = case.B(x[None], 0.0)[0]
        expected = np.cross(b, case.curl_B(x[None], 0.0)[0]) - case.grad_p(x[None], 0.0)[0]
        assert np.abs(case.u(x[None], 0.0)).max() == 0
        assert np.abs(case.dt_u(x[None], 0.0)).max() == 0
        assert np.allclose(eval_forcing(case, "f", x, 0.0), expected, atol=1e-12)
        f_fd, _ = fd_forcing(case, x, 1e-2)
        assert np.allclose(eval_forcing(case, "f", x, 1e-2), f_fd, atol=1e-6)


@pytest.mark.parametrize("name", ["example1", "example2"])
def test_solenoidal(name):
    du, db = solenoidality_check(ManufacturedCase(name, 1.0, 1.0), samples=500)
    assert du <= 1e-12 and db <= 1e-12


@pytest.mark.parametrize("name", ["example1", "example2"])
def test_fd_divergence(name):
    case = ManufacturedCase(name, 1.0, 1.0)
    rng = np.random.default_rng(4)
    for _ in range(100):
        x = rng.uniform(0, 1, size=3)
        t = rng.uniform(0, 1)
        for tag, grad in (("u", case.grad_u), ("B", case.grad_B)):
            analytic = np.trace(grad(x[None], t)[0])
            fd = fd_divergence(lambda y: case.eval_exact(tag, y, t), x)
            assert abs(fd - analytic) <= 1e-6


def test_velocity_normal_component_vanishes():
    case = ManufacturedCase("example1", 1.0, 1.0)
    rng = np.random.default_rng(5)
    for axis in range(3):
        for side in (0.0, 1.0):
            x = rng.uniform(0, 1, size=(30, 3))
            x[:, axis] = side
            for t in (0.0, 0.7):
                assert np.abs(case.u(x, t)[:, axis]).max() < 1e-14


def test_magnetic_boundary_data_definition():
    case = ManufacturedCase("example1", 0.3, 0.2)
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 1, size=(10, 3))
    n = np.tile([0.0, 0.0, 1.0], (10, 1))
    got = case.magnetic_boundary_data(x, n, 0.4)
    uxb = np.cross(case.u(x, 0.4), case.B(x, 0.4))
    expected = np.cross(n, uxb) - 0.2 * np.cross(n, case.curl_B(x, 0.4))
    assert np.allclose(got, expected, atol=1e-14)


def test_rejects_unknown_case():
    with pytest.raises(ValueError):
        ManufacturedCase("example3", 1.0, 1.0)
    with pytest.raises(ValueError):
        ManufacturedCase("example1", 1.0, 1.0).eval_exact("q", np.zeros(3), 0.0)
