import numpy as np
import pytest

from slipflow import _kernels
from slipflow.dynamics import Simulator, build_noise, make_initial_coeffs

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba unavailable")


@pytest.fixture()
def sim(basis_small, cache_small):
    noise = build_noise(basis_small.size, 2, 0.05, 1.0, 7, [0.1, 0.05])
    return Simulator(basis_small, cache_small, noise, t_final=0.3, dt=0.005)


def _run_both(sim, **kw):
    prev = _kernels.active_backend()
    try:
        _kernels.set_backend("numpy")
        t_np = sim.run(**kw)
        _kernels.set_backend("numba")
        t_nb = sim.run(**kw)
    finally:
        _kernels.set_backend(prev)
    return t_np, t_nb


@needs_numba
def test_backends_agree(sim, make_control):
    ctrl = make_control(2 * np.pi, 2, [0.0, 0.5], 0.3, seed=77)
    b0 = make_initial_coeffs(sim.ops.n, "random", 3, 0.5, 1.0)
    t_np, t_nb = _run_both(sim, seed=4, ctrl=ctrl, u0=b0, store_beta=True)
    assert np.abs(t_np.beta_series - t_nb.beta_series).max() < 1e-12
    assert np.abs(t_np.u_sq - t_nb.u_sq).max() < 1e-12
    assert np.abs(t_np.tracking - t_nb.tracking).max() < 1e-12
    assert np.abs(t_np.noise_sq - t_nb.noise_sq).max() < 1e-12
    assert t_np.blown_up == t_nb.blown_up


@needs_numba
def test_backends_agree_on_blowup(basis_small):
    from slipflow.dynamics import NoiseModel

    n = basis_small.size
    noise = NoiseModel(additive=np.zeros((n, 1)), mult_gain=np.array([0.0]))
    sim = Simulator(basis_small, None, noise, t_final=1.0, dt=0.5,
                    include_nonlinear=False, blowup_limit=1e4)
    t_np, t_nb = _run_both(sim, seed=0, u0=10.0 * np.ones(n), noise_on=False)
    assert t_np.blown_up and t_nb.blown_up
    assert t_np.blowup_step == t_nb.blowup_step


def test_backend_selection_guard():
    with pytest.raises(ValueError):
        _kernels.set_backend("gpu")


def test_rerun_bitwise_same_backend(sim):
    b0 = make_initial_coeffs(sim.ops.n, "random", 3, 0.5, 1.0)
    a = sim.run(seed=11, u0=b0, store_beta=True)
    b = sim.run(seed=11, u0=b0, store_beta=True)
    assert np.array_equal(a.beta_series, b.beta_series)
