import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qbdspin import lattice as qlat
from qbdspin import montecarlo as qmc

# literature value for the nearest-neighbor cubic classical Heisenberg
# ordering temperature in per-bond units
T_C_CUBIC_NN = 1.4429

TC_SIZES = (4, 6, 8)
TC_GRID = (1.32, 1.36, 1.40, 1.44, 1.48, 1.52, 1.56)
TC_PARAMS = dict(sweeps=24000, burn_in=6000, thin=2)


def _tc_factory(sign):
    def factory(L):
        lat = qlat.build_lattice(3, [L] * 3, 1.0, True)
        return lat, qlat.nn_table(lat, 1.0, sign=sign)
    return factory


def _run_tc_study(sign, seed):
    params = qmc.ChainParams(T=1.0, seed=seed, **TC_PARAMS)
    t0 = time.time()
    est = qmc.estimate_Tc(TC_SIZES, _tc_factory(sign), TC_GRID, params,
                          workers=3, keep_series=True)
    return est, time.time() - t0


@pytest.fixture(scope="session")
def tc_study_fm():
    """Binder study of the ferromagnetic NN cubic model, shared between the
    acceptance suite and the specific-heat consistency test.  Returns
    (TcEstimate with series kept, elapsed seconds)."""
    return _run_tc_study(sign=1, seed=20)


@pytest.fixture(scope="session")
def tc_study_afm():
    return _run_tc_study(sign=-1, seed=21)
