"""Classical Heisenberg spin-lattice simulator whose exchange couplings come
from a screened photon propagator, with Monte Carlo thermodynamics,
spin-wave dispersions and damped memory-recall dynamics."""

__version__ = "0.1.0"

from .kernel import KernelSpec, KernelValue, closed_form, kernel_quadrature, \
    yukawa_closed_form
from .lattice import (CouplingTable, Lattice, SpinConfig, build_coupling_table,
                      build_lattice, nn_table, random_config, reference_config)
from .model import EnergyReport, energy_delta, local_field, total_energy
from .montecarlo import (ChainParams, ObservableSeries, TcEstimate,
                         binder_cumulant, estimate_Tc, metropolis_sweep,
                         run_chain, susceptibility_and_heat)
from .spinwave import (DispersionCurve, afm_dispersion, fm_dispersion,
                       lattice_fourier_J, smallk_exponent)
from .dynamics import (MemoryRecord, Trajectory, evolve_damped, measure_recall,
                       recall_pulse, store_memory)
