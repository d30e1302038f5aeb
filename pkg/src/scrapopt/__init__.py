"""Optimal control of Stark-chirped rapid adiabatic passage in a Lambda system."""

from scrapopt.model import (
    ControlSample,
    DensityMatrix,
    Regime,
    SystemParams,
    build_hamiltonian,
    crossing_times,
    diabatic_energies,
    validate_regime,
)
from scrapopt.pulses import (
    GaussianTerm,
    PulseSet,
    Schedule,
    reference_gaussian_pulses,
    sample_pulse,
    sample_schedule,
    standard_scrap_pulses,
)
from scrapopt.dynamics import (
    NumericalError,
    PropagationRecord,
    backward_costates,
    population_trace,
    propagate,
    step_propagator,
)
from scrapopt.optimizer import (
    GradientVector,
    OptimizationProblem,
    averaged_objective,
    control_gradient,
    fidelity,
    greedy_point_selection,
    optimize,
    parameter_gradients,
)
from scrapopt.sweep import (
    DetuningGrid,
    FidelityMap,
    area_above,
    fidelity_map,
    log_increase_map,
    mean_fidelity,
)

__version__ = "0.1.0"
