"""Exact simulation and verification lab for voter-model perturbations.

Rescaled competition models and general local perturbations of the voter
model, their monotone couplings with biased voter chains, coalescing
random-walk estimation of the limit constants, and statistical checks of
the measure-valued scaling limit.
"""

from ._backend import active_backend, compiled_available
from ._errors import BudgetError, DominationError, EngineError, PositivityError
from .config import ConfigError, ExperimentConfig, load_config
from .feller import (MPParams, euler_feller, extinction_probability,
                     feller_moments, feller_path, heat_blur, sbm_mean,
                     simulate_feller)
from .kernels import (KernelError, KernelSpec, ScalingParams,
                      build_fixed_kernel, build_long_range_kernel,
                      kernel_from_json, kernel_to_json, local_density,
                      nearest_neighbor_kernel)
from .observables import (Constant, DecompositionReport, EmpiricalMeasure,
                          GaussianBump, SmoothIndicator, TestFn,
                          TimeDependent, catalog, decompose,
                          empirical_measure, generator_gap, integrate,
                          perturbation_statistic)
from .perturbation import (PerturbationError, PerturbationTable, empty_table,
                           flip_rate, lv_table, lv_two_kernel_table,
                           table_from_json, table_to_json, validate_table)
from .simulator import (Configuration, CoupledRunResult, Event, EventEngine,
                        RunResult, coupled_run, initial_sites_from_spec,
                        run_biased_voter, seed_streams, simulate)

__version__ = "0.1.0"
