"""Transient-stability simulation of AC grids with frequency-controlled PEV fleets."""

from .admittance import (
    AdmittanceMatrix,
    ReducedNetwork,
    ReductionError,
    assemble_admittance,
    augment_and_reduce,
    kron_reduce,
    reduce_case,
)
from .case import (
    Branch,
    Bus,
    CaseError,
    CaseParseError,
    ClassicalLoad,
    Generator,
    NetworkCase,
    bundled_case_path,
    load_bundled,
    load_case,
    parse_case,
)
from .powerflow import (
    PowerFlowError,
    PowerFlowSolution,
    initialize,
    initialize_machine_constants,
    solve_power_flow,
)

__version__ = "0.1.0"
