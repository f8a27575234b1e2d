"""Minimum-energy control of linear network systems from local information."""

from .control import (
    BlockLayout,
    ControlProblem,
    GramianReport,
    InputSequence,
    LocalizedController,
    apply_localized,
    apriori_pattern,
    build_localized,
    centralized_control,
    control_error,
    controllability_index,
    controllability_matrix,
    effective_sins,
    gramian,
    input_permutation,
    permutation_map,
    propagate,
)
from .decay import DecayBound, bandwidth, demko_bound, ordered_magnitudes, row_envelope
from .networks import (
    CouplingSpec,
    Graph,
    InputSpec,
    bfs_distances,
    build_coupling,
    build_input_matrix,
    gen_ern,
    gen_lattice,
    gen_rgn,
)
from .sparse import (
    ConvergenceError,
    NotPositiveDefiniteError,
    cg_solve,
    condition_number,
    fill_in,
    pattern_of,
    pattern_union,
    spai,
    spgemm,
)

__version__ = "0.1.0"
