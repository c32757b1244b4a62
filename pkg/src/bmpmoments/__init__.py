"""Moment asymptotics of branching Markov processes on finite state spaces."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AmbiguousMembership,
    BmpError,
    DominanceViolation,
    IllConditioned,
    InfeasibleTarget,
    InvalidModel,
    NonDecaying,
    NotInRegime,
    NumericalFailure,
    PopulationExplosion,
)
from .model import (  # noqa: E402
    BmpModel,
    build_model,
    canonical,
    from_jordan,
    from_mean,
    mean_matrix,
    multitype,
    validate_model,
    yule,
    zeta_apply,
)
from .moments import MomentTable, duhamel_residual, moment_hierarchy  # noqa: E402
from .spectral import (  # noqa: E402
    SpectralDecomposition,
    classify_function,
    classify_regimes,
    decompose,
    decompose_model,
)
from .limits import LimitTable, limit_critical, limit_large, limit_small  # noqa: E402
from .montecarlo import McEstimate, estimate_moment, simulate  # noqa: E402
from .diagnostics import (  # noqa: E402
    DeltaCurve,
    FunctionDictionary,
    build_dictionary,
    delta_critical,
    delta_large,
    delta_small,
    verify_h1,
)
