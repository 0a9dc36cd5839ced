"""mixsim: simulate distributed first-order optimizers as a linear state-space
system and check the convergence bounds that mixing-time analysis predicts."""

from .analysis import (
    BoundReport,
    FitReport,
    check_lemma2,
    check_lemma3,
    check_lemma5,
    check_theorem1,
    check_theorem2,
    fit_rate,
    spearman,
    theorem2_constants,
)
from .engine import RunConfig, Trace, available_backends, run, sequential_run
from .errors import (
    ConfigError,
    MixingNotObservedError,
    MixsimError,
    ProtocolError,
    ScheduleError,
)
from .mixing import estimate_tmix, verify_assumption1, verify_lemma1, verify_scale_bound
from .objectives import GradientOracle, make_objective
from .optimizers import SamConfig, SamState, StepSchedule, optimizer_config, sam_lipschitz
from .protocols import (
    ProtocolSpec,
    consensus_operator,
    make_protocol,
    theoretical_tmix,
)

__version__ = "0.1.0"

__all__ = [
    "BoundReport",
    "ConfigError",
    "FitReport",
    "GradientOracle",
    "MixingNotObservedError",
    "MixsimError",
    "ProtocolError",
    "ProtocolSpec",
    "RunConfig",
    "SamConfig",
    "SamState",
    "ScheduleError",
    "StepSchedule",
    "Trace",
    "available_backends",
    "check_lemma2",
    "check_lemma3",
    "check_lemma5",
    "check_theorem1",
    "check_theorem2",
    "consensus_operator",
    "estimate_tmix",
    "fit_rate",
    "make_objective",
    "make_protocol",
    "optimizer_config",
    "run",
    "sam_lipschitz",
    "sequential_run",
    "spearman",
    "theorem2_constants",
    "theoretical_tmix",
    "verify_assumption1",
    "verify_lemma1",
    "verify_scale_bound",
]
