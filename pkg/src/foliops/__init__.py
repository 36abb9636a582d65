"""Convolution calculus of fibred kernels along singular foliations.

The package realizes a computable kernel calculus over a chart box: a
singular foliation is given by generating vector fields, bisubmersions
are lazy terms whose fibres carry canonical charts built from unit-time
flows, and kernels are finite sums of Dirac-on-bisection and smooth
density atoms.  Convolution, transposition, pushforward and the r/s
re-fibering are all realized so the corresponding operator identities
hold at quadrature accuracy; ``foliops verify`` runs the whole battery.
"""

from .errors import (
    BaseMismatch,
    BracketNotZero,
    ConfigError,
    DimensionMismatch,
    DomainEscape,
    EmptyTranslate,
    EvalError,
    FoliopsError,
    HostMismatch,
    InsufficientLeafSampling,
    NotABisection,
    NotTransverse,
    ParseError,
    QuadratureFailure,
    SideMismatch,
    StepLimit,
    SupportViolation,
)
from .expr import (
    ScalarExpr,
    VectorFieldExpr,
    jacobian,
    lie_bracket,
    parse_field,
    parse_scalar,
)
from .flow import FlowConfig, back_flow, exp_flow, flow_jacobian
from .foliation import (
    LeafSample,
    SingularFoliation,
    involutivity_check,
    leaf_dimension,
    leaf_sample,
    leaf_sweep,
)
from .bisubmersion import (
    Bisection,
    Bisubmersion,
    Morphism,
    bisection_diffeo,
    compose,
    constant_bisection,
    fibre_param,
    identity_bisection,
    invert,
    make_addition_morphism,
    make_path_holonomy,
    restrict,
    translate,
)
from .kernel import (
    FibredKernel,
    QuadratureConfig,
    SupportBox,
    convolve,
    density,
    dirac,
    pullback_base,
    pushforward,
    r_to_s_convert,
    support_of,
    transpose,
)
from .op import (
    GridFunction,
    apply_adjoint,
    apply_on_leaf,
    apply_op,
    support_bound,
)
from .workspace import Workspace, load_config
from .canonical import canonical_workspace

__version__ = "0.1.0"
