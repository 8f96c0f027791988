from .network import (
    ActionEvaluation,
    ForwardCache,
    JointPolicy,
    PolicyOutput,
    check_order,
    init_params,
    parameter_count,
)
