"""Object-centric perception and control: Python surface over the C++ core."""

from _opc import (
    WaterworldEnv,
    adjusted_mutual_info,
    analytic_theta_grad,
    e_step,
    em_input,
    entropy_of_logits,
    expected_loglik,
    nstep_returns,
    period_reward,
    resolve_config,
    run_checks,
    softmax,
    td_target,
)

__all__ = [
    "WaterworldEnv",
    "adjusted_mutual_info",
    "analytic_theta_grad",
    "e_step",
    "em_input",
    "entropy_of_logits",
    "expected_loglik",
    "nstep_returns",
    "period_reward",
    "resolve_config",
    "run_checks",
    "softmax",
    "td_target",
]
