"""marlab: a desk-scale multi-agent reinforcement learning laboratory.

Small cooperative, zero-sum, and communication games solved four ways
(value factorization, centralized critics, self-play, differentiable
communication) on a from-scratch float64 autodiff core, with exact
enumeration oracles to check every moving part against.
"""

__version__ = "0.1.0"
