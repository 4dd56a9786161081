"""Market-making MDPs: generic value iteration, queue kernels and the
one-unit / pair problem builders."""

from .core import MdpError, MdpProblem, NonConvergenceError, Solution, brute_force, evaluate_policy, value_iterate

__all__ = ["MdpError", "MdpProblem", "NonConvergenceError", "Solution", "brute_force", "evaluate_policy",
           "value_iterate"]
