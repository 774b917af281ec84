"""Covariate-shift correction for off-policy TD: exact ratio operators,
sample-based ratio learning and a prioritized-replay control agent."""
from __future__ import annotations

from .errors import *  # noqa: F401,F403
from .mdp import (  # noqa: F401
    EpisodicMdp, InducedChain, Mdp, Policy, RatioVector, StateDistribution, check_ergodic,
    discounted_reset_chain, discounted_stationary, episodic_visitation, induce_chain, ratio_of,
    stationary_distribution,
)

__version__ = "0.1.0"
