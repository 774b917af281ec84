"""Numerical tolerances shared across the package."""

# stochasticity of constructed transition tensors / policies
PROB_ATOL = 1e-12
# linear-solver residuals (stationary distributions, visitation)
SOLVER_ATOL = 1e-10
# StateDistribution sum-to-one check
DIST_ATOL = 1e-10
# normalized RatioVector check: sum d_mu * c == 1
RATIO_NORM_ATOL = 1e-8

# above this many states the stationary solve switches to power iteration
DIRECT_SOLVE_MAX_STATES = 2000
POWER_ITER_MAX = 100_000

EPISODIC_POWER_ITERS = 200
EPISODIC_MARGIN = 1e-9

DIVERGENCE_THRESHOLD = 1e12
RESIDUAL_TOL = 1e-9
ZERO_TOL = 1e-9

FEATURE_RANK_TOL = 1e-10
CONDITION_MAX = 1e12
DEGENERATE_MASS = 1e-300
