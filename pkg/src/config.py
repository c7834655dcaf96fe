"""
Configuration module for the Slow SDE Laboratory.
Contains all configurable parameters and settings.
"""

class Config:
    # Numerical tolerances
    GRAD_TOL = 1e-10  # ‖∇L‖ below which a point counts as on the manifold
    PROJECTION_GRAD_TOL = 1e-11  # gradient-flow stopping threshold
    PROJECTION_TOL = 1e-10  # integrator local error for gf_project
    RETRACTION_TOL = 1e-10  # integrator local error for SDE retraction
    LOSS_MATCH_TOL = 1e-6  # terminal loss vs manifold minimum
    RANK_THRESHOLD = 1e-8  # relative, scaled by max(1, |λ_max|)
    RANK_BAND = 10.0  # eigenvalues within this factor of the threshold are ambiguous
    SYMMETRY_TOL = 1e-10
    RECONSTRUCTION_TOL = 1e-8
    PSI_SERIES_CUTOFF = 1e-3
    QUAD_ABS_TOL = 1e-10

    # ODE integration
    ODE_FIRST_STEP = 1e-3
    ODE_MAX_STEPS = 10**7
    FLOW_HORIZON = 1e4  # time units before a gradient flow is declared non-convergent

    # Optimizers
    DIVERGENCE_NORM = 1e6
    NOISE_TRUNCATION = 6.0  # standard deviations per coordinate
    DEFAULT_SAMPLER = "with"

    # Slow SDE
    SDE_MAX_DT = 1e-3
    SDE_STEPS_PER_HORIZON = 1000

    # Harness
    BETA = 0.25
    DELTA = 0.9
    MIN_SEEDS = 30
    BOOTSTRAP_RESAMPLES = 1000
    BURN_IN_FACTOR = 20.0
    MASTER_SEED = 20240917

    # Output
    OUTPUT_DIR = "output"
    LOG_FILE = "slowsde.log"
    DB_FILE = "slowsde_runs.db"
    RESOLVED_CONFIG_FILE = "resolved_config.json"
    CSV_DIGITS = 17
    TIMESTAMP_FORMAT = "%Y%m%dT%H%M%S"
    SVG_HASH_SALT = "slowsde"

    # Environment
    SEED_ENV_VAR = "SLOWSDE_SEED"

    # Exit codes
    EXIT_OK = 0
    EXIT_ASSERTION_FAILED = 1
    EXIT_CONFIG_ERROR = 2
    EXIT_RUNTIME_FAILURE = 3

    # Report formatting
    REPORT_TEMPLATE = """
Experiment: {experiment}
Model: {model}
Seed: {seed}
Created: {time} UTC
Configurations: {n_rows}
Fits:
{fits}
Assertions: {n_passed}/{n_assertions} passed
{assertions}
Notices:
{notices}
"""
    FIT_TEMPLATE = "  {name}: {estimate:.6g} (CI {low:.6g} .. {high:.6g})"
    ASSERTION_ROW_TEMPLATE = "{status:<5} {name:<48} target={target:<14} observed={observed:<14} tol={tolerance}"
