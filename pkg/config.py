# Configuration settings for dana-lab

from typing import Any, Dict


class ConfigError(ValueError):
    """
    Raised for unknown scenarios, unknown override keys or malformed config files.
    """


# Numerical tolerances
LAPLACIAN_EIG_TOL = 1e-10
PROJECTION_TOL = 1e-10
FEASIBILITY_RTOL = 1e-9

# Graph generation
GRAPH_DEFAULT_WEIGHT = 1.0

# DANA
DANA_DEFAULT_Q = 2              # even q tends to beat odd q + 1
DANA_DEFAULT_ALPHA = "auto"     # "auto" -> convergence-theorem bound
DANA_EULER_STEP = 1e-3
DANA_TOL = 1e-10
DANA_MAX_ITERS = 1_000_000
DANA_MAX_HALVINGS = 20
ROBUST_AUG_PENALTY = 1.0

# DiSCRN
DISCRN_DELTA = 0.1
DISCRN_BATCH = 20
DISCRN_RHO = 50.0
DISCRN_ETA_GRADIENT = 100.0
DISCRN_ETA_NEWTON = 50.0
DISCRN_SUBSOLVER_ROUNDS = 10_000
DISCRN_SUBSOLVER_TOL = 1e-10
DISCRN_CONSENSUS_RTOL = 1e-6
DISCRN_CONSENSUS_ROUNDS = 5_000
DISCRN_EVAL_REALIZATIONS = 500
DISCRN_INNER_MAX_ROUNDS = 200_000
DISCRN_CONDITION_C = 1e-3
DISCRN_CONDITION_EPS = 1e-3

# NNN (binary allocation)
NNN_M = 0.1
NNN_ALPHA = 1.0
NNN_T0 = 1.0
NNN_TAU0 = 0.1
NNN_BETA = 1.4
NNN_LEARNING_STEPS = 10
NNN_EULER_STEP = 1e-3
NNN_MAX_HALVINGS = 20
NNN_INTERIOR_EPS = 1e-12
NNN_INIT_RADIUS = 0.01
NNN_JITTER = 0.01
NNN_STOP_TOL = 1e-8
NNN_WINDOW = 20.0               # t_d, continuous-time seconds per annealing window
NNN_BRUTE_FORCE_MAX_N = 24

# Dispatch
DISPATCH_TICKS = 2401           # 40 min at 1 Hz
DISPATCH_SIGNAL_BETA = 0.75
DISPATCH_MAX_SHIFT = 300        # seconds, PJM 5-minute window
DISPATCH_DELAY_REFERENCE = 300.0
DISPATCH_RC_TOL = 1e-10
DISPATCH_RC_MAX_ROUNDS = 100_000
DISPATCH_PD_STEP = 0.1
DISPATCH_DANA_STEP = None       # None -> derived from the fleet spectrum
DISPATCH_TICK_TOL = 1e-6        # projected KKT residual, kW
DISPATCH_TICK_MAX_ROUNDS = 50_000
DISPATCH_RESIDUAL_EVERY = 10    # rounds between KKT residual checks
DISPATCH_OUTLIER_FRAC = 0.5
DISPATCH_FILTER_WINDOW = 4
DISPATCH_EDGE_FACTOR = 4
DISPATCH_V1G_PHASES = (0, 20, 40)  # staggered update groups, seconds

# Harness
OUTPUT_DIR = "output"
DEFAULT_SEED = 0
DEFAULT_WORKERS = 1
FLOAT_FORMAT = "%.12g"

EXIT_OK = 0
EXIT_NONCONVERGENCE = 2
EXIT_CONFIG_ERROR = 3

# Scenario presets, one literal table per simulation study
PRESETS: Dict[str, Dict[str, Any]] = {
    "dana_discrete": {
        "n": 100,
        "m": 250,
        "d": 200.0,
        "x0": 2.0,
        "a_range": (2.0, 4.0),
        "b_range": (-1.0, 1.0),
        "c_range": (0.0, 1.0),
        "theta_range": (0.0, 6.283185307179586),
        "q_values": (0, 2, 4),
        "alpha": 1.0,
        "target_gap": 1e-6,
        "max_iters": 50_000,
        "reference_q": 8,
        "reference_iters": 200_000,
        "include_gradient": True,
    },
    "dana_continuous": {
        "instance": "three_node",
        "n": 3,
        "edges": ((0, 1), (1, 2)),
        "a": (0.5, 1.5, 4.0),
        "b": (0.5, 0.5, 0.5),
        "lower": (0.2, 2.5, 1.5),
        "upper": (1.0, 6.0, 4.0),
        "d": 6.0,
        "x0": (5.0, -1.0, 2.0),
        "lambda0": (1.5, 0.5, 0.0, 0.0, 2.0, 1.0),
        "q_values": (0, 1, 2, 3),
        "h": 1e-2,
        "t_final": 200.0,
    },
    "dana_continuous_forty": {
        "instance": "forty_node",
        "n": 40,
        "m": 156,
        "a_range": (0.5, 3.0),
        "b_range": (-2.0, 2.0),
        "lower_range": (1.5, 3.0),
        "upper_range": (3.0, 4.5),
        "d": 120.0,
        "x0": 3.0,
        "q_values": (0, 1, 2, 3),
        "h": 1e-2,
        "t_final": 200.0,
    },
    "dana_robust": {
        "n": 20,
        "m": 40,
        "a_range": (0.5, 3.0),
        "b_range": (-2.0, 2.0),
        "d": 60.0,
        "q_values": (0, 2),
        "h": 1e-2,
        "t_final": 100.0,
        "perturb_times": (25.0, 50.0, 75.0),
        "perturb_scale": 1.0,
        "penalty": ROBUST_AUG_PENALTY,
    },
    "discrn": {
        "n": 40,
        "m": 120,
        "p_ref": 40.0,
        "noise": ("uniform", 0.0, 1.5),
        "delta": DISCRN_DELTA,
        "batch": DISCRN_BATCH,
        "rho": DISCRN_RHO,
        "eta_gradient": DISCRN_ETA_GRADIENT,
        "eta_newton": DISCRN_ETA_NEWTON,
        "methods": ("cubic", "newton", "gradient"),
        "outer_iters": 60,
        "x0": 1.0,
        "eta_rule": "rate",
        "subsolver_rounds": DISCRN_SUBSOLVER_ROUNDS,
        "eval_realizations": DISCRN_EVAL_REALIZATIONS,
    },
    "discrn_ev": {
        "n": 2,
        "p_ref": 0.0,
        "weather": ("sunny", "cloudy"),
        "delta": 0.01,
        "batch": DISCRN_BATCH,
        "rho": DISCRN_RHO,
        "methods": ("cubic",),
        "outer_iters": 30,
        "x0": 0.0,
        "eta_rule": "rate",
        "subsolver_rounds": 2_000,
        "eval_realizations": DISCRN_EVAL_REALIZATIONS,
    },
    "nnn_quality": {
        "n": 50,
        "trials": 100,
        "p_range": (1.0, 50.0),
        "exponent_range": (2.0, 3.0),
        "p_r": 1500.0,
        "gamma": 1.0,
        "T0": NNN_T0,
        "tau0": NNN_TAU0,
        "m": NNN_M,
        "alpha": NNN_ALPHA,
        "learning_steps": NNN_LEARNING_STEPS,
        "beta": NNN_BETA,
        "edge_factor": 2,
        "window": NNN_WINDOW,
        "h": 1e-2,
    },
    "nnn_traj2d": {
        "c": (2.0, 1.0),
        "p": (3.0, 1.0),
        "p_r": 2.8,
        "gamma": 4.0,
        "a": (-10.0, -10.0),
        "T0": NNN_T0,
        "tau0": NNN_TAU0,
        "m": NNN_M,
        "alpha": NNN_ALPHA,
        "learning_steps": 15,
        "beta": NNN_BETA,
        "window": NNN_WINDOW,
        "h": 1e-2,
    },
    "dispatch_fullday": {
        "ticks": DISPATCH_TICKS,
        "signal": "synthetic",
        "signal_beta": DISPATCH_SIGNAL_BETA,
        "methods": ("rc", "pd", "dana"),
        "two_stage": True,
        "topology": "random",
        "edge_factor": DISPATCH_EDGE_FACTOR,
        "q": 2,
        "pd_step": DISPATCH_PD_STEP,
        "dana_step": DISPATCH_DANA_STEP,
        "check_oracle": True,
        "preprocess": True,
        "devices": None,
        "max_shift": DISPATCH_MAX_SHIFT,
    },
    "weight_study": {
        "sizes": (10, 20, 40),
        "trials": 20,
        "edge_factor": 3,
        "families": {"tight": (0.8, 1.2), "wide": (0.2, 5.0)},
    },
}

SCENARIOS = tuple(PRESETS)

