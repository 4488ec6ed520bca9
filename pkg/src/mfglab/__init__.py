"""Lagrangian neural-network solver for potential mean field games.

The potential of the game is a small residual network with exact gradient
and Laplacian evaluations; agent characteristics with their transport,
running and HJB-violation costs are integrated by RK4; the Monte-Carlo
objective is minimized by BFGS (or ADAM) inside a sample-average loop; and
trained controls can be cross-checked by a finite-volume Eulerian solve of
the continuity equation in two dimensions.
"""

import os as _os

# Tiny-matrix workloads lose badly to BLAS thread fan-out; pin to one
# thread unless the user already chose a count.  Effective only when numpy
# has not been imported yet.
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
_os.environ.setdefault("OMP_NUM_THREADS", "1")

from .autodiff import NonFiniteLossError, grad_loss
from .fv_check import Grid2D, advance_density, fv_objective, grid_objective, sample_density, sample_velocity
from .objective import LossBreakdown, SampleBatch, draw_batch, evaluate, validate
from .optim import TrainSchedule, adam_minimize, armijo_search, bfgs_minimize, saa_train
from .potential import (
    EvalWorkspace,
    PotentialParams,
    activation,
    activation_d1,
    activation_d2,
    eval_batch,
    forward,
    gradient,
    init_params,
    laplacian,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .problems import (
    GaussianMixture,
    ProblemSpec,
    coupling_F,
    crowd_instance,
    ot_instance,
    preference_q,
    running_cost_F_hat,
    terminal_cost_G_hat,
    terminal_coupling_G,
)
from .seeding import substream, substream_seed
from .trajectories import (
    IntegratorConfig,
    TrajectoryState,
    integrate,
    integrate_backward,
    integrate_backward_batch,
    integrate_batch,
    log_det_check,
    rhs,
    straightness_defect,
)

__version__ = "0.1.0"
