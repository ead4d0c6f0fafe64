from .evaluation import (AUC_THRESHOLDS_MM, PCK_THRESHOLD_MM, EvalResult, evaluate, evaluate_arrays,
                         root_centred_errors, unrooted_mpjpe)
from .sweep import (AXES, DEFAULT_VALUES, GT_NOISE, SOLVERS, SweepReport, corrupt, endpoint_indices, load_report,
                    make_solvers, read_table, run_sweep)
