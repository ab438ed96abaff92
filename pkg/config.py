import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Output configuration
OUTPUT_DIR = os.getenv('MFC_OUTPUT_DIR', 'out')
THREADS = int(os.getenv('MFC_THREADS', '1'))
LOG_LEVEL = os.getenv('MFC_LOG_LEVEL', 'INFO')

# Forward-backward sweep
FBSM_RELAXATION = float(os.getenv('MFC_FBSM_RELAXATION', '0.3'))
FBSM_TOL = float(os.getenv('MFC_FBSM_TOL', '1e-9'))
FBSM_MAX_ITERS = int(os.getenv('MFC_FBSM_MAX_ITERS', '5000'))

# Hamiltonian maximization (non-quadratic control costs)
NEWTON_TOL = 1e-12
NEWTON_MAX_ITERS = 50

# Finite-difference oracles
FD_GRADIENT_STEP = 1e-4
FD_HESSIAN_STEP = 1e-3

# Coercivity eigenproblem
DENSE_EIGEN_CAP = int(os.getenv('MFC_DENSE_EIGEN_CAP', '4096'))
SUBSPACE_RANDOM_VECTORS = 64
VERDICT_TOL = 1e-8
ACTIVE_BOUND_TOL = 1e-9

# Regularity scans
SEPARATION_EPS = 1e-9  # relative to problem scale

# Grid used for suprema over boxes (points per coordinate, odd keeps the center)
BOUND_GRID_POINTS = 21

# Sweep reference resolution for closed-form references
REFERENCE_MIN_PARTICLES = 1024

# Largest exact assignment (particles per side) for W_p in d > 1
ASSIGNMENT_CAP = int(os.getenv('MFC_ASSIGNMENT_CAP', '256'))

# Artifacts
SCHEMA_VERSION = 1
VERSION = '1.0.0'
