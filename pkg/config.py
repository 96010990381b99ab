import os

from dotenv import load_dotenv

load_dotenv()


def _float_env(name: str, default: float) -> float:
    return float(os.getenv(name, default))


def _int_env(name: str, default: int) -> int:
    return int(os.getenv(name, default))


class Config:
    # File paths
    OUTPUT_FOLDER = os.getenv('LAB_OUTPUT_FOLDER', 'outputs')
    TEMP_FOLDER = os.getenv('LAB_TEMP_FOLDER', 'temp')
    MANIFEST_FOLDER = os.getenv('LAB_MANIFEST_FOLDER', 'manifests')

    # Reproducibility
    SEED = _int_env('LAB_SEED', 20240601)
    TOL_SCALE = _float_env('LAB_TOL_SCALE', 1.0)

    # Radial grids
    POINTS_PER_DECADE = _int_env('LAB_POINTS_PER_DECADE', 24)
    R_MIN_FACTOR = _float_env('LAB_R_MIN_FACTOR', 1e-8)
    PANEL_ORDER = _int_env('LAB_PANEL_ORDER', 8)
    ANNULUS_NODES = _int_env('LAB_ANNULUS_NODES', 16)

    # Angular resolution
    HARMONIC_DEGREE = _int_env('LAB_HARMONIC_DEGREE', 8)

    # Mean exponent for X-norms and rate reports (p > n for pointwise bounds)
    EXPONENT_P = _float_env('LAB_EXPONENT_P', 4.0)

    # Singularity classification
    ESCAPE_THRESHOLD = _float_env('LAB_ESCAPE_THRESHOLD', 8.0)
    CLASSIFY_TOL = _float_env('LAB_CLASSIFY_TOL', 1e-6)

    # Fixed-point iterations
    MAX_ITER = _int_env('LAB_MAX_ITER', 60)
    ITER_TOL = _float_env('LAB_ITER_TOL', 1e-10)
    X_NORM_LIMIT = _float_env('LAB_X_NORM_LIMIT', 1e6)
    # Largest sigma(eps) accepted before the Neumann iteration starts
    SMALLNESS_DELTA = _float_env('LAB_SMALLNESS_DELTA', 0.5)

    # Delta pairing schedule
    SCHEDULE_LENGTH = _int_env('LAB_SCHEDULE_LENGTH', 11)
    INNER_CUTOFF_RATIO = _float_env('LAB_INNER_CUTOFF_RATIO', 1e-4)

    LOG_LEVEL = os.getenv('LAB_LOG_LEVEL', 'INFO')
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    # Registered coefficient families
    FIELD_FAMILIES = [
        'identity',
        'constant',
        'holder',
        'gs',
        'perturbation',
    ]

    COMMANDS = [
        'classify',
        'construct',
        'delta-const',
        'greens',
        'verify-prop1',
        'means',
    ]

    @staticmethod
    def ensure_directories(output_folder: str = None):
        """Create necessary directories if they don't exist"""
        for folder in [output_folder or Config.OUTPUT_FOLDER, Config.TEMP_FOLDER]:
            os.makedirs(folder, exist_ok=True)
