from typing import Any, Dict

import numpy as np


def _jsonable(value: Any) -> Any:
    """Convert numpy payload entries into plain Python values"""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    return value


class LabError(Exception):
    """Base class for every error raised by the laboratory modules.

    Keyword arguments are kept as a structured payload so the command line
    front end can write them into the run report.
    """

    def __init__(self, message: str, **payload: Any):
        super().__init__(message)
        self.message = message
        self.payload = payload

    def to_dict(self) -> Dict[str, Any]:
        return {
            'type': type(self).__name__,
            'message': self.message,
            'payload': _jsonable(self.payload),
        }


class DomainError(LabError):
    """Argument outside the domain of an operation (r <= 0, z == y, ...)"""


class EvaluationError(LabError):
    """Non-finite value produced by a field evaluator"""


class ContractError(LabError):
    """Missing inputs or violated preconditions"""


class ConfigError(LabError):
    """Malformed experiment manifest or unknown family"""


class ClassificationError(LabError):
    """Divergent integral where convergence was required"""


class EllipticityError(LabError):
    """Coefficient matrix not symmetric positive definite"""


class CertificateError(LabError):
    """Declared modulus inconsistent with sampled continuity"""


class AccuracyError(LabError):
    """Two quadrature refinements disagree"""


class InsufficientDataError(LabError):
    """Tabulation too short for the requested extrapolation"""


class IntegrabilityError(LabError):
    """Source violates the integrability conditions of the potential"""


class DivergenceError(LabError):
    """Shell sums do not settle"""


class SmallnessError(LabError):
    """Coefficient oscillation too large for the construction"""


class ContractionFailure(LabError):
    """Fixed-point iteration stopped contracting"""


class GridRangeError(LabError):
    """Evaluation requested outside the tabulated radial range"""


class ConvergenceError(LabError):
    """Improper integral not Cauchy within tolerance"""


class UnsupportedCaseError(LabError):
    """Operation undefined for the given singularity class"""


class SolverError(LabError):
    """Dirichlet correction iteration failed to converge"""
