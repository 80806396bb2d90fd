"""Exception hierarchy shared by every ebflow module.

Library code raises these; only the CLI turns them into log records and exit codes.
"""

from typing import Iterable, Optional, Sequence, Tuple


class EBFlowError(Exception):
    """Base class for all ebflow errors"""


class ShapeError(EBFlowError, ValueError):
    """Operands of a tensor operation have incompatible shapes"""

    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        operands = ", ".join(f"operand {i}: {s}" for i, s in enumerate(self.shapes))
        message = f"shape mismatch in '{op}' ({operands})"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class GradientError(EBFlowError):
    """Backward pass was requested on something that cannot be differentiated"""


class SingularMatrixError(EBFlowError):
    """LU factorization hit a pivot below tolerance"""

    def __init__(self, pivot_index: int, pivot_value: float, context: str = ""):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        where = f" in {context}" if context else ""
        super().__init__(
            f"singular matrix{where}: pivot {pivot_index} has |p|={abs(pivot_value):.3e}"
        )


class DomainError(EBFlowError, ValueError):
    """Input lies outside the domain of a layer"""

    def __init__(self, layer: str, coordinate: int, bound: str, value: float):
        self.layer = layer
        self.coordinate = coordinate
        self.bound = bound
        self.value = value
        super().__init__(
            f"{layer}: coordinate {coordinate} = {value!r} violates bound {bound}"
        )


class InversionError(EBFlowError):
    """A layer could not be inverted at the current parameters"""

    def __init__(
        self,
        message: str,
        residual: Optional[float] = None,
        iterations: Optional[int] = None,
        layer_index: Optional[int] = None,
    ):
        self.message = message
        self.residual = residual
        self.iterations = iterations
        self.layer_index = layer_index
        parts = [message]
        if layer_index is not None:
            parts.append(f"layer {layer_index}")
        if iterations is not None:
            parts.append(f"after {iterations} iterations")
        if residual is not None:
            parts.append(f"residual {residual:.3e}")
        super().__init__(", ".join(parts))


class ConfigError(EBFlowError, ValueError):
    """A configuration document is invalid"""

    def __init__(self, message: str, valid_keys: Iterable[str] = ()):
        self.valid_keys = sorted(valid_keys)
        if self.valid_keys:
            message = f"{message}; valid keys: {', '.join(self.valid_keys)}"
        super().__init__(message)


class CheckpointError(EBFlowError):
    """A checkpoint file is missing, truncated or malformed"""


class TrainingDivergedError(EBFlowError):
    """The loss became non-finite during training"""

    def __init__(self, step: int, loss: float, checkpoint: Optional[str] = None):
        self.step = step
        self.loss = loss
        self.checkpoint = checkpoint
        super().__init__(
            f"non-finite loss {loss!r} at step {step}; last good checkpoint: {checkpoint or 'none'}"
        )


class SamplingError(EBFlowError):
    """An MCMC chain produced a non-finite state"""

    def __init__(self, iteration: int, message: str = "non-finite energy gradient"):
        self.iteration = iteration
        super().__init__(f"{message} at Langevin iteration {iteration}")


class ImportanceSamplingError(EBFlowError):
    """Importance weights are unusable"""
