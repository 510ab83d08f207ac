"""Exception hierarchy shared by all LMT modules.

The command-line runner maps these onto process exit codes, so every failure
raised from library code should be one of the classes below.
"""


class LmtError(Exception):
    """Base class for all framework errors."""


class ContractError(LmtError, ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""

    def __init__(self, op, *shapes):
        self.shapes = shapes
        shown = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class UndefinedMetricError(ContractError):
    """A metric is undefined for the given inputs (e.g. AUC with one class)."""


class NumericFailure(LmtError, ArithmeticError):
    """Training or evaluation produced a non-finite value."""


class SolverError(NumericFailure):
    """The ODE solver could not produce a finite solution.

    Attributes:
        t (float): Last time at which the state was known to be finite.
    """

    def __init__(self, message, t=None):
        self.t = t
        super().__init__(message)


class StiffnessError(SolverError):
    """The adaptive solver exhausted ``max_steps`` before reaching ``t1``.

    Attributes:
        t (float): Time reached when the step budget ran out.
        h (float): Step size in use at that moment.
    """

    def __init__(self, t, h, max_steps):
        self.h = h
        super().__init__(
            f"max_steps={max_steps} exceeded at t={t:.6g} with h={h:.3g} (problem may be stiff)",
            t=t,
        )


class TrainingDiverged(NumericFailure):
    """The training loss became non-finite.

    Attributes:
        history (list[dict]): Epoch records up to and including the failure.
    """

    def __init__(self, message, history=None):
        self.history = list(history or [])
        super().__init__(message)


class FormatError(LmtError):
    """A persisted file has the wrong magic bytes, version or layout."""


class UsageError(LmtError):
    """Invalid command-line or configuration input."""
