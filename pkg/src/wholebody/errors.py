"""Exception types shared across the toolkit."""


class WholeBodyError(Exception):
    """Base class for all toolkit errors."""


class NotFound(WholeBodyError):
    """A named frame, joint, or resource does not exist."""


class InvalidState(WholeBodyError):
    """A joint state contains NaN or is otherwise unusable."""


class InvalidChain(WholeBodyError):
    """A joint is not on the kinematic chain to the requested frame."""


class ShapeError(WholeBodyError):
    """Vector/tensor shapes disagree."""


class EmptyCloud(WholeBodyError):
    """A point cloud operation received zero points."""


class FaultState(WholeBodyError):
    """The simulated plant halted (NaN input or torque spike)."""


class DivergedError(WholeBodyError):
    """Sampling or training produced NaN."""


class RecordingError(WholeBodyError):
    """Trajectory recording failed; the session is unusable."""


class IncompatibleModel(WholeBodyError):
    """Trajectory was recorded against a different robot model."""


class EmptyTrajectory(WholeBodyError):
    """Trajectory has no steps."""


class SplitError(WholeBodyError):
    """Dataset too small to split."""


class OracleFailure(WholeBodyError):
    """The scripted demonstrator could not reach the goal."""


class StarvationWarning(Warning):
    """Policy inference is slower than the action chunk it produces."""
