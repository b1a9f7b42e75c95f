"""Exception types raised across the pipeline."""


class NonSymmetricError(ValueError):
    """Matrix handed to the symmetric eigensolver is not symmetric."""


class EmptyIndexError(ValueError):
    """Nearest-neighbor query against an index with no points."""


class EmptyTrajectoryError(ValueError):
    """Operation requires at least one trajectory control."""


class NonMonotonicTimeError(ValueError):
    """Appended control time does not strictly increase."""


class EmptyMapError(ValueError):
    """Registration requires a nonempty surfel map."""


class NoCorrespondencesError(RuntimeError):
    """Too few point-to-surfel matches to solve the registration."""


class EmptyGraphError(ValueError):
    """Binding requires a deformation graph with at least one node."""


class SingularNodeError(RuntimeError):
    """A bound node's linear map is numerically singular."""


class NoConstraintsError(ValueError):
    """Graph optimization called without any constraints."""


class NumericalFailureError(RuntimeError):
    """Normal-equation factorization failed even at maximum damping."""


class LoopRejected(RuntimeError):
    """Loop candidate failed verification; `reason` is one of
    'fitness', 'inliers', 'empty submap'."""

    def __init__(self, reason: str):
        super().__init__(f"loop candidate rejected: {reason}")
        self.reason = reason


class EmptySubmapError(ValueError):
    """Constraint generation found no surfels in the submap window."""


class NoOverlapError(ValueError):
    """Evaluated trajectories do not overlap in time."""


class PlyError(ValueError):
    """Malformed PLY content; message carries line/offset context."""


class MissingPropertyError(PlyError):
    """PLY vertex element lacks a required property."""

    def __init__(self, name: str):
        super().__init__(f"PLY vertex element missing property '{name}'")
        self.name = name


class ConfigError(ValueError):
    """Invalid pipeline configuration; message names the offending key."""


class StageError(RuntimeError):
    """A pipeline stage failed; message carries the stage label."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
