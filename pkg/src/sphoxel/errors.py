"""Exception hierarchy.

Everything raised on bad input derives from :class:`SphoxelError`, which the
CLI maps to a data-error exit code.
"""


class SphoxelError(ValueError):
    pass


class OriginOutsideSphere(SphoxelError):
    pass


class InvalidBounds(SphoxelError):
    pass


class NotALeaf(SphoxelError):
    pass


class InvalidConfig(SphoxelError):
    pass


class EmptyCameraSet(SphoxelError):
    pass


class DegenerateScene(SphoxelError):
    pass


class NoValidOverlap(SphoxelError):
    pass


class UnreadableFile(SphoxelError):
    pass


class UnsupportedFormat(SphoxelError):
    pass


class EmptyCloud(SphoxelError):
    pass


class EmptyTrajectory(SphoxelError):
    pass


class WriteFailure(SphoxelError):
    pass
