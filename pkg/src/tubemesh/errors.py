"""Exception types shared across the package."""


class TubeMeshError(Exception):
    """Base class for all tubemesh errors."""


class DegenerateBranch(TubeMeshError):
    """Branch is too short or has too few nodes for the requested operation."""


class ParallelSeed(TubeMeshError):
    """Frame seed vector is (nearly) parallel to the first tangent."""


class AxialDirection(TubeMeshError):
    """Query direction has no usable component in the cross-section plane."""


class EmptyTree(TubeMeshError):
    """Vessel tree contains no branches or no nodes."""


class CoincidentParticles(TubeMeshError):
    """Two particles occupy the same position and no jitter could separate them."""


class DegenerateTriangle(TubeMeshError):
    """Triangle has (near-)zero area."""


class HasBifurcation(TubeMeshError):
    """Operation only defined for a single unbranched vessel."""


class InvalidSpec(TubeMeshError):
    """Synthetic shape specification violates its invariants."""


class ParseError(TubeMeshError):
    """Input file could not be parsed."""


class SchemaError(TubeMeshError):
    """Input file parsed but violates the expected schema."""


class UnitError(TubeMeshError):
    """Input file declares an unsupported length unit."""


class IoError(TubeMeshError):
    """File could not be read or written."""


class TriangulationIncomplete(UserWarning):
    """Mesh still has non-endpoint boundary edges after all repair passes.

    Emitted as a warning, not raised: the mesh is returned with its
    ``defects`` list populated so callers can inspect the open edges.
    """
