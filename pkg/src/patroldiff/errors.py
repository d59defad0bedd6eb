"""Exception taxonomy for the patroldiff pipeline.

Every error raised by this package derives from :class:`PatrolDiffError` so
callers can catch pipeline failures without swallowing programming errors.
"""


class PatrolDiffError(Exception):
    """Base class for all patroldiff errors."""


# --- geometry ---------------------------------------------------------------

class DegeneratePoint(PatrolDiffError):
    """Projective mapping sent a point to (or near) the plane at infinity."""


class SingularHomography(PatrolDiffError):
    """Homography matrix is rank-deficient or too ill-conditioned to use."""


class EmptyIntersection(PatrolDiffError):
    """Requested crop box lies fully outside the image."""


# --- alignment --------------------------------------------------------------

class MissingTelemetry(PatrolDiffError):
    """Target sample carries no telemetry, so candidates cannot be retrieved."""


class InsufficientFeatures(PatrolDiffError):
    """Fewer than 4 correspondences survived matching."""


class NoViableCandidate(PatrolDiffError):
    """Every candidate reference failed feature matching."""


class DegenerateConfiguration(PatrolDiffError):
    """Point configuration is collinear or coincident; no homography exists."""


class RankDeficient(PatrolDiffError):
    """DLT system admits no unique solution (ambiguous null space)."""


class ConsensusFailure(PatrolDiffError):
    """RANSAC found fewer inliers than the configured minimum."""


class ShapeMismatch(PatrolDiffError):
    """Images disagree in height or channel count where they must agree."""


# --- synthesis --------------------------------------------------------------

class PlacementOutOfBounds(PatrolDiffError):
    """Scaled object does not fit inside the destination at the placement."""


class EmptyMask(PatrolDiffError):
    """Instance mask has no foreground pixels."""


class DummyPoolExhausted(PatrolDiffError):
    """More dummy classes requested than the pool provides."""


# --- model client -----------------------------------------------------------

class RequestTimeout(PatrolDiffError):
    """Endpoint did not answer within the configured timeout."""


class ProtocolError(PatrolDiffError):
    """Endpoint reply was not JSON or lacked the required fields."""


class ExhaustedRetries(PatrolDiffError):
    """Transient endpoint failures persisted through every retry."""


class UnknownSample(PatrolDiffError):
    """Mock oracle received a prompt for a sample id not in its manifest."""


# --- evaluation -------------------------------------------------------------

class EmptyEvaluation(PatrolDiffError):
    """Macro average requested over zero samples."""


class TooFewBoxes(PatrolDiffError):
    """Quartile analysis needs at least 4 ground-truth boxes."""


class IdMismatch(PatrolDiffError):
    """Inference results and pair manifest disagree on sample ids."""


# --- manifests / CLI --------------------------------------------------------

class ManifestError(PatrolDiffError):
    """A manifest row failed validation; message names the offending record."""
