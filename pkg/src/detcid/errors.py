"""Exception types shared across the pipeline."""


class DetcidError(Exception):
    """Base class for all errors raised by this package."""


class InvalidTransformError(DetcidError):
    """Affine matrix is singular or malformed."""


class EmptyMaskError(DetcidError):
    """Operation requires a nonempty mask."""


class DegenerateMaskError(DetcidError):
    """Mask has too few pixels for the requested measurement."""


class ShapeMismatchError(DetcidError):
    """Inputs do not share the required shape."""


class InvalidConfigError(DetcidError):
    """Configuration violates an invariant (bad range, unknown key, ...)."""


class NoBackgroundError(DetcidError):
    """Cell masks cover the entire image; nothing to inpaint from."""


class PlacementFailedError(DetcidError):
    """Cell placement produced an empty mask even after a retry."""


class InvalidGroundTruthError(DetcidError):
    """Ground-truth label map is not one-hot."""


class InvalidBoxError(DetcidError):
    """Bounding box is degenerate (non-positive size)."""


class DivergenceError(DetcidError):
    """Training loss became non-finite."""
