"""Exception types shared across the numeric modules.

File-format errors live in :mod:`patchopt.volume_io`; everything raised by
the geometry, tokenizer, encoder, loss, and phantom code is defined here.
"""


class ShapeMismatch(ValueError):
    """Array shapes disagree with what the operation requires."""


class NonFiniteActivation(FloatingPointError):
    """A forward pass produced NaN or infinity; message names the layer."""


class TapeMismatch(ValueError):
    """Backward called with a gradient that does not match the taped output."""


class InvalidProbability(ValueError):
    """Probability rows are negative or do not sum to one."""


class EmptyCandidates(ValueError):
    """Patch selection called with no candidate sizes."""


class NeedTwoDatasets(ValueError):
    """Transfer planning requires at least two datasets."""


class NonPositiveInput(ValueError):
    """A volume, spacing, or scale that must be positive is not."""


class NoScans(ValueError):
    """Dataset aggregation called with an empty scan list."""


class OverlapError(ValueError):
    """Two phantom lesions rasterize onto the same voxel."""


class OutOfBounds(ValueError):
    """A phantom lesion extends past the volume extent."""
