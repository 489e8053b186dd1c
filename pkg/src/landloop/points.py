"""Point labels: the unit of supervision everywhere in this package."""

from typing import NamedTuple


class LabelPoint(NamedTuple):
    """A single labeled pixel, coordinates in the raster it was taken from."""

    row: int
    col: int
    cls: int
