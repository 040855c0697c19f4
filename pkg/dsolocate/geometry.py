"""
Polygon vocabulary shared by scene annotation, contour extraction and
evaluation.

Polygons are lists of [x, y] vertices in pixel coordinates (pixel centers
on integers), implicitly closed. Boundaries are traced at the 0.5 level of
a binary mask, so vertices sit halfway between pixel centers and
rasterizing a traced polygon gives back the pixels it was traced from.
"""
import numpy as np

from dataclasses import dataclass, field
from typing import List, Optional, Tuple
from scipy import ndimage
from skimage import draw, measure
from dsolocate.utils import polygon_area

Polygon = List[List[float]]

def trace_outer_boundary(mask: np.ndarray) -> Polygon:

    """
        Traces the outer boundary of the (single) component in a binary mask.
        Returns an empty list for an empty mask.

        Args:
            mask (np.ndarray): H x W boolean mask

        Returns:
            Polygon
    """

    if not np.any(mask):
        return []

    padded = np.pad(mask.astype(np.float64), 1)
    contours = measure.find_contours(padded, 0.5)
    if not contours:
        return []

    outer = max(contours, key=lambda c: polygon_area(c[:, ::-1]))
    if len(outer) > 1 and np.allclose(outer[0], outer[-1]):
        outer = outer[:-1]
    return [[float(c) - 1.0, float(r) - 1.0] for r, c in outer]

def rasterize(polygon: Polygon, shape: Tuple[int, int], offset: Tuple[int, int] = (0, 0)) -> np.ndarray:

    """
        Pixels whose centers lie inside the polygon.

        Args:
            polygon (Polygon): [[x, y], ...]
            shape ((int, int)): (height, width) of the output grid
            offset ((int, int)): (x, y) of the grid origin in polygon coordinates

        Returns:
            np.ndarray: boolean mask of the given shape
    """

    mask = np.zeros(shape, dtype=bool)
    if len(polygon) < 3:
        return mask
    pts = np.asarray(polygon, dtype=np.float64)
    rr, cc = draw.polygon(pts[:, 1] - offset[1], pts[:, 0] - offset[0], shape=shape)
    mask[rr, cc] = True
    return mask

def components(mask: np.ndarray, min_area: int = 1) -> List[np.ndarray]:
    """
        4-connected components of a mask with at least min_area pixels,
        holes filled, in label (row-major first pixel) order.
    """
    labels, n = ndimage.label(mask)
    if n == 0:
        return []
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    found = []
    for slices, idx in zip(ndimage.find_objects(labels), range(1, n + 1)):
        if areas[idx - 1] < min_area:
            continue
        component = np.zeros(mask.shape, dtype=bool)
        component[slices] = ndimage.binary_fill_holes(labels[slices] == idx)
        found.append(component)
    return found

def is_simple(polygon: Polygon) -> bool:

    """
        True when no two non-adjacent edges of the closed polygon intersect.
        Quadratic in the vertex count, meant for validation and tests.
    """

    pts = np.asarray(polygon, dtype=np.float64)
    n = len(pts)
    if n < 3:
        return False

    starts, ends = pts, np.roll(pts, -1, axis=0)

    def _cross(o, a, b):
        return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])

    for i in range(n - 2):
        j = np.arange(i + 2, n if i > 0 else n - 1)
        if len(j) == 0:
            continue
        a, b = starts[i], ends[i]
        c, d = starts[j], ends[j]
        d1, d2 = _cross(c, d, a[None]), _cross(c, d, b[None])
        d3, d4 = _cross(a[None], b[None], c), _cross(a[None], b[None], d)
        if np.any((d1 * d2 < 0) & (d3 * d4 < 0)):
            return False
    return True

@dataclass
class Contour:

    polygon: Polygon
    confidence: float = 1.0
    label: str = "dso"

    @property
    def area(self) -> float:
        return polygon_area(self.polygon)

@dataclass
class ContourSet:
    """
    Closed polygons with a per-polygon confidence in [0,1].
    """

    width: int
    height: int
    contours: List[Contour] = field(default_factory=list)
    image: Optional[str] = None

    def __len__(self):
        return len(self.contours)

    def __iter__(self):
        return iter(self.contours)

    def to_dict(self) -> dict:
        return {
            "image": self.image or "",
            "width": int(self.width),
            "height": int(self.height),
            "objects": [
                {
                    "label": c.label,
                    "polygon": [[round(x, 3), round(y, 3)] for x, y in c.polygon],
                    "confidence": round(float(c.confidence), 6),
                }
                for c in self.contours
            ],
        }
