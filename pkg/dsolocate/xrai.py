"""
Integrated gradients and region-based (XRAI-style) attribution.

Attribution is taken with respect to the classifier logit. Integrated
gradients use a midpoint Riemann sum; region attribution over-segments
the patch at several Felzenszwalb scales and greedily covers it with the
segment of highest positive attribution density.
"""
import numpy as np

from enum import Enum
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union
from scipy import ndimage
from skimage import measure
from skimage.segmentation import felzenszwalb
from dsolocate.exceptions import ConfigurationError, DomainError
from dsolocate.model import ModelParams, path_gradients
from dsolocate.synthgen import Label
from dsolocate.utils import luminance

class Baseline(str, Enum):

    BLACK = "black"
    WHITE = "white"

    def image(self, shape) -> np.ndarray:
        return np.zeros(shape) if self == Baseline.BLACK else np.ones(shape)

@dataclass(frozen=True)
class XraiConfig:

    ig_steps: int = 64
    baselines: Tuple[str, ...] = ("black", "white")
    # felzenszwalb divides the scale by 255, faint sky needs small values
    scales: Tuple[float, ...] = (4.0, 16.0, 64.0)
    area_floor: int = 20
    segmentation_sigma: float = 0.0
    batch_size: int = 32

    def validate(self):
        if self.ig_steps < 1:
            raise ConfigurationError(f"ig_steps must be >= 1, got {self.ig_steps}")
        if not self.baselines:
            raise ConfigurationError("at least one baseline is required")
        for b in self.baselines:
            try:
                Baseline(b)
            except ValueError:
                raise ConfigurationError(f"unknown baseline '{b}', expected black or white")
        if not self.scales:
            raise ConfigurationError("at least one segmentation scale is required")
        if any(not s > 0 for s in self.scales):
            raise ConfigurationError(f"segmentation scales must be > 0, got {self.scales}")
        if self.area_floor < 1:
            raise ConfigurationError(f"area_floor must be >= 1, got {self.area_floor}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        return self

@dataclass
class SegmentSet:
    """
    One labeling per scale, each a partition of the pixel grid into
    4-connected segments numbered 0..n-1 in raster order of first pixel.
    """

    labelings: List[np.ndarray]
    scales: Tuple[float, ...]

    def counts(self) -> List[int]:
        return [int(lab.max()) + 1 for lab in self.labelings]

    def pool(self) -> List[Tuple[int, int]]:
        """
            Every (scale index, segment id) across scales.
        """
        return [(s, i) for s, n in enumerate(self.counts()) for i in range(n)]

    def mask(self, scale_index: int, segment_id: int) -> np.ndarray:
        return self.labelings[scale_index] == segment_id

@dataclass
class AttributionMap:

    scores: np.ndarray
    baseline: str
    steps: int
    channels: Optional[np.ndarray] = None

@dataclass
class Heatmap:
    """
    Per-pixel region attribution. `coverage_step[y, x]` is the selection
    step that covered the pixel, `scores` never increase with the step.
    """

    scores: np.ndarray
    coverage_step: np.ndarray
    selections: List[Tuple[int, int]] = field(default_factory=list)
    densities: List[float] = field(default_factory=list)
    fallback: bool = False
    metadata: dict = field(default_factory=dict)

def _merge_small(labels: np.ndarray, lum: np.ndarray, area_floor: int) -> np.ndarray:
    """
        Merges segments below area_floor into the 4-adjacent segment of
        closest mean luminance until none is left (or only one remains).
    """
    cross = ndimage.generate_binary_structure(2, 1)
    while True:
        ids, inverse, sizes = np.unique(labels, return_inverse=True, return_counts=True)
        if len(ids) <= 1:
            return labels
        small = np.where(sizes < area_floor)[0]
        if len(small) == 0:
            return labels
        means = np.bincount(inverse.ravel(), weights=lum.ravel()) / sizes
        target = ids[small[0]]
        region = labels == target
        ring = ndimage.binary_dilation(region, structure=cross) & ~region
        neighbors = np.unique(labels[ring])
        if len(neighbors) == 0:
            return labels
        own = means[small[0]]
        closest = min(neighbors, key=lambda n: (abs(means[np.searchsorted(ids, n)] - own), n))
        labels = np.where(region, closest, labels)

def segment_multiscale(patch: np.ndarray, scales: Sequence[float], area_floor: int = 20, sigma: float = 0.0) -> SegmentSet:

    """
        Felzenszwalb-Huttenlocher segmentation of the patch luminance once
        per scale. Segments are split into 4-connected pieces and pieces
        smaller than area_floor are merged into their most similar neighbor.

        Args:
            patch (np.ndarray): H x W x 3 (or H x W) intensities
            scales ([float]): Felzenszwalb scale parameters
            area_floor (int): Minimum segment area in pixels
            sigma (float): Gaussian pre-smoothing of the luminance

        Returns:
            SegmentSet
    """

    patch = np.asarray(patch)
    if patch.ndim not in (2, 3) or (patch.ndim == 3 and patch.shape[2] != 3) or patch.size == 0:
        raise DomainError(f"expected an H x W x 3 patch, got shape {patch.shape}")
    if not scales:
        raise DomainError("at least one segmentation scale is required")

    lum = luminance(patch).astype(np.float64)
    labelings = []
    for scale in scales:
        raw = felzenszwalb(lum, scale=float(scale), sigma=sigma, min_size=area_floor, channel_axis=None)
        pieces = measure.label(raw, background=-1, connectivity=1)
        merged = _merge_small(pieces, lum, area_floor)
        _, sequential = np.unique(merged, return_inverse=True)
        labelings.append(_raster_order(sequential.reshape(lum.shape)))

    return SegmentSet(labelings=labelings, scales=tuple(float(s) for s in scales))

def _raster_order(labels: np.ndarray) -> np.ndarray:
    # renumber so that ids follow the raster order of each segment's first pixel
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[flat].reshape(labels.shape)

def _baseline_image(baseline: Union[str, np.ndarray], shape) -> Tuple[np.ndarray, str]:
    if isinstance(baseline, np.ndarray):
        if baseline.shape != tuple(shape):
            raise DomainError(f"baseline shape {baseline.shape} does not match patch shape {tuple(shape)}")
        return baseline.astype(np.float64), "custom"
    b = Baseline(baseline)
    return b.image(shape), b.value

def integrated_gradients(params: ModelParams, patch: np.ndarray, baseline: Union[str, np.ndarray] = "black",
                         steps: int = 64, batch_size: int = 32, target: Label = Label.DSO_PRESENT) -> AttributionMap:

    """
        attribution_i = (x_i - b_i) * mean_k grad_i(b + (k - 0.5) / steps * (x - b)),
        k = 1..steps, summed over channels into one score per pixel.

        Args:
            params (ModelParams): Classifier
            patch (np.ndarray): 224 x 224 x 3 intensities
            baseline (str | np.ndarray): "black", "white" or an image of the patch shape
            steps (int): Riemann steps, >= 1
            batch_size (int): Path points per gradient batch
            target (Label): Class whose score is attributed

        Returns:
            AttributionMap
    """

    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    x = np.asarray(patch, dtype=np.float64)
    b, name = _baseline_image(baseline, x.shape)
    delta = x - b

    total = np.zeros_like(x)
    alphas = (np.arange(steps) + 0.5) / steps
    for start in range(0, steps, batch_size):
        chunk = alphas[start:start + batch_size]
        points = b[None] + chunk[:, None, None, None] * delta[None]
        _, grads = path_gradients(params, points, target)
        total += grads.sum(axis=0)

    channels = delta * (total / steps)
    return AttributionMap(scores=channels.sum(axis=2), baseline=name, steps=steps, channels=channels)

def xrai_attribution(params: ModelParams, patch: np.ndarray, config: XraiConfig = XraiConfig()) -> Heatmap:

    """
        Region attribution heatmap of one patch.

        The integrated-gradient maps of the configured baselines are
        averaged; then, from the pool of segments of every scale, the one
        with the highest density (positive attribution over its not yet
        covered pixels divided by their count) is selected and its
        uncovered pixels receive that density, until the patch is covered.
        Ties go to the smaller segment id, then the lower scale index.
        Scores are kept non-increasing along the selection order, and once
        no positive attribution is left the remaining pixels are covered in
        one step at 0.

        Args:
            params (ModelParams): Classifier
            patch (np.ndarray): 224 x 224 x 3 intensities
            config (XraiConfig): Attribution parameters

        Returns:
            Heatmap
    """

    config.validate()
    maps = [integrated_gradients(params, patch, b, config.ig_steps, config.batch_size) for b in config.baselines]
    attribution = np.mean([m.scores for m in maps], axis=0)
    metadata = {
        "baselines": list(config.baselines),
        "ig_steps": config.ig_steps,
        "scales": list(config.scales),
        "area_floor": config.area_floor,
        "target": "logit",
    }

    segments = segment_multiscale(patch, config.scales, config.area_floor, config.segmentation_sigma)
    heatmap = greedy_cover(attribution, segments, config.area_floor)
    heatmap.metadata = dict(metadata, **heatmap.metadata)
    return heatmap

def greedy_cover(attribution: np.ndarray, segments: SegmentSet, area_floor: int = 20) -> Heatmap:

    """
        Covers the grid with segments in order of decreasing positive
        attribution density over their uncovered pixels. Without any
        segment of at least area_floor pixels the attribution itself is
        returned, flagged as a fallback.

        Args:
            attribution (np.ndarray): H x W attribution scores
            segments (SegmentSet): Candidate segments of every scale
            area_floor (int): Minimum segment area in pixels

        Returns:
            Heatmap
    """

    flat_labels = [lab.ravel() for lab in segments.labelings]
    eligible = []
    for lab, n in zip(flat_labels, segments.counts()):
        eligible.append(np.bincount(lab, minlength=n) >= area_floor)

    shape = attribution.shape
    if not any(e.any() for e in eligible):
        return Heatmap(
            scores=np.asarray(attribution, dtype=np.float64),
            coverage_step=np.zeros(shape, dtype=np.int64),
            fallback=True,
            metadata={"fallback": "all segments below area_floor"},
        )

    positive = np.maximum(attribution, 0.0).ravel()
    uncovered = np.ones(positive.shape, dtype=bool)
    scores = np.zeros(positive.shape)
    coverage_step = np.full(positive.shape, -1, dtype=np.int64)
    selections, densities = [], []
    last = np.inf

    while uncovered.any():
        best = None
        weights = positive[uncovered]
        for s, (lab, ok) in enumerate(zip(flat_labels, eligible)):
            ids = lab[uncovered]
            sums = np.bincount(ids, weights=weights, minlength=len(ok))
            counts = np.bincount(ids, minlength=len(ok))
            valid = ok & (counts > 0)
            if not valid.any():
                continue
            density = np.where(valid, sums / np.maximum(counts, 1), -np.inf)
            seg = int(np.argmax(density))
            key = (-density[seg], seg, s)
            if best is None or key < best:
                best = key

        step = len(selections)
        if best is None or -best[0] <= 0.0:
            scores[uncovered] = 0.0
            coverage_step[uncovered] = step
            selections.append((-1, -1))
            densities.append(0.0)
            break

        value, seg, s = -best[0], best[1], best[2]
        newly = uncovered & (flat_labels[s] == seg)
        last = min(value, last)
        scores[newly] = last
        coverage_step[newly] = step
        uncovered &= ~newly
        selections.append((s, seg))
        densities.append(float(last))

    return Heatmap(
        scores=scores.reshape(shape),
        coverage_step=coverage_step.reshape(shape),
        selections=selections,
        densities=densities,
    )
