"""
Full-frame detection: tile, classify, attribute the selected patches,
stitch and contour. Also the star-removal baseline.

Per-slot work runs on the `framework` engine. A classification process
annotates every slot element with its probability; an attribution
sub-process routes each slot by its resolved tag to the XRAI transformer
("selected") or to a zero heatmap ("skipped").
"""
import asyncio
import math
import time
import cv2
import numpy as np

from dataclasses import dataclass, field
from functools import partial
from multiprocessing import TimeoutError as PoolTimeout
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union
from astropy.stats import SigmaClip, sigma_clipped_stats
from photutils.background import Background2D, MedianBackground
from scipy import ndimage
from skimage.transform import resize
from dsolocate import io
from dsolocate.exceptions import ConfigurationError, DomainError
from dsolocate.framework import AllChain, Chain, Element, Level, Meta, Mutable, Process, Result, Selector, Transformer
from dsolocate.geometry import Contour, ContourSet, components, trace_outer_boundary
from dsolocate.model import ModelParams, predict_proba
from dsolocate.synthgen import PATCH_SIZE, SkyImage
from dsolocate.utils import luminance
from dsolocate.xrai import XraiConfig, xrai_attribution

DEFAULT_PERCENTILE = 70.0

DEFAULT_MIN_AREA = 50

SELECTED = "selected"
SKIPPED = "skipped"

_OPEN = np.ones((3, 3), dtype=bool)

ImageLike = Union[SkyImage, np.ndarray]

def _pixels(image: ImageLike) -> np.ndarray:
    pixels = image.pixels if isinstance(image, SkyImage) else np.asarray(image)
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise DomainError(f"expected an H x W x 3 image, got shape {pixels.shape}")
    if not np.all(np.isfinite(pixels)):
        raise DomainError("image contains non-finite values")
    return pixels.astype(np.float32, copy=False)

def _like(image: ImageLike, pixels: np.ndarray) -> ImageLike:
    if isinstance(image, SkyImage):
        return SkyImage(pixels=pixels, seed=image.seed, profile=image.profile)
    return pixels

@dataclass(frozen=True)
class PatchSlot:

    index: int
    row: int
    col: int
    y: int
    x: int

@dataclass
class PatchGrid:
    """
    Patch slots over the reflect-padded image. Slots are enumerated
    row-major, consecutive slots are `stride` = patch_size - overlap apart.
    """

    height: int
    width: int
    patch_size: int
    overlap: int
    padded_height: int
    padded_width: int
    rows: int
    cols: int
    slots: List[PatchSlot] = field(default_factory=list)
    padded: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap

    def __len__(self):
        return len(self.slots)

    def patch(self, slot: Union[int, PatchSlot]) -> np.ndarray:
        s = self.slots[slot] if isinstance(slot, int) else slot
        return self.padded[s.y:s.y + self.patch_size, s.x:s.x + self.patch_size]

def _padded_length(n: int, patch_size: int, stride: int) -> int:
    if n <= patch_size:
        return patch_size
    return patch_size + math.ceil((n - patch_size) / stride) * stride

def tile(image: ImageLike, overlap: int = 0, patch_size: int = PATCH_SIZE) -> PatchGrid:

    """
        Splits the image into patch_size x patch_size slots after reflective
        padding on the bottom and right edges.

        Args:
            image (SkyImage | np.ndarray): H x W x 3 image, at least 1 x 1
            overlap (int): Pixels shared by neighboring slots, in [0, patch_size - 1]
            patch_size (int): Slot side

        Returns:
            PatchGrid
    """

    if not 0 <= overlap < patch_size:
        raise DomainError(f"overlap must be in [0, {patch_size - 1}], got {overlap}")
    pixels = _pixels(image)
    height, width = pixels.shape[:2]
    stride = patch_size - overlap
    padded_height = _padded_length(height, patch_size, stride)
    padded_width = _padded_length(width, patch_size, stride)

    pad = ((0, padded_height - height), (0, padded_width - width), (0, 0))
    mode = "reflect" if min(height, width) > 1 else "edge"
    padded = np.pad(pixels, pad, mode=mode)

    rows = (padded_height - patch_size) // stride + 1
    cols = (padded_width - patch_size) // stride + 1
    slots = [
        PatchSlot(index=r * cols + c, row=r, col=c, y=r * stride, x=c * stride)
        for r in range(rows) for c in range(cols)
    ]
    return PatchGrid(
        height=height,
        width=width,
        patch_size=patch_size,
        overlap=overlap,
        padded_height=padded_height,
        padded_width=padded_width,
        rows=rows,
        cols=cols,
        slots=slots,
        padded=padded,
    )

class DetectMeta(Meta):

    def __init__(self, params: ModelParams, threshold: float, xrai: XraiConfig):
        self.params = params
        self.threshold = threshold
        self.xrai = xrai

def selection_tag(element: Element, threshold: float) -> Optional[str]:
    """
        Routing tag of a slot: None until it is classified.
    """
    if element.probability is None:
        return None
    return SELECTED if element.probability >= threshold else SKIPPED

def classify_slot(element: Element, meta: DetectMeta) -> Element:
    element.probability = float(predict_proba(meta.params, np.asarray(element.input)[None])[0])
    return element

def attribute_slot(input: np.ndarray, output: np.ndarray, meta: DetectMeta) -> np.ndarray:
    return xrai_attribution(meta.params, input, meta.xrai).scores

def skip_slot(input: np.ndarray, output: np.ndarray, meta: DetectMeta) -> np.ndarray:
    return np.zeros(np.shape(input)[:2])

def classification_process(meta: DetectMeta, logger = None) -> Process:
    return Process(
        selector=Selector(
            chains=[AllChain([Mutable(classify_slot, id="classify")], id="classification")],
            logger=logger,
        ),
        meta=meta,
        id="classification",
        logger=logger,
    )

def detection_process(meta: DetectMeta, logger = None) -> Process:
    """
        Classification followed by per-slot attribution or skipping.
    """
    attribution = Process(
        selector=Selector(
            chains=[
                Chain([Transformer(attribute_slot, id="xrai")], tag=SELECTED, id="attribution"),
                Chain([Transformer(skip_slot, id="zero")], tag=SKIPPED, id="skip"),
            ],
            logger=logger,
        ),
        meta=meta,
        id="attribution",
        logger=logger,
    )
    return classification_process(meta, logger).append_subprocess(attribution)

def _elements(grid: PatchGrid, threshold: float) -> List[Element]:
    tag = partial(selection_tag, threshold=threshold)
    return [
        Element(input=grid.patch(slot), slot=slot.index, tag=tag, id=f"slot-{slot.row}-{slot.col}")
        for slot in grid.slots
    ]

def _run(process: Process, elements: List[Element], jobs: Optional[int], timeout: float = 600.0) -> Result:
    if jobs is not None and jobs > 1 and len(elements) > 1:
        try:
            result = asyncio.run(process.run_async(elements, jobs=jobs, timeout=timeout))
        except PoolTimeout:
            raise DomainError(f"per-slot processing did not finish within {timeout:g}s")
    else:
        result = process.run(elements)
    result = result.sorted(key=lambda e: e.slot)

    failures = [n.msg for n in result.notices if n.level == Level.ERROR]
    for element in result.elements_with([Level.ERROR]):
        failures += [f"{element.id}: {n.msg}" for n in element.notices if n.level == Level.ERROR]
    if failures:
        raise DomainError("per-slot processing failed: " + "; ".join(sorted(failures)))
    return result

def _check_threshold(threshold: float):
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"selection threshold must be in [0,1], got {threshold}")

@dataclass
class PatchSelection:

    selected: List[int]
    probabilities: np.ndarray

def select_patches(grid: PatchGrid, image: ImageLike, params: ModelParams, threshold: float,
                   jobs: Optional[int] = None, logger = None) -> PatchSelection:

    """
        Classifies every slot and keeps those whose probability is at least
        the threshold. All probabilities are returned in slot order.

        Args:
            grid (PatchGrid): Slots of the image
            image (SkyImage | np.ndarray): The tiled image (the grid carries its padded pixels)
            params (ModelParams): Classifier
            threshold (float): In [0,1]
            jobs (int): Worker processes, sequential when None or 1
            logger: Optional logger

        Returns:
            PatchSelection
    """

    _check_threshold(threshold)
    if grid.padded is None:
        grid = tile(image, grid.overlap, grid.patch_size)
    meta = DetectMeta(params, threshold, XraiConfig())
    result = _run(classification_process(meta, logger), _elements(grid, threshold), jobs)
    probabilities = np.array([e.probability for e in result.elements], dtype=np.float64)
    selected = [e.slot for e in result.elements if e.tag == SELECTED]
    return PatchSelection(selected=selected, probabilities=probabilities)

def stitch(heatmaps: Mapping[int, np.ndarray], grid: PatchGrid) -> np.ndarray:

    """
        Reassembles per-slot heatmaps (keyed by slot index) into an H x W
        map. Slots without a heatmap contribute zeros; every pixel is the
        mean over the slots covering it, and padding is cropped away.
        Sums and counts are accumulated in slot order and divided once.

        Args:
            heatmaps ({int: np.ndarray}): patch_size x patch_size maps
            grid (PatchGrid): Slots the heatmaps belong to

        Returns:
            np.ndarray
    """

    size = grid.patch_size
    sums = np.zeros((grid.padded_height, grid.padded_width), dtype=np.float64)
    counts = np.zeros_like(sums)
    for index in heatmaps:
        if not 0 <= int(index) < len(grid.slots):
            raise DomainError(f"heatmap for slot {index} but the grid has {len(grid.slots)} slots")

    for slot in grid.slots:
        counts[slot.y:slot.y + size, slot.x:slot.x + size] += 1.0
        heatmap = heatmaps.get(slot.index)
        if heatmap is None:
            continue
        heatmap = np.asarray(heatmap, dtype=np.float64)
        if heatmap.shape != (size, size):
            raise DomainError(f"heatmap of slot {slot.index} has shape {heatmap.shape}, expected {(size, size)}")
        sums[slot.y:slot.y + size, slot.x:slot.x + size] += heatmap

    return (sums / counts)[:grid.height, :grid.width]

def _normalize(heatmap: np.ndarray) -> np.ndarray:
    lo, hi = float(heatmap.min()), float(heatmap.max())
    if hi > lo:
        return (heatmap - lo) / (hi - lo)
    return (heatmap > 0).astype(np.float64)

def _contours_of(binary: np.ndarray, weights: np.ndarray, min_area: int, label: str) -> List[Contour]:
    opened = ndimage.binary_opening(binary, structure=_OPEN)
    contours = []
    for component in components(opened, min_area=min_area):
        polygon = trace_outer_boundary(component)
        if len(polygon) < 3:
            continue
        confidence = float(np.clip(np.mean(weights[component]), 0.0, 1.0))
        contours.append(Contour(polygon=polygon, confidence=confidence, label=label))
    return contours

def heatmap_to_contours(heatmap: np.ndarray, percentile: float = DEFAULT_PERCENTILE, min_area: int = DEFAULT_MIN_AREA,
                        label: str = "dso", image_id: str = None) -> ContourSet:

    """
        Binarizes the heatmap at the given percentile of its positive
        values, opens the mask with a 3 x 3 square and traces the outer
        boundary of every connected component of at least min_area pixels.
        Confidence is the mean min-max normalized heatmap inside.

        Args:
            heatmap (np.ndarray): H x W full-frame heatmap
            percentile (float): In (0, 100)
            min_area (int): Smallest component kept, in pixels
            label (str): Label of every contour
            image_id (str): Image id of the set

        Returns:
            ContourSet
    """

    if not 0.0 < percentile < 100.0:
        raise DomainError(f"percentile must be in (0,100), got {percentile}")
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim != 2:
        raise DomainError(f"expected an H x W heatmap, got shape {heatmap.shape}")
    if not np.all(np.isfinite(heatmap)):
        raise DomainError("heatmap contains non-finite values")

    height, width = heatmap.shape
    positive = heatmap > 0
    if not positive.any():
        return ContourSet(width=width, height=height, image=image_id)

    level = np.percentile(heatmap[positive], percentile)
    binary = positive & (heatmap >= level)
    return ContourSet(
        width=width,
        height=height,
        contours=_contours_of(binary, _normalize(heatmap), min_area, label),
        image=image_id,
    )

def remove_stars(image: ImageLike, k: float = 5.0, star_scale_max: int = 6, window: int = 7) -> ImageLike:

    """
        Morphological star suppression. The white top-hat of the luminance
        (structuring element 2 * star_scale_max + 1) isolates compact
        peaks; peaks above median + k * sigma (sigma-clipped) that fit in
        the structuring element are stars. Each star, dilated to cover its
        wings, is replaced by the per-channel median of the non-star pixels
        within `window` pixels around it. Larger structures are untouched.

        Args:
            image (SkyImage | np.ndarray): H x W x 3 image
            k (float): Detection threshold in noise sigmas
            star_scale_max (int): Largest star radius in pixels
            window (int): Margin of the local median window

        Returns:
            SkyImage | np.ndarray: same kind as the input
    """

    pixels = _pixels(image)
    lum = luminance(pixels).astype(np.float64)
    size = 2 * star_scale_max + 1
    tophat = lum - ndimage.grey_opening(lum, size=(size, size), mode="reflect")
    _, median, std = sigma_clipped_stats(tophat, sigma=3.0, maxiters=5)
    peaks = tophat > median + k * max(float(std), 1e-12)

    labels, n = ndimage.label(peaks)
    if n == 0:
        return _like(image, pixels.copy())
    areas = ndimage.sum_labels(np.ones_like(lum), labels, index=np.arange(1, n + 1))
    compact = np.zeros(n + 1, dtype=bool)
    compact[1:] = areas <= size * size
    stars = ndimage.binary_dilation(compact[labels], structure=_OPEN, iterations=3)

    cleaned = pixels.copy()
    star_labels, _ = ndimage.label(stars)
    for slices in ndimage.find_objects(star_labels):
        y0, y1 = max(0, slices[0].start - window), min(lum.shape[0], slices[0].stop + window)
        x0, x1 = max(0, slices[1].start - window), min(lum.shape[1], slices[1].stop + window)
        local_stars = stars[y0:y1, x0:x1]
        sky = ~local_stars
        if not sky.any():
            continue
        patch = cleaned[y0:y1, x0:x1]
        fill = np.median(pixels[y0:y1, x0:x1][sky], axis=0)
        patch[local_stars] = fill

    return _like(image, cleaned)

def _background(lum: np.ndarray, box_size: int, logger = None) -> Tuple[np.ndarray, float]:
    box = max(1, min(box_size, lum.shape[0], lum.shape[1]))
    try:
        bkg = Background2D(
            lum,
            box_size=(box, box),
            filter_size=(3, 3),
            sigma_clip=SigmaClip(sigma=3.0),
            bkg_estimator=MedianBackground(),
        )
        return np.asarray(bkg.background, dtype=np.float64), float(bkg.background_rms_median)
    except Exception as e:
        if logger is not None:
            logger.warning(f"Background2D failed ({e}), using a sigma-clipped scalar background")
        _, median, std = sigma_clipped_stats(lum, sigma=3.0, maxiters=9)
        return np.full(lum.shape, float(median)), float(std)

def baseline_contours(image: ImageLike, starless: Optional[ImageLike] = None, k: float = 3.0, box_size: int = 128,
                      min_area: int = DEFAULT_MIN_AREA, label: str = "dso", image_id: str = None, logger = None) -> ContourSet:

    """
        Contours of what stands out of the background once stars are gone:
        remove_stars (or the given starless image), subtract a large-box
        median background, keep residuals above k * background rms, then
        open and trace as in heatmap_to_contours. Confidence is the mean
        residual inside, normalized by the frame's largest residual.

        Args:
            image (SkyImage | np.ndarray): H x W x 3 image
            starless (SkyImage | np.ndarray): Externally produced starless image of the same size
            k (float): Threshold in background rms
            box_size (int): Background box side in pixels
            min_area (int): Smallest component kept, in pixels
            label (str): Label of every contour
            image_id (str): Image id of the set
            logger: Optional logger

        Returns:
            ContourSet
    """

    pixels = _pixels(image)
    height, width = pixels.shape[:2]
    if starless is None:
        clean = remove_stars(pixels)
    else:
        clean = _pixels(starless)
        if clean.shape != pixels.shape:
            raise DomainError(f"starless image shape {clean.shape} does not match image shape {pixels.shape}")

    lum = luminance(clean).astype(np.float64)
    background, rms = _background(lum, box_size, logger)
    residual = lum - background
    binary = residual > k * rms
    if not binary.any():
        return ContourSet(width=width, height=height, image=image_id)

    peak = float(residual.max())
    weights = np.clip(residual / peak, 0.0, 1.0) if peak > 0 else np.zeros_like(residual)
    return ContourSet(
        width=width,
        height=height,
        contours=_contours_of(binary, weights, min_area, label),
        image=image_id,
    )

def rescale(image: ImageLike, factor: float, patch_size: int = PATCH_SIZE) -> np.ndarray:

    """
        Bilinear rescaling to round(H * factor) x round(W * factor). The
        size is not snapped to a multiple of the patch size: `tile` pads
        the remainder by reflection, and `detect` resizes the stitched
        heatmap back to H x W, so the off-multiple edge only costs the
        padded slots. The result must still hold one full patch.
    """

    if not factor > 0:
        raise DomainError(f"scale factor must be > 0, got {factor}")
    pixels = _pixels(image)
    if factor == 1.0:
        return pixels
    height, width = pixels.shape[:2]
    size = (max(1, int(round(height * factor))), max(1, int(round(width * factor))))
    if min(size) < patch_size:
        raise DomainError(f"image of {height}x{width} scaled by {factor} is {size[0]}x{size[1]}, smaller than one {patch_size}x{patch_size} patch")
    return resize(pixels, size + (3,), order=1, mode="reflect", anti_aliasing=factor < 1.0, preserve_range=True).astype(np.float32)

@dataclass(frozen=True)
class DetectConfig:

    select_threshold: float = 0.5
    percentile: float = DEFAULT_PERCENTILE
    min_area: int = DEFAULT_MIN_AREA
    overlap: int = 0
    scale: float = 1.0
    xrai: XraiConfig = XraiConfig()
    jobs: Optional[int] = None
    timeout: float = 600.0

    def validate(self):
        if not 0.0 <= self.select_threshold <= 1.0:
            raise ConfigurationError(f"select_threshold must be in [0,1], got {self.select_threshold}")
        if not 0.0 < self.percentile < 100.0:
            raise ConfigurationError(f"percentile must be in (0,100), got {self.percentile}")
        if self.min_area < 1:
            raise ConfigurationError(f"min_area must be >= 1, got {self.min_area}")
        if not 0 <= self.overlap < PATCH_SIZE:
            raise ConfigurationError(f"overlap must be in [0, {PATCH_SIZE - 1}], got {self.overlap}")
        if not self.scale > 0:
            raise ConfigurationError(f"scale must be > 0, got {self.scale}")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigurationError(f"jobs must be >= 1, got {self.jobs}")
        if not self.timeout > 0:
            raise ConfigurationError(f"timeout must be > 0, got {self.timeout}")
        self.xrai.validate()
        return self

@dataclass
class RunStats:

    mode: str = "xrai"
    slot_count: int = 0
    selected_count: int = 0
    forward_calls: int = 0
    attribution_calls: int = 0
    gradient_evaluations: int = 0
    wall_time: float = 0.0
    scale: float = 1.0
    select_threshold: Optional[float] = None
    probabilities: List[float] = field(default_factory=list)
    selected_slots: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "slot_count": self.slot_count,
            "selected_count": self.selected_count,
            "forward_calls": self.forward_calls,
            "attribution_calls": self.attribution_calls,
            "gradient_evaluations": self.gradient_evaluations,
            "wall_time": round(self.wall_time, 6),
            "scale": self.scale,
            "select_threshold": self.select_threshold,
            "probabilities": [round(float(p), 6) for p in self.probabilities],
            "selected_slots": list(self.selected_slots),
        }

def detect(image: ImageLike, params: ModelParams, config: DetectConfig = DetectConfig(),
           logger = None) -> Tuple[np.ndarray, ContourSet, RunStats]:

    """
        tile -> select -> XRAI per selected slot -> stitch -> contours.

        With a scale factor other than 1 the image is rescaled before
        tiling and the stitched heatmap is resized back, so contours are
        always in the coordinates of the given image.

        Args:
            image (SkyImage | np.ndarray): H x W x 3 image
            params (ModelParams): Trained classifier
            config (DetectConfig): Detection parameters
            logger: Optional logger

        Returns:
            (np.ndarray, ContourSet, RunStats): full-frame heatmap, contours, statistics
    """

    start = time.perf_counter()
    config.validate()
    pixels = _pixels(image)
    height, width = pixels.shape[:2]
    work = rescale(pixels, config.scale) if config.scale != 1.0 else pixels

    grid = tile(work, config.overlap)
    meta = DetectMeta(params, config.select_threshold, config.xrai)
    result = _run(detection_process(meta, logger), _elements(grid, config.select_threshold), config.jobs, config.timeout)

    selected = [e.slot for e in result.elements if e.tag == SELECTED]
    heatmap = stitch({e.slot: e.output for e in result.elements}, grid)
    if heatmap.shape != (height, width):
        heatmap = resize(heatmap, (height, width), order=1, mode="reflect", anti_aliasing=False, preserve_range=True)

    contours = heatmap_to_contours(heatmap, config.percentile, config.min_area)
    stats = RunStats(
        mode="xrai",
        slot_count=len(grid),
        selected_count=len(selected),
        forward_calls=sum(1 for e in result.elements if e.probability is not None),
        attribution_calls=len(selected),
        gradient_evaluations=len(selected) * config.xrai.ig_steps * len(config.xrai.baselines),
        wall_time=time.perf_counter() - start,
        scale=config.scale,
        select_threshold=config.select_threshold,
        probabilities=[e.probability for e in result.elements],
        selected_slots=selected,
    )
    if logger is not None:
        logger.info(f"{stats.selected_count}/{stats.slot_count} slots selected, {len(contours)} contours in {stats.wall_time:.2f}s")
    return heatmap, contours, stats

def detect_baseline(image: ImageLike, starless: Optional[ImageLike] = None, min_area: int = DEFAULT_MIN_AREA,
                    logger = None) -> Tuple[ContourSet, RunStats]:
    start = time.perf_counter()
    contours = baseline_contours(image, starless=starless, min_area=min_area, logger=logger)
    return contours, RunStats(mode="baseline", wall_time=time.perf_counter() - start)

def draw_contours(image: ImageLike, contours: ContourSet, color: Tuple[int, int, int] = (0, 255, 0), thickness: int = 2) -> np.ndarray:
    """
        8-bit RGB rendering of the image with the contours drawn over it.
    """
    canvas = np.round(np.clip(_pixels(image), 0.0, 1.0) * 255).astype(np.uint8)
    canvas = np.ascontiguousarray(canvas)
    # 4 fractional bits for sub-pixel vertices
    polygons = [np.round(np.asarray(c.polygon) * 16).astype(np.int32).reshape(-1, 1, 2) for c in contours if len(c.polygon) >= 3]
    if polygons:
        cv2.polylines(canvas, polygons, isClosed=True, color=color, thickness=thickness, lineType=cv2.LINE_AA, shift=4)
    return canvas

def write_artifacts(out_dir, stem: str, image: ImageLike, contours: ContourSet, stats: RunStats,
                    heatmap: Optional[np.ndarray] = None) -> Dict[str, Path]:

    """
        Writes <stem>_annotated.png, <stem>_heatmap.png (+ .json sidecar,
        when a heatmap is given), <stem>_contours.json and <stem>_stats.json.

        Returns:
            {str: Path}: artifact kind -> path
    """

    out_dir = Path(out_dir)
    paths = {
        "annotated": out_dir / f"{stem}_annotated.png",
        "contours": out_dir / f"{stem}_contours.json",
        "stats": out_dir / f"{stem}_stats.json",
    }
    io.save_rgb8(paths["annotated"], draw_contours(image, contours))
    if heatmap is not None:
        paths["heatmap"] = out_dir / f"{stem}_heatmap.png"
        io.save_heatmap(paths["heatmap"], heatmap)
    if contours.image is None:
        contours.image = stem
    io.write_json(paths["contours"], contours.to_dict())
    io.write_json(paths["stats"], stats.to_dict())
    return paths
