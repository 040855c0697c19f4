"""
Procedural sky images with ground truth.

Frames are a starfield (Gaussian PSF stars, linear light-pollution
gradient, Gaussian read noise) plus additive deep-sky object overlays.
Every function is a pure function of its arguments and seed, and all
randomness of a call is split into independent streams with
`derive_seed`, so e.g. the noise of a frame does not change when its
star count does.
"""
import math
import numpy as np

from enum import Enum
from pathlib import Path
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple
from scipy import ndimage
from dsolocate import io
from dsolocate.evaluation import AnnotatedObject, Annotation
from dsolocate.exceptions import ArtifactIOError, ConfigurationError, DomainError
from dsolocate.geometry import components, trace_outer_boundary
from dsolocate.utils import derive_seed

PATCH_SIZE = 224

# share of patch pixels a truth mask must cover for the patch to count as dso_present
MIN_VISIBLE_FRACTION = 0.005

# truth masks are where the overlay exceeds this share of the object's brightness
MASK_THRESHOLD = 0.1

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

LIGHT_POLLUTION_TINT = (1.0, 0.85, 0.65)

@dataclass(frozen=True)
class InstrumentProfile:

    name: str = "desk"
    width: int = 1120
    height: int = 1120
    psf_fwhm: float = 2.5
    read_noise_sigma: float = 0.01
    sky_gradient_max: float = 0.08
    sky_level: float = 0.04
    star_density: float = 150.0
    full_frame: bool = True

    def validate(self):
        if self.full_frame and (self.width < PATCH_SIZE or self.height < PATCH_SIZE):
            raise ConfigurationError(f"profile '{self.name}': full frames need at least {PATCH_SIZE}x{PATCH_SIZE} pixels, got {self.width}x{self.height}")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"profile '{self.name}': empty frame {self.width}x{self.height}")
        if not self.psf_fwhm > 0:
            raise ConfigurationError(f"profile '{self.name}': psf_fwhm must be > 0, got {self.psf_fwhm}")
        for name in ("read_noise_sigma", "sky_gradient_max", "sky_level", "star_density"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"profile '{self.name}': {name} must be >= 0")
        return self

    @property
    def default_star_count(self) -> int:
        return int(round(self.star_density * self.width * self.height / 1e6))

PROFILES: Dict[str, InstrumentProfile] = {
    "desk": InstrumentProfile(),
    "stellina": InstrumentProfile(name="stellina", width=3096, height=2080, psf_fwhm=3.0),
    "vespera": InstrumentProfile(name="vespera", width=1920, height=1080, psf_fwhm=2.2),
}

def get_profile(name: str) -> InstrumentProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown instrument profile '{name}', expected one of {sorted(PROFILES)}")

class DsoKind(str, Enum):

    GALAXY = "galaxy"
    NEBULA = "nebula"
    GLOBULAR_CLUSTER = "globular_cluster"

KINDS = (DsoKind.GALAXY, DsoKind.NEBULA, DsoKind.GLOBULAR_CLUSTER)

# share of each kind among random objects
KIND_WEIGHTS = (0.45, 0.35, 0.2)

class Label(str, Enum):

    DSO_PRESENT = "dso_present"
    DSO_ABSENT = "dso_absent"

@dataclass(frozen=True)
class DsoSpec:
    """
    One deep-sky object. `scale` is the radius (semi-major axis for
    galaxies) of the object's visible extent, `shape_params` holds the
    kind-specific knobs:

        galaxy:           sersic_index, ellipticity, angle (radians)
        nebula:           smoothing_radius, octaves
        globular_cluster: star_count, concentration
    """

    kind: DsoKind
    center: Tuple[float, float]
    scale: float
    brightness: float
    shape_params: Dict[str, float] = field(default_factory=dict)

    @staticmethod
    def galaxy(center, scale, brightness, sersic_index=1.0, ellipticity=0.0, angle=0.0):
        return DsoSpec(DsoKind.GALAXY, tuple(center), scale, brightness,
                       {"sersic_index": sersic_index, "ellipticity": ellipticity, "angle": angle})

    @staticmethod
    def nebula(center, scale, brightness, smoothing_radius=None, octaves=3):
        return DsoSpec(DsoKind.NEBULA, tuple(center), scale, brightness,
                       {"smoothing_radius": smoothing_radius or scale / 3.0, "octaves": octaves})

    @staticmethod
    def cluster(center, scale, brightness, star_count=300, concentration=2.0):
        return DsoSpec(DsoKind.GLOBULAR_CLUSTER, tuple(center), scale, brightness,
                       {"star_count": star_count, "concentration": concentration})

    def validate(self, profile: InstrumentProfile):
        if not self.scale > 0:
            raise DomainError(f"{self.kind.value}: scale must be > 0, got {self.scale}")
        if not 0.0 <= self.brightness <= 1.0:
            raise DomainError(f"{self.kind.value}: brightness must be in [0,1], got {self.brightness}")
        x, y = self.center
        if not (0 <= x < profile.width and 0 <= y < profile.height):
            raise DomainError(f"{self.kind.value}: center {self.center} outside {profile.width}x{profile.height} frame")
        return self

@dataclass
class SkyImage:

    pixels: np.ndarray
    seed: Optional[int] = None
    profile: Optional[str] = None

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

@dataclass
class LabeledPatch:
    """
    A 224 x 224 crop. Pixels are stored as 16-bit intensities (the PNG
    representation), `intensities` gives the float view the model sees.
    """

    pixels: np.ndarray
    label: Label
    truth_mask: Optional[np.ndarray] = None
    source: Tuple[int, int, int] = (0, 0, 0)

    @property
    def intensities(self) -> np.ndarray:
        return io.from_uint16(self.pixels)

    @property
    def coverage(self) -> float:
        if self.truth_mask is None:
            return 0.0
        return float(np.mean(self.truth_mask))

@dataclass
class DatasetSplit:

    train: List[LabeledPatch]
    val: List[LabeledPatch]
    test: List[LabeledPatch]
    seed: int
    profile: str = "desk"

    def parts(self) -> Dict[str, List[LabeledPatch]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def counts(self) -> Dict[str, Dict[str, int]]:
        counts = {}
        for name, patches in self.parts().items():
            present = sum(1 for p in patches if p.label == Label.DSO_PRESENT)
            counts[name] = {"total": len(patches), "present": present, "absent": len(patches) - present}
        return counts

def label_for(mask: Optional[np.ndarray]) -> Label:
    if mask is not None and np.mean(mask) >= MIN_VISIBLE_FRACTION:
        return Label.DSO_PRESENT
    return Label.DSO_ABSENT

def _gaussian_stamp(canvas: np.ndarray, x: float, y: float, amplitude, sigma: float):
    """
        Adds amplitude * exp(-r^2 / 2 sigma^2) around (x, y), truncated at 4 sigma.
        amplitude may be a scalar or a per-channel vector.
    """
    h, w = canvas.shape[:2]
    radius = int(math.ceil(4.0 * sigma))
    x0, x1 = max(0, int(math.floor(x)) - radius), min(w, int(math.floor(x)) + radius + 2)
    y0, y1 = max(0, int(math.floor(y)) - radius), min(h, int(math.floor(y)) + radius + 2)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    profile = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sigma ** 2))
    if canvas.ndim == 3:
        canvas[y0:y1, x0:x1] += profile[:, :, None] * np.asarray(amplitude, dtype=canvas.dtype)[None, None, :]
    else:
        canvas[y0:y1, x0:x1] += profile * amplitude

def _place_stars(rng: np.random.Generator, count: int, width: int, height: int, min_separation: float, margin: float) -> np.ndarray:

    """
        Uniform star positions, rejection-sampled so that no two stars are
        closer than min_separation.
    """

    positions = np.empty((0, 2))
    attempts = 0
    max_attempts = 50 * count + 1000
    while len(positions) < count:
        if attempts >= max_attempts:
            raise ConfigurationError(
                f"could not place {count} stars {min_separation:.1f} px apart in a {width}x{height} frame"
            )
        batch = rng.uniform((margin, margin), (width - margin, height - margin), size=(max(8, count - len(positions)), 2))
        attempts += len(batch)
        for candidate in batch:
            if len(positions) == count:
                break
            if len(positions) and np.min(np.hypot(*(positions - candidate).T)) < min_separation:
                continue
            positions = np.vstack([positions, candidate])
    return positions

def render_starfield(profile: InstrumentProfile, star_count: int, seed: int) -> SkyImage:

    """
        Renders `star_count` Gaussian-PSF stars on a sky background with a
        linear light-pollution gradient and Gaussian read noise.

        Args:
            profile (InstrumentProfile): Frame geometry and sky parameters
            star_count (int): Number of stars, at least 3 FWHM apart
            seed (int): Seed of the frame

        Returns:
            SkyImage
    """

    profile.validate()
    if star_count < 0:
        raise ConfigurationError(f"star_count must be >= 0, got {star_count}")

    h, w = profile.height, profile.width
    sigma = profile.psf_fwhm * FWHM_TO_SIGMA
    pixels = np.full((h, w, 3), profile.sky_level, dtype=np.float64)

    star_rng = np.random.default_rng(derive_seed(seed, "stars"))
    positions = _place_stars(
        rng=star_rng,
        count=star_count,
        width=w,
        height=h,
        min_separation=3.0 * profile.psf_fwhm,
        margin=min(profile.psf_fwhm, (min(w, h) - 1) / 2.0),
    )
    amplitudes = np.exp(star_rng.uniform(math.log(0.05), math.log(0.9), size=star_count))
    # blue-white to orange stars
    temperatures = star_rng.uniform(0.0, 1.0, size=star_count)
    for (x, y), amp, t in zip(positions, amplitudes, temperatures):
        color = np.array([1.0, 0.9 + 0.1 * t, 0.75 + 0.25 * t])
        _gaussian_stamp(pixels, x, y, amp * color / color.max(), sigma)

    if profile.sky_gradient_max > 0:
        sky_rng = np.random.default_rng(derive_seed(seed, "sky"))
        theta = sky_rng.uniform(0.0, 2.0 * math.pi)
        strength = profile.sky_gradient_max * sky_rng.uniform(0.3, 1.0)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = xx * math.cos(theta) + yy * math.sin(theta)
        span = ramp.max() - ramp.min()
        ramp = (ramp - ramp.min()) / span if span > 0 else np.zeros_like(ramp)
        pixels += strength * ramp[:, :, None] * np.asarray(LIGHT_POLLUTION_TINT)[None, None, :]

    if profile.read_noise_sigma > 0:
        noise_rng = np.random.default_rng(derive_seed(seed, "noise"))
        pixels += noise_rng.normal(0.0, profile.read_noise_sigma, size=pixels.shape)

    return SkyImage(
        pixels=np.clip(pixels, 0.0, 1.0).astype(np.float32),
        seed=seed,
        profile=profile.name,
    )

def _bounding_box(spec: DsoSpec, profile: InstrumentProfile, radius: float):
    x, y = spec.center
    x0, x1 = max(0, int(math.floor(x - radius))), min(profile.width, int(math.ceil(x + radius)) + 1)
    y0, y1 = max(0, int(math.floor(y - radius))), min(profile.height, int(math.ceil(y + radius)) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    return (slice(y0, y1), slice(x0, x1)), xx - x, yy - y

def _galaxy_field(spec: DsoSpec, profile: InstrumentProfile, rng: np.random.Generator):
    # Sersic law normalized so that the isophote at MASK_THRESHOLD * brightness sits at `scale`
    n = float(spec.shape_params.get("sersic_index", 1.0))
    e = float(spec.shape_params.get("ellipticity", 0.0))
    angle = float(spec.shape_params.get("angle", 0.0))
    if not n > 0 or not 0.0 <= e < 1.0:
        raise DomainError(f"galaxy: sersic_index must be > 0 and ellipticity in [0,1), got {n}, {e}")

    box, dx, dy = _bounding_box(spec, profile, spec.scale * min(3.0 ** n, 8.0))
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)
    r = np.hypot(u, v / (1.0 - e))
    field = spec.brightness * np.exp(-math.log(1.0 / MASK_THRESHOLD) * (r / spec.scale) ** (1.0 / n))
    return box, field, (1.0, 0.92, 0.8), field

def _nebula_field(spec: DsoSpec, profile: InstrumentProfile, rng: np.random.Generator):
    smoothing = float(spec.shape_params.get("smoothing_radius", spec.scale / 3.0))
    octaves = int(spec.shape_params.get("octaves", 3))
    if not smoothing > 0 or octaves < 1:
        raise DomainError(f"nebula: smoothing_radius must be > 0 and octaves >= 1, got {smoothing}, {octaves}")

    box, dx, dy = _bounding_box(spec, profile, spec.scale * 2.0)
    white = rng.normal(size=dx.shape)
    texture = np.zeros_like(white)
    for k in range(octaves):
        texture += ndimage.gaussian_filter(white, sigma=max(smoothing / 2 ** k, 0.5), mode="reflect") * 0.5 ** k
    std = texture.std()
    texture = (texture - texture.mean()) / std if std > 0 else np.zeros_like(texture)
    texture = np.clip(1.0 + 0.35 * texture, 0.3, 1.7)

    envelope = np.exp(-math.log(1.0 / MASK_THRESHOLD) * (np.hypot(dx, dy) / spec.scale) ** 2)
    value = envelope * texture
    value[value < 0.5 * MASK_THRESHOLD] = 0.0
    field = spec.brightness * np.minimum(value, 1.0)
    color = (1.0, 0.35, 0.45) if rng.uniform() < 0.6 else (0.5, 0.7, 1.0)
    return box, field, color, field

def _cluster_field(spec: DsoSpec, profile: InstrumentProfile, rng: np.random.Generator):
    star_count = int(spec.shape_params.get("star_count", 300))
    concentration = float(spec.shape_params.get("concentration", 2.0))
    if star_count < 0 or not concentration > 0:
        raise DomainError(f"globular_cluster: star_count must be >= 0 and concentration > 0, got {star_count}, {concentration}")

    box, dx, dy = _bounding_box(spec, profile, spec.scale * 1.2)
    field = 0.6 * np.exp(-math.log(1.0 / MASK_THRESHOLD) * (np.hypot(dx, dy) / spec.scale) ** 2)

    sigma = profile.psf_fwhm * FWHM_TO_SIGMA
    radii = spec.scale * rng.uniform(0.0, 1.0, size=star_count) ** concentration
    angles = rng.uniform(0.0, 2.0 * math.pi, size=star_count)
    amplitudes = rng.uniform(0.2, 0.6, size=star_count)
    ox, oy = -dx[0, 0], -dy[0, 0]
    for r, a, amp in zip(radii, angles, amplitudes):
        _gaussian_stamp(field, ox + r * math.cos(a), oy + r * math.sin(a), amp, sigma)

    peak = field.max()
    field = spec.brightness * field / peak if peak > 0 else field
    # the member stars pile up in the core, the extent follows the smooth halo
    extent = spec.brightness * np.exp(-math.log(1.0 / MASK_THRESHOLD) * (np.hypot(dx, dy) / spec.scale) ** 2)
    return box, field, (1.0, 0.95, 0.85), extent

_FIELDS = {
    DsoKind.GALAXY: _galaxy_field,
    DsoKind.NEBULA: _nebula_field,
    DsoKind.GLOBULAR_CLUSTER: _cluster_field,
}

def render_dso(spec: DsoSpec, profile: InstrumentProfile, seed: int) -> Tuple[SkyImage, np.ndarray]:

    """
        Renders one deep-sky object as a full-frame additive overlay plus
        its truth mask: the 4-connected region around the object where the
        overlay exceeds MASK_THRESHOLD * brightness, holes filled. Clusters
        are measured on their smooth halo rather than on the member stars,
        so the mask reaches out to `scale`. When the
        thresholded region falls apart, the piece holding the center (else
        the largest piece) is kept.

        Args:
            spec (DsoSpec): The object
            profile (InstrumentProfile): Frame geometry
            seed (int): Seed of the object

        Returns:
            (SkyImage, np.ndarray): overlay and H x W boolean mask
    """

    profile.validate()
    spec.validate(profile)

    rng = np.random.default_rng(seed)
    box, field, color, extent = _FIELDS[DsoKind(spec.kind)](spec, profile, rng)

    overlay = np.zeros((profile.height, profile.width, 3), dtype=np.float32)
    overlay[box] = (field[:, :, None] * np.asarray(color)[None, None, :]).astype(np.float32)

    mask = np.zeros((profile.height, profile.width), dtype=bool)
    if spec.brightness > 0:
        local = extent > MASK_THRESHOLD * spec.brightness
        pieces = components(local)
        if pieces:
            cy = int(round(spec.center[1])) - box[0].start
            cx = int(round(spec.center[0])) - box[1].start
            inside = [p for p in pieces if 0 <= cy < p.shape[0] and 0 <= cx < p.shape[1] and p[cy, cx]]
            mask[box] = inside[0] if inside else max(pieces, key=np.sum)

    return SkyImage(pixels=overlay, seed=seed, profile=profile.name), mask

def _compose(profile: InstrumentProfile, dso_specs: List[DsoSpec], seed: int, star_count: Optional[int]):
    stars = render_starfield(
        profile=profile,
        star_count=profile.default_star_count if star_count is None else star_count,
        seed=derive_seed(seed, "starfield"),
    )
    pixels = stars.pixels.astype(np.float64)
    masks = []
    for i, spec in enumerate(dso_specs):
        overlay, mask = render_dso(spec, profile, derive_seed(seed, "dso", i))
        pixels += overlay.pixels
        masks.append(mask)
    image = SkyImage(pixels=np.clip(pixels, 0.0, 1.0).astype(np.float32), seed=seed, profile=profile.name)
    return image, masks

def render_scene(profile: InstrumentProfile, dso_specs: List[DsoSpec], seed: int,
                 star_count: Optional[int] = None, label_mode: str = "dso", image_id: str = "") -> Tuple[SkyImage, Annotation]:

    """
        Full frame = starfield + every overlay. The annotation has one
        polygon per connected component of the union of the truth masks,
        so overlapping objects share a polygon.

        Args:
            profile (InstrumentProfile): Frame geometry
            dso_specs ([DsoSpec]): Objects of the scene
            seed (int): Scene seed
            star_count (int): Defaults to the profile's star density
            label_mode (str): "dso" for the single class, "kind" for per-kind labels
            image_id (str): Image id written into the annotation

        Returns:
            (SkyImage, Annotation)
    """

    if label_mode not in ("dso", "kind"):
        raise ConfigurationError(f"label_mode must be 'dso' or 'kind', got '{label_mode}'")

    image, masks = _compose(profile, dso_specs, seed, star_count)
    union = np.zeros((profile.height, profile.width), dtype=bool)
    for mask in masks:
        union |= mask

    objects = []
    for component in components(union):
        label = "dso"
        if label_mode == "kind":
            overlaps = [int(np.sum(component & m)) for m in masks]
            label = DsoKind(dso_specs[int(np.argmax(overlaps))].kind).value
        objects.append(AnnotatedObject(label=label, polygon=trace_outer_boundary(component)))

    annotation = Annotation(
        image=image_id,
        width=profile.width,
        height=profile.height,
        objects=objects,
    )
    return image, annotation

def random_dso_specs(rng: np.random.Generator, profile: InstrumentProfile, count: int) -> List[DsoSpec]:

    """
        Draws `count` objects with kind-dependent sizes, faint to bright.
    """

    specs = []
    for _ in range(count):
        kind = KINDS[int(rng.choice(len(KINDS), p=KIND_WEIGHTS))]
        center = (float(rng.uniform(0, profile.width)), float(rng.uniform(0, profile.height)))
        brightness = float(rng.uniform(0.15, 0.7))
        if kind == DsoKind.GALAXY:
            specs.append(DsoSpec.galaxy(
                center=center,
                scale=float(rng.uniform(20, 80)),
                brightness=brightness,
                sersic_index=float(rng.uniform(0.6, 2.0)),
                ellipticity=float(rng.uniform(0.0, 0.6)),
                angle=float(rng.uniform(0.0, math.pi)),
            ))
        elif kind == DsoKind.NEBULA:
            specs.append(DsoSpec.nebula(center=center, scale=float(rng.uniform(40, 130)), brightness=brightness))
        else:
            specs.append(DsoSpec.cluster(
                center=center,
                scale=float(rng.uniform(25, 60)),
                brightness=brightness,
                star_count=int(rng.integers(150, 400)),
                concentration=float(rng.uniform(1.5, 3.0)),
            ))
    return specs

def random_scene_specs(rng: np.random.Generator, profile: InstrumentProfile, min_count: int = 1, max_count: int = 3) -> List[DsoSpec]:
    """
        1-3 objects kept away from the frame border.
    """
    specs = []
    for spec in random_dso_specs(rng, profile, int(rng.integers(min_count, max_count + 1))):
        margin = min(spec.scale, profile.width / 4, profile.height / 4)
        center = (
            float(np.clip(spec.center[0], margin, profile.width - 1 - margin)),
            float(np.clip(spec.center[1], margin, profile.height - 1 - margin)),
        )
        specs.append(replace(spec, center=center))
    return specs

def split_sizes(n: int) -> Tuple[int, int, int]:
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val

def build_dataset(n_patches: int, profile: InstrumentProfile, seed: int, crops_per_frame: int = 12, logger = None) -> DatasetSplit:

    """
        Renders frames with and without deep-sky objects, cuts random
        224 x 224 crops, labels them by mask coverage, keeps a balanced
        set of `n_patches` and splits it 80/10/10 with each split
        balanced to within one patch.

        Args:
            n_patches (int): Total number of patches, >= 10
            profile (InstrumentProfile): Frame geometry of the source frames
            seed (int): Dataset seed
            crops_per_frame (int): Crops cut from each frame
            logger: Optional logger

        Returns:
            DatasetSplit
    """

    if n_patches < 10:
        raise ConfigurationError(f"n_patches must be >= 10 to balance and split, got {n_patches}")
    profile.validate()
    if profile.width < PATCH_SIZE or profile.height < PATCH_SIZE:
        raise ConfigurationError(f"profile '{profile.name}' is smaller than one {PATCH_SIZE} px patch")

    quota = {Label.DSO_PRESENT: (n_patches + 1) // 2, Label.DSO_ABSENT: n_patches // 2}
    pools = {Label.DSO_PRESENT: [], Label.DSO_ABSENT: []}
    max_frames = 100 + 2 * n_patches

    frame_index = 0
    while any(len(pools[k]) < quota[k] for k in pools):
        if frame_index >= max_frames:
            raise ConfigurationError(f"could not fill a balanced dataset of {n_patches} patches from {max_frames} frames")

        rng = np.random.default_rng(derive_seed(seed, "frame", frame_index))
        n_objects = int(rng.integers(1, 4)) if rng.uniform() < 0.75 else 0
        specs = random_dso_specs(rng, profile, n_objects)
        image, masks = _compose(profile, specs, derive_seed(seed, "frame-image", frame_index), None)
        union = np.zeros((profile.height, profile.width), dtype=bool)
        for mask in masks:
            union |= mask

        ys, xs = np.nonzero(union)
        for k in range(crops_per_frame):
            if k % 2 == 0 and len(ys):
                # crop around a random object pixel
                i = int(rng.integers(len(ys)))
                x = int(np.clip(xs[i] - rng.integers(0, PATCH_SIZE), 0, profile.width - PATCH_SIZE))
                y = int(np.clip(ys[i] - rng.integers(0, PATCH_SIZE), 0, profile.height - PATCH_SIZE))
            else:
                x = int(rng.integers(0, profile.width - PATCH_SIZE + 1))
                y = int(rng.integers(0, profile.height - PATCH_SIZE + 1))

            crop_mask = union[y:y + PATCH_SIZE, x:x + PATCH_SIZE].copy()
            label = label_for(crop_mask)
            if len(pools[label]) >= quota[label]:
                continue
            pools[label].append(LabeledPatch(
                pixels=io.to_uint16(image.pixels[y:y + PATCH_SIZE, x:x + PATCH_SIZE]),
                label=label,
                truth_mask=crop_mask,
                source=(frame_index, x, y),
            ))
        frame_index += 1

    if logger is not None:
        logger.info(f"Rendered {frame_index} frames for {n_patches} patches (seed {seed})")

    rng = np.random.default_rng(derive_seed(seed, "split"))
    present = [pools[Label.DSO_PRESENT][i] for i in rng.permutation(quota[Label.DSO_PRESENT])]
    absent = [pools[Label.DSO_ABSENT][i] for i in rng.permutation(quota[Label.DSO_ABSENT])]
    interleaved = [p for pair in zip(present, absent) for p in pair] + present[len(absent):]

    n_train, n_val, _ = split_sizes(n_patches)
    train = interleaved[:n_train]
    train = [train[i] for i in rng.permutation(len(train))]

    return DatasetSplit(
        train=train,
        val=interleaved[n_train:n_train + n_val],
        test=interleaved[n_train + n_val:],
        seed=seed,
        profile=profile.name,
    )

def write_dataset(split: DatasetSplit, out_dir) -> Path:

    """
        Writes every patch as a 16-bit PNG (truth masks as 8-bit PNGs next
        to them) and a manifest.json listing paths, labels, split and seed.

        Returns:
            Path: The manifest path
    """

    out_dir = Path(out_dir)
    entries = []
    for name, patches in split.parts().items():
        for i, patch in enumerate(patches):
            rel = f"patches/{name}/{i:06d}.png"
            io.save_image(out_dir / rel, patch.intensities)
            mask_rel = None
            if patch.truth_mask is not None and np.any(patch.truth_mask):
                mask_rel = f"masks/{name}/{i:06d}.png"
                io.save_rgb8(out_dir / mask_rel, np.repeat(patch.truth_mask[:, :, None], 3, axis=2).astype(np.float32))
            entries.append({
                "path": rel,
                "mask": mask_rel,
                "label": patch.label.value,
                "split": name,
                "source": list(patch.source),
            })

    manifest = {
        "format": "dsolocate-dataset",
        "version": 1,
        "seed": split.seed,
        "profile": split.profile,
        "patch_size": PATCH_SIZE,
        "min_visible_fraction": MIN_VISIBLE_FRACTION,
        "counts": split.counts(),
        "patches": entries,
    }
    path = out_dir / "manifest.json"
    io.write_json(path, manifest)
    return path

def load_dataset(manifest_path) -> DatasetSplit:

    """
        Reads a dataset written by write_dataset.
    """

    manifest_path = Path(manifest_path)
    manifest = io.read_json(manifest_path)
    if manifest.get("format") != "dsolocate-dataset":
        raise ArtifactIOError(manifest_path, "not a dsolocate dataset manifest")

    root = manifest_path.parent
    parts = {"train": [], "val": [], "test": []}
    for entry in manifest["patches"]:
        mask = None
        if entry.get("mask"):
            mask = io.load_image(root / entry["mask"])[:, :, 0] > 0.5
        parts[entry["split"]].append(LabeledPatch(
            pixels=io.to_uint16(io.load_image(root / entry["path"])),
            label=Label(entry["label"]),
            truth_mask=mask if mask is not None else np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=bool),
            source=tuple(entry.get("source", (0, 0, 0))),
        ))

    return DatasetSplit(seed=int(manifest["seed"]), profile=manifest.get("profile", "desk"), **parts)
