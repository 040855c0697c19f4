"""
Reading and writing of image and JSON artifacts.

Images are exchanged as PNG (16-bit for everything the package writes)
or TIFF, always normalized to float32 RGB intensities in [0,1] in memory.
"""
import json
import cv2
import numpy as np

from pathlib import Path
from typing import Any
from dsolocate.exceptions import ArtifactIOError, DomainError

U16_MAX = 65535

def to_uint16(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * U16_MAX).astype(np.uint16)

def from_uint16(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / U16_MAX

def load_image(path) -> np.ndarray:

    """
        Loads an 8/16-bit or float PNG/TIFF as an H x W x 3 float32 RGB
        image in [0,1]. Grayscale images are replicated to three channels
        and an alpha channel is dropped.

        Args:
            path (str | Path): Image file

        Returns:
            np.ndarray
    """

    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(path, "image file does not exist")

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ArtifactIOError(path, "could not be decoded as an image")

    if raw.dtype == np.uint8:
        image = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        image = raw.astype(np.float32) / U16_MAX
    elif np.issubdtype(raw.dtype, np.floating):
        image = np.clip(np.nan_to_num(raw.astype(np.float32)), 0.0, 1.0)
    else:
        raise ArtifactIOError(path, f"unsupported pixel type {raw.dtype}")

    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    elif image.shape[2] == 4:
        image = cv2.cvtColor(image, cv2.COLOR_BGRA2RGB)
    elif image.shape[2] == 3:
        image = cv2.cvtColor(image, cv2.COLOR_BGR2RGB)
    else:
        raise ArtifactIOError(path, f"unsupported channel count {image.shape[2]}")

    return np.ascontiguousarray(image, dtype=np.float32)

def save_image(path, image: np.ndarray):
    """
        Writes an H x W x 3 [0,1] image as a 16-bit RGB PNG.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise DomainError(f"expected an H x W x 3 image, got shape {image.shape}")
    _imwrite(path, cv2.cvtColor(to_uint16(image), cv2.COLOR_RGB2BGR))

def save_rgb8(path, image: np.ndarray):
    """
        Writes an 8-bit RGB PNG from a uint8 image or a [0,1] float image.
    """
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    _imwrite(path, cv2.cvtColor(image, cv2.COLOR_RGB2BGR))

def save_heatmap(path, heatmap: np.ndarray) -> dict:

    """
        Writes a heatmap as a min-max normalized 16-bit grayscale PNG plus a
        JSON sidecar (same stem, .json) holding the normalization constants,
        so that value = min + png / 65535 * (max - min).

        Returns:
            dict: The sidecar content
    """

    path = Path(path)
    lo, hi = float(np.min(heatmap)), float(np.max(heatmap))
    span = hi - lo
    normalized = (heatmap - lo) / span if span > 0 else np.zeros_like(heatmap)
    _imwrite(path, to_uint16(normalized))
    sidecar = {"min": lo, "max": hi, "width": int(heatmap.shape[1]), "height": int(heatmap.shape[0])}
    write_json(path.with_suffix(".json"), sidecar)
    return sidecar

def load_heatmap(path) -> np.ndarray:
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ArtifactIOError(path, "could not be decoded as a heatmap")
    sidecar = read_json(path.with_suffix(".json"))
    return sidecar["min"] + raw.astype(np.float64) / U16_MAX * (sidecar["max"] - sidecar["min"])

def _imwrite(path, array: np.ndarray):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(path.parent, f"could not create directory: {e}")
    if not cv2.imwrite(str(path), array):
        raise ArtifactIOError(path, "could not be written")

def dumps(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"

def write_json(path, data: Any):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(data), encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(path, f"could not be written: {e}")

def read_json(path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ArtifactIOError(path, "file does not exist")
    except json.JSONDecodeError as e:
        raise ArtifactIOError(path, f"invalid JSON: {e}")
    except OSError as e:
        raise ArtifactIOError(path, f"could not be read: {e}")
