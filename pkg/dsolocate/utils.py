import zlib
import numpy as np

def distribute(items, n):

    """
        Distributes items into n (almost) equally large batches.
        Example: items = [1,2,3,4,5,6,7,8,9], n = 4 gives batches = [[1,5,9], [2,6], [3,7], [4,8]]

        Args: 
            data ([any]): List of items of any type
            n (int): Number of max items of a batch

        Returns:
            [[any]]: List of lists of items of any type
    """

    batches = [[] for _ in range(max(1, n))]
    for i, item in enumerate(items):
        batches[i % len(batches)].append(item)
    return [b for b in batches if not len(b) == 0]

def derive_seed(root: int, *keys) -> int:

    """
        Derives an independent 32-bit seed for a stage from the root seed.
        Keys may be ints or strings, strings are hashed with crc32 so the
        result is stable across interpreter runs.

        Args:
            root (int): Root seed
            keys (int | str): Stage path, e.g. ("dataset", 3)

        Returns:
            int
    """

    entropy = [int(root) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])

def luminance(image: np.ndarray) -> np.ndarray:
    """
        Channel mean of an H x W x 3 image, H x W images are returned as is.
    """
    if image.ndim == 2:
        return image
    return image.mean(axis=2)

def polygon_area(polygon) -> float:
    """
        Shoelace area of a closed polygon given as [[x, y], ...].
    """
    pts = np.asarray(polygon, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)
