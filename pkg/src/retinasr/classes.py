"""Class indices, names and the color coding used for RGB label maps."""

import numpy as np

N_CLASSES = 8
N_LAYERS = 7
BACKGROUND = 0

CLASS_NAMES = ("background", "ILM", "RNFL", "GCL", "IPL", "INL", "OPL", "ONL")

# Corners of the RGB cube: every channel of a rendered label map is binary and
# the minimum pairwise distance between colors is 1.
LABEL_COLORS = np.array(
    [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
    ],
    dtype=np.float32,
)


def render_labels_rgb(labels, palette=LABEL_COLORS):
    """Map an integer label array (..., H, W) to colors (..., H, W, 3)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(palette)):
        raise ValueError("label values outside the palette range")
    return np.asarray(palette, dtype=np.float32)[labels]
