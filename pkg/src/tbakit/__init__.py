"""Non-neural machinery for LiDAR tracking-by-attention: geometry, track-sampling
augmentation, query propagation, two-stage assignment, losses and tracking metrics."""

__version__ = "0.1.0"

# nuScenes tracking classes, in the benchmark's alphabetical order.
TRACKING_CLASSES = (
    "bicycle",
    "bus",
    "car",
    "motorcycle",
    "pedestrian",
    "trailer",
    "truck",
)
CLASS_INDEX = {name: i for i, name in enumerate(TRACKING_CLASSES)}
