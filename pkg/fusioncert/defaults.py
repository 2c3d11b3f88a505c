import math

# Smoothing / certification defaults (rotation runs at sigma 0.25, shifting at 0.5).
DEFAULT_SAMPLES = 1000
DEFAULT_ALPHA = 0.05
DEFAULT_PERCENTILE = 0.5
SIGMA_BY_KIND = {
    "rotation": 0.25,
    "shifting": 0.5,
    "rotation_shifting": 0.5,
}

# Grid resolution: 0.1 degree per rotation cell, 0.01 m per shifting cell.
ROTATION_CELL_WIDTH = math.radians(0.1)
SHIFTING_CELL_WIDTH = 0.01
ROTATION_RANGE_DEG = (-30.0, 30.0)
SHIFTING_RANGE = (0.0, 5.0)
DENSE_CELL_COUNT = 600

# Benchmark sweeps.
ROTATION_RADII_DEG = (10.0, 15.0, 20.0, 25.0, 30.0)
SHIFTING_RADII = (1.0, 2.0, 3.0, 4.0, 5.0)
DEFAULT_ETA = 0.8
DEFAULT_IOU_THRESHOLD = 0.5

# Partition checker: sub-interval sizes and the enclosing big interval.
PARTITION_SIZES_DEG = (0.001, 0.01, 0.02, 0.03, 0.04, 0.05)
PARTITION_SIZES_SHIFT = (0.001, 0.01, 0.02, 0.03, 0.04, 0.05)
PARTITION_BIG_INTERVAL_DEG = 0.06
PARTITION_BIG_INTERVAL_SHIFT = 0.07

# Geometry.
GEOMETRY_EPS = 1e-9

# Scene rendering.
VEHICLE_ALBEDO = 0.8
GROUND_ALBEDO = 0.3
IMAGE_HEIGHT = 64
IMAGE_WIDTH = 87
CAMERA_HEIGHT = 1.65

# Detector.
VEHICLE_LABELS = frozenset({"car", "van", "truck"})
MODALITIES = ("fusion", "camera", "lidar")
PROTOCOL_NAME = "commit-detector"
PROTOCOL_VERSION = 1
DETECTOR_TIMEOUT_S = 30.0

# CSV report.
REPORT_HEADER = (
    "scene",
    "transform",
    "radius",
    "metric",
    "certified",
    "empirical",
    "clean",
    "runtime_s",
    "cells",
    "n",
    "alpha",
)
