import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_frame(h=64, w=64, polygons=None, labels=None, occluded=None,
               track_id=None, frame_index=0, seed=0):
    """Small valid AnnotatedFrame for tests."""
    from pmode.data import AnnotatedFrame, DimensionLabel

    g = np.random.default_rng(seed)
    image = g.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    if polygons is None:
        polygons = [np.array([[10.0, 10.0], [40.0, 12.0], [38.0, 30.0], [11.0, 28.0]])]
    if labels is None:
        labels = [DimensionLabel(width_m=4.0, height_m=1.5)] * len(polygons)
    if occluded is None:
        occluded = [False] * len(polygons)
    return AnnotatedFrame(image=image, polygons=polygons, labels=labels,
                          occluded_flags=occluded, track_id=track_id,
                          frame_index=frame_index)
