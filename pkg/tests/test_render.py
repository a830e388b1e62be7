from __future__ import annotations

import numpy as np

from processors.render import hog_descriptor, hog_length, lightfield_hog, rasterize_depth


def _square(z: float = 0.0) -> np.ndarray:
    a, b, c, d = (-0.25, -0.25, z), (0.25, -0.25, z), (0.25, 0.25, z), (-0.25, 0.25, z)
    return np.array([[a, b, c], [a, c, d]], dtype=np.float64)


def test_hog_length():
    assert hog_length(64) == 7 * 7 * 4 * 8
    assert hog_length(32) == 3 * 3 * 4 * 8


def test_depth_image_covers_the_square():
    image = rasterize_depth(_square(), np.eye(3), view=2, size=32)
    inside = image > 0
    # the square spans half the view in both directions
    assert inside.sum() == 16 * 16
    np.testing.assert_allclose(image[inside], 0.75)
    assert image[0, 0] == 0.0


def test_nearer_surface_wins():
    near = rasterize_depth(np.concatenate([_square(0.2), _square(-0.2)]), np.eye(3), view=2, size=16)
    only_near = rasterize_depth(_square(-0.2), np.eye(3), view=2, size=16)
    np.testing.assert_allclose(near, only_near)


def test_empty_view_gives_zero_descriptor():
    assert not hog_descriptor(np.zeros((32, 32))).any()
    assert hog_descriptor(np.zeros((32, 32))).shape == (hog_length(32),)


def test_lightfield_layout():
    tris = _square()
    desc = lightfield_hog(tris, None, size=32)
    assert desc.shape == (3 * hog_length(32),)
    assert np.all(np.isfinite(desc))
    # seen edge-on along x and y, face-on along z
    assert desc[2 * hog_length(32):].any()
