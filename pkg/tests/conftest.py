import math

import numpy as np
import pytest

from collabdiff.geometry import CameraPose


def rotation_from_axis_angle(axis, angle):
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def random_pose(rng, width=640, height=480, max_angle=0.3, center_radius=1.0):
    """Camera looking roughly down +z from near the origin."""
    R = rotation_from_axis_angle(rng.normal(size=3), rng.uniform(0, max_angle))
    c = rng.uniform(-center_radius, center_radius, size=3)
    f = rng.uniform(300, 700)
    return CameraPose(
        R,
        -R @ c,
        f,
        f * rng.uniform(0.9, 1.1),
        width / 2 + rng.uniform(-20, 20),
        height / 2 + rng.uniform(-20, 20),
        width,
        height,
    )


def random_camera_pair(rng, width=640, height=480):
    while True:
        a, b = random_pose(rng, width, height), random_pose(rng, width, height)
        if np.linalg.norm(a.center - b.center) > 0.1:
            return a, b


def scene_points(rng, n):
    return np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(5, 10, n)])


def translated_pair(width=8, height=8, f=1.0, cx=0.0, cy=0.0):
    """Identity rotations, camera b displaced along world x (t_b = (1, 0, 0))."""
    a = CameraPose(np.eye(3), np.zeros(3), f, f, cx, cy, width, height)
    b = CameraPose(np.eye(3), np.array([1.0, 0.0, 0.0]), f, f, cx, cy, width, height)
    return a, b


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
