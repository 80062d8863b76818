import numpy as np
import pytest

from p4dgs.scene import Anchor, AnchorField, Camera, GaussianPrimitive, TimeStamp


def make_camera(w2c=None, **kw):
    if w2c is None:
        w2c = np.hstack([np.eye(3), np.zeros((3, 1))])
    args = dict(w2c=w2c, fx=50.0, fy=50.0, cx=32.0, cy=32.0, width=64, height=64)
    args.update(kw)
    return Camera(**args)


def test_camera_position_and_transform():
    # camera at (1,2,3) looking down +z: w2c translation is -R @ center
    center = np.array([1.0, 2.0, 3.0])
    w2c = np.hstack([np.eye(3), -center[:, None]])
    cam = make_camera(w2c)
    assert np.allclose(cam.position, center)
    assert np.allclose(cam.to_camera(center[None]), 0.0)
    assert np.allclose(cam.to_camera(np.array([[1.0, 2.0, 5.0]])), [[0, 0, 2]])


def test_camera_validation():
    bad = np.hstack([np.eye(3) * 1.01, np.zeros((3, 1))])
    with pytest.raises(ValueError, match="orthonormal"):
        make_camera(bad)
    with pytest.raises(ValueError, match="focal"):
        make_camera(fx=-1.0)
    with pytest.raises(ValueError, match="3x4"):
        make_camera(np.eye(4))


def test_timestamp_bounds():
    TimeStamp(0.0), TimeStamp(1.0), TimeStamp(0.5)
    for t in (-0.1, 1.1):
        with pytest.raises(ValueError):
            TimeStamp(t)


def test_anchor_validation():
    a = Anchor(
        position=np.zeros(3),
        scale=np.full(3, 0.1),
        offset_scaling=np.full(3, 0.1),
        offsets=np.zeros((10, 3)),
        feature=np.zeros(16),
    )
    assert a.k == 10
    with pytest.raises(ValueError, match="positive"):
        Anchor(np.zeros(3), np.array([0.1, 0.0, 0.1]), np.ones(3), np.zeros((1, 3)), np.zeros(4))
    with pytest.raises(ValueError, match="k >= 1"):
        Anchor(np.zeros(3), np.ones(3), np.ones(3), np.zeros((0, 3)), np.zeros(4))
    with pytest.raises(ValueError, match="non-finite"):
        Anchor(np.array([np.nan, 0, 0]), np.ones(3), np.ones(3), np.zeros((1, 3)), np.zeros(4))


def test_primitive_validation():
    GaussianPrimitive(np.zeros(3), 0.5, np.full(3, 0.5), np.full(3, 0.1), np.array([1.0, 0, 0, 0]))
    with pytest.raises(ValueError, match="opacity"):
        GaussianPrimitive(np.zeros(3), 1.5, np.zeros(3), np.ones(3), np.array([1.0, 0, 0, 0]))
    with pytest.raises(ValueError, match="unit-norm"):
        GaussianPrimitive(np.zeros(3), 0.5, np.zeros(3), np.ones(3), np.array([1.0, 0.1, 0, 0]))
    with pytest.raises(ValueError, match="positive"):
        GaussianPrimitive(np.zeros(3), 0.5, np.zeros(3), np.array([0.1, -0.1, 0.1]), np.array([1.0, 0, 0, 0]))


def test_anchor_field_round_trip_and_aabb():
    anchors = [
        Anchor(np.array([1.0, 2, 3]), np.full(3, 0.1), np.full(3, 0.2),
               np.random.default_rng(i).uniform(-0.5, 0.5, (4, 3)), np.arange(8.0) * i)
        for i in range(3)
    ]
    field = AnchorField.from_anchors(anchors)
    assert field.n == 3 and field.k == 4 and field.d == 8
    back = field.anchor(1)
    assert np.array_equal(back.offsets, anchors[1].offsets)
    assert np.array_equal(back.feature, anchors[1].feature)
    box = field.aabb()
    assert np.array_equal(box[0], [1, 2, 3]) and np.array_equal(box[1], [1, 2, 3])
