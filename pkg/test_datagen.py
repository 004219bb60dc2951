# File: test_datagen.py
import numpy as np
import pytest

from src import numerics as num
from src.checks import TINY_GEOMETRY
from src.config import Geometry
from src.container import dataset_digest
from src.datagen import (CONDITION_KINDS, TASKS, Scene, Shape, condition, describe, dilate, flow_color,
                         generate_dataset, make_sample, random_mask, render_scene, resolve_tasks, shape_support)
from src.errors import ArgumentError
from src.vcu import from_u8, is_valid, quantize

NEUTRAL = float(from_u8(np.array([128]))[0])


def _scene():
    return Scene((
        Shape("square", "red", 2, 5, 5, vx=1, vy=0, z=1),
        Shape("circle", "blue", 3, 10, 10, vx=0, vy=-1, z=4),
    ))


def test_square_covers_its_box():
    """A shape of radius r covers exactly [c - r, c + r] on both axes"""
    support = shape_support(Shape("square", "red", 2, 5, 6), 0, 16, 16)
    rows, cols = np.where(support)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (4, 8, 3, 7)
    assert support.sum() == 25


@pytest.mark.parametrize("kind", ["circle", "triangle"])
def test_round_shapes_touch_their_box(kind):
    """Circles and triangles reach the edges of their bounding box"""
    rows, cols = np.where(shape_support(Shape(kind, "red", 3, 8, 8), 0, 16, 16))
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (5, 11, 5, 11)


def test_nearer_shape_is_drawn_on_top():
    """Overlaps show the color of the shape with the larger depth"""
    scene = Scene((Shape("square", "red", 3, 8, 8, z=5), Shape("square", "blue", 3, 8, 8, z=2)))
    frame = render_scene(scene, 1, 16, 16)[0]
    assert tuple(frame[8, 8]) == (1.0, -1.0, -1.0)


def test_shapes_move_with_constant_velocity():
    """Frame f draws the shape at its start position plus f times its velocity"""
    shape = Shape("square", "red", 1, 3, 3, vx=2, vy=1)
    assert shape.center(2) == (7, 5)
    video = render_scene(Scene((shape,)), 3, 16, 16)
    assert tuple(video[2, 5, 7]) == (1.0, -1.0, -1.0)


@pytest.mark.parametrize("kind", CONDITION_KINDS)
def test_conditions_in_range(kind):
    """Every condition video has the video's shape and stays in [-1, 1]"""
    scene = _scene()
    video = render_scene(scene, 4, 16, 16)
    cond = condition(scene, video, kind)
    assert cond.shape == video.shape
    assert cond.min() >= -1.0 and cond.max() <= 1.0


def test_depth_proxy_orders_shapes():
    """Nearer shapes are brighter in the depth proxy; background is -1"""
    scene = _scene()
    depth = condition(scene, render_scene(scene, 1, 16, 16), "depth_proxy")[0, ..., 0]
    assert depth[10, 10] > depth[5, 5] > depth[0, 15] == -1.0


def test_flow_color():
    """Still shapes are mid-gray; moving ones get a direction-dependent color"""
    assert not flow_color(0, 0).any()
    assert not np.allclose(flow_color(1, 0), flow_color(-1, 0))
    assert np.allclose(flow_color(2, 2), -flow_color(-2, -2), atol=1e-6)


def test_instance_mask_follows_shape():
    """Instance masks track one shape over time"""
    scene = _scene()
    mask = random_mask(num.make_rng(0), scene, 3, 16, 16, "instance_follow", shape_index=0, radius=0)
    for f in range(3):
        assert np.array_equal(mask[f] > 0, shape_support(scene.shapes[0], f, 16, 16))


def test_dilate_grows_mask():
    """Dilation by a disk of radius 1 adds the four neighbors of a single pixel"""
    m = np.zeros((1, 5, 5))
    m[0, 2, 2] = 1
    assert dilate(m, 1).sum() == 5
    assert np.array_equal(dilate(m, 0), m)


@pytest.mark.parametrize("style", ["static_rect", "augmented"])
def test_rect_masks_are_binary(style):
    """Rectangle masks are binary and non-empty"""
    mask = random_mask(num.make_rng(1), _scene(), 4, 16, 16, style)
    assert set(np.unique(mask)) <= {0.0, 1.0} and mask.any()
    if style == "static_rect":
        assert all(np.array_equal(mask[0], m) for m in mask)
        assert 0.1 <= mask[0].mean() <= 0.6


def test_describe_is_deterministic():
    """Prompts name color, kind and motion of each shape, nearest first"""
    assert describe(_scene()) == ("a blue circle moving up and a red square moving right on a gradient background")


@pytest.mark.parametrize("task", TASKS)
def test_every_task_makes_a_valid_sample(task):
    """All tasks produce valid units whose target matches the video length"""
    sample = make_sample(task, 3, TINY_GEOMETRY)
    assert is_valid(sample.vcu)
    assert sample.target.shape == (4, 16, 16, 3)
    assert sample.task == task and sample.seed == 3
    assert np.array_equal(quantize(sample.vcu.frames), sample.vcu.frames)
    assert np.array_equal(quantize(sample.target), sample.target)


def test_sample_is_deterministic():
    """(task, seed, geometry) determine the sample"""
    a, b = make_sample("mv2v_random", 9, TINY_GEOMETRY), make_sample("mv2v_random", 9, TINY_GEOMETRY)
    assert np.array_equal(a.vcu.frames, b.vcu.frames) and np.array_equal(a.vcu.masks, b.vcu.masks)
    assert a.vcu.prompt == b.vcu.prompt


def test_inpaint_and_outpaint_are_complements():
    """For a seed, outpainting masks are the complement of inpainting masks"""
    inpaint, outpaint = make_sample("mv2v_inpaint", 4, TINY_GEOMETRY), make_sample("mv2v_outpaint", 4, TINY_GEOMETRY)
    assert np.array_equal(inpaint.vcu.masks, 1.0 - outpaint.vcu.masks)
    assert np.array_equal(inpaint.target, outpaint.target)


def test_repaint_source_is_blank_where_masked():
    """Masked source pixels are neutral and kept pixels equal the target"""
    sample = make_sample("mv2v_inpaint", 2, TINY_GEOMETRY)
    masked = sample.vcu.masks > 0
    assert np.all(sample.vcu.frames[masked] == NEUTRAL)
    assert np.array_equal(sample.vcu.frames[~masked], sample.target[~masked])


def test_t2v_sample_structure():
    """Text-to-video samples are blank up to quantization and all generate"""
    sample = make_sample("t2v", 0, TINY_GEOMETRY)
    assert np.all(sample.vcu.frames == NEUTRAL) and sample.vcu.masks.all()


def test_extension_keeps_anchor_frames():
    """Extension anchors carry the real frames with zero masks"""
    sample = make_sample("extension_first", 0, TINY_GEOMETRY)
    assert not sample.vcu.masks[0].any() and sample.vcu.masks[1:].all()
    assert np.array_equal(sample.vcu.frames[0], sample.target[0])


def test_reference_task_has_one_reference():
    """Object-reference samples lead with one reference image"""
    sample = make_sample("r2v_object", 1, TINY_GEOMETRY)
    assert sample.vcu.ref_count == 1 and str(sample.vcu.task_tag) == "R2V"


def test_composite_parts():
    """Composite samples combine a reference or a condition fill with a base task"""
    with_ref = make_sample("composite", 0, TINY_GEOMETRY, parts=("r2v", "mv2v_inpaint"))
    assert with_ref.vcu.ref_count == 1
    assert with_ref.vcu.task_tag.kind == "Composite" and set(with_ref.vcu.task_tag.parts) == {"MV2V", "R2V"}
    filled = make_sample("composite", 0, TINY_GEOMETRY, parts=("mv2v_inpaint", "gray"))
    assert set(filled.vcu.task_tag.parts) == {"MV2V", "V2V"}
    with pytest.raises(ArgumentError):
        make_sample("composite", 0, TINY_GEOMETRY, parts=("v2v_gray", "depth_proxy"))


def test_unknown_task():
    """Unknown tasks are rejected"""
    with pytest.raises(ArgumentError):
        make_sample("x2v", 0)
    with pytest.raises(ArgumentError):
        resolve_tasks("t2v,bogus")
    assert resolve_tasks("all") == list(TASKS)
    assert resolve_tasks("t2v, v2v_gray") == ["t2v", "v2v_gray"]


def test_generate_dataset_cycles_tasks():
    """Datasets cycle through the tasks in order with per-index seeds"""
    data = generate_dataset(["t2v", "v2v_depth"], 5, 7, TINY_GEOMETRY)
    assert [s.task for s in data] == ["t2v", "v2v_depth", "t2v", "v2v_depth", "t2v"]
    assert len({s.seed for s in data}) == 5
    again = generate_dataset(["t2v", "v2v_depth"], 5, 7, TINY_GEOMETRY)
    assert [s.seed for s in again] == [s.seed for s in data]
    val = generate_dataset(["t2v", "v2v_depth"], 5, 7, TINY_GEOMETRY, split="val")
    assert not {s.seed for s in val} & {s.seed for s in data}


def test_default_geometry():
    """Default videos are 8 frames of 32x32"""
    sample = make_sample("v2v_flow", 0)
    assert sample.target.shape == (8, 32, 32, 3)
    assert Geometry().frames == 8


def test_parallel_generation_matches_serial():
    """Worker count does not change the generated samples or their order"""
    serial = generate_dataset(["mv2v_inpaint", "v2v_scribble", "extension_first"], 6, 3, TINY_GEOMETRY)
    parallel = generate_dataset(["mv2v_inpaint", "v2v_scribble", "extension_first"], 6, 3, TINY_GEOMETRY, n_jobs=2)
    assert dataset_digest(parallel) == dataset_digest(serial)
