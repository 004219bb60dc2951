"""
Synthetic moving-shape videos and the task samples built from them.

A scene is a set of flat-colored shapes (circle, square, triangle) moving with
constant integer velocity over a vertical two-color gradient. Every shape of
radius r centered at c covers exactly the box [c - r, c + r] on both axes;
larger depth z means nearer, drawn later. Condition videos (gray, layout,
scribble, depth proxy, flow) and masks come from the scene's exact geometry.
All emitted frames are snapped to the 8-bit grid.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import ndimage
from tqdm import tqdm

from src import numerics as num
from src.config import Geometry
from src.errors import ArgumentError
from src.vcu import (TaskTag, make_frame_anchored, make_mv2v, make_r2v, make_t2v, make_v2v, quantize,
                     with_references)

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("circle", "square", "triangle")
CONDITION_KINDS = ("gray", "layout", "scribble", "depth_proxy", "flow")
MASK_STYLES = ("instance_follow", "static_rect", "augmented")
V2V_TASKS = {
    "v2v_gray": "gray",
    "v2v_layout": "layout",
    "v2v_scribble": "scribble",
    "v2v_depth": "depth_proxy",
    "v2v_flow": "flow",
}
EXTENSION_TASKS = ("extension_first", "extension_last", "extension_ends", "extension_random", "extension_segments")
TASKS = (("t2v", "r2v_object") + tuple(V2V_TASKS) + ("mv2v_inpaint", "mv2v_outpaint", "mv2v_random")
         + EXTENSION_TASKS + ("composite",))
COMPOSITE_BASES = tuple(V2V_TASKS) + ("mv2v_inpaint", "mv2v_outpaint", "mv2v_random") + EXTENSION_TASKS

PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.0, -1.0),
}
MAX_DEPTH = 7
MAX_SPEED = 2
SCRIBBLE_THRESHOLD = 0.2
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    radius: int
    x: int
    y: int
    vx: int = 0
    vy: int = 0
    z: int = 0

    def center(self, frame):
        return self.x + self.vx * frame, self.y + self.vy * frame

    def bbox(self, frame):
        """(x0, y0, x1, y1), inclusive."""
        cx, cy = self.center(frame)
        return cx - self.radius, cy - self.radius, cx + self.radius, cy + self.radius


@dataclass(frozen=True)
class Scene:
    shapes: Tuple[Shape, ...]
    top: Tuple[float, float, float] = (-0.6, -0.6, -0.2)
    bottom: Tuple[float, float, float] = (-0.2, -0.4, -0.6)

    def drawing_order(self):
        return sorted(range(len(self.shapes)), key=lambda i: self.shapes[i].z)


@dataclass(frozen=True)
class TrainSample:
    vcu: object
    target: np.ndarray
    task: str
    seed: int

    @property
    def task_tag(self):
        return self.vcu.task_tag


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def shape_support(shape, frame, h, w):
    """Boolean (h, w) coverage of one shape at a frame (ignores occlusion)."""
    Y, X = np.mgrid[0:h, 0:w]
    cx, cy = shape.center(frame)
    r = shape.radius
    if shape.kind == "circle":
        return (X - cx) ** 2 + (Y - cy) ** 2 <= r * r
    if shape.kind == "square":
        return (np.abs(X - cx) <= r) & (np.abs(Y - cy) <= r)
    if shape.kind == "triangle":
        # apex at (cx, cy - r), base row cy + r spanning cx - r .. cx + r
        return (Y <= cy + r) & (2 * np.abs(X - cx) <= Y - (cy - r))
    raise ArgumentError(f"unknown shape kind {shape.kind!r}")


def background(scene, h, w):
    ramp = np.linspace(0.0, 1.0, h)[:, None, None] if h > 1 else np.zeros((1, 1, 1))
    top, bottom = np.asarray(scene.top), np.asarray(scene.bottom)
    return np.broadcast_to(top + (bottom - top) * ramp, (h, w, 3)).astype(np.float32)


def topmost_index(scene, n, h, w):
    """(n, h, w) index of the nearest shape covering each pixel, -1 for background."""
    index = np.full((n, h, w), -1, dtype=np.int64)
    for f in range(n):
        for i in scene.drawing_order():
            index[f][shape_support(scene.shapes[i], f, h, w)] = i
    return index


def render_scene(scene, n, h, w):
    """Painter's-algorithm rasterization with hard edges; values in [-1, 1]."""
    frames = np.repeat(background(scene, h, w)[None], n, axis=0)
    for f in range(n):
        for i in scene.drawing_order():
            shape = scene.shapes[i]
            frames[f][shape_support(shape, f, h, w)] = PALETTE[shape.color]
    return frames


def luma(video):
    return np.asarray(video, dtype=np.float64) @ LUMA


def condition(scene, video, kind):
    """Condition video of the given kind for a rendered scene."""
    video = np.asarray(video, dtype=np.float32)
    n, h, w, _ = video.shape
    if kind == "gray":
        return np.repeat(luma(video)[..., None], 3, axis=-1).astype(np.float32)
    if kind == "layout":
        out = np.full(video.shape, -1.0, dtype=np.float32)
        for f in range(n):
            for i in scene.drawing_order():
                shape = scene.shapes[i]
                x0, y0, x1, y1 = shape.bbox(f)
                outline = _box_outline(x0, y0, x1, y1, h, w)
                out[f][outline] = PALETTE[shape.color]
        return out
    if kind == "scribble":
        gray = luma(video)
        edges = np.empty_like(gray)
        for f in range(n):
            gx = ndimage.sobel(gray[f], axis=1, mode="nearest")
            gy = ndimage.sobel(gray[f], axis=0, mode="nearest")
            edges[f] = np.hypot(gx, gy) / 8.0
        return np.repeat(np.where(edges > SCRIBBLE_THRESHOLD, 1.0, -1.0)[..., None], 3, axis=-1).astype(np.float32)
    if kind == "depth_proxy":
        index = topmost_index(scene, n, h, w)
        depth = np.full((n, h, w), -1.0)
        for i, shape in enumerate(scene.shapes):
            depth[index == i] = -1.0 + 2.0 * (shape.z + 1) / (MAX_DEPTH + 1)
        return np.repeat(depth[..., None], 3, axis=-1).astype(np.float32)
    if kind == "flow":
        index = topmost_index(scene, n, h, w)
        out = np.zeros(video.shape, dtype=np.float32)
        for i, shape in enumerate(scene.shapes):
            out[index == i] = flow_color(shape.vx, shape.vy)
        return out
    raise ArgumentError(f"unknown condition kind {kind!r}; expected one of {CONDITION_KINDS}")


def flow_color(vx, vy):
    """
    Color wheel: direction angle rotates the hue, speed (capped at MAX_SPEED * sqrt(2)) scales saturation
    around mid-gray: m * [cos a, cos(a - 2pi/3), cos(a + 2pi/3)].
    """
    speed = math.hypot(vx, vy)
    if speed == 0:
        return np.zeros(3, dtype=np.float32)
    m = min(1.0, speed / (MAX_SPEED * math.sqrt(2.0)))
    a = math.atan2(vy, vx)
    return np.array([m * math.cos(a), m * math.cos(a - 2 * math.pi / 3), m * math.cos(a + 2 * math.pi / 3)],
                    dtype=np.float32)


def _box_outline(x0, y0, x1, y1, h, w):
    Y, X = np.mgrid[0:h, 0:w]
    inside = (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)
    border = (X == x0) | (X == x1) | (Y == y0) | (Y == y1)
    return inside & border


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def disk(radius):
    r = int(radius)
    Y, X = np.mgrid[-r:r + 1, -r:r + 1]
    return X * X + Y * Y <= r * r


def dilate(masks, radius):
    """Per-frame binary dilation with a disk of the given radius (0 leaves the mask unchanged)."""
    masks = np.asarray(masks) > 0
    if radius <= 0:
        return masks.astype(np.float32)
    structure = disk(radius)
    return np.stack([ndimage.binary_dilation(m, structure=structure) for m in masks]).astype(np.float32)


def _random_rect(rng, h, w, low=0.1, high=0.6):
    while True:
        rh, rw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
        if low <= rh * rw / float(h * w) <= high:
            return int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1)), rh, rw


def random_mask(rng, scene, n, h, w, style, shape_index=None, radius=None):
    """
    Binary (n, h, w) mask

    instance_follow: one shape's support per frame, dilated by a radius in [0, 3]
    static_rect: one rectangle covering 10-60% of the frame, constant over time
    augmented: union of 1-3 rectangles, each jittered by up to 2 px per frame
    """
    if style == "instance_follow":
        if not scene.shapes:
            raise ArgumentError("instance_follow needs a scene with at least one shape")
        i = int(rng.integers(0, len(scene.shapes))) if shape_index is None else shape_index
        r = int(rng.integers(0, 4)) if radius is None else radius
        support = np.stack([shape_support(scene.shapes[i], f, h, w) for f in range(n)])
        return dilate(support, r)
    if style == "static_rect":
        y, x, rh, rw = _random_rect(rng, h, w)
        mask = np.zeros((h, w), dtype=np.float32)
        mask[y:y + rh, x:x + rw] = 1.0
        return np.repeat(mask[None], n, axis=0)
    if style == "augmented":
        out = np.zeros((n, h, w), dtype=np.float32)
        for _ in range(int(rng.integers(1, 4))):
            rh = int(rng.integers(max(1, h // 8), max(2, h // 2) + 1))
            rw = int(rng.integers(max(1, w // 8), max(2, w // 2) + 1))
            y, x = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
            for f in range(n):
                dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
                y0, x0 = min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)
                out[f, y0:y0 + rh, x0:x0 + rw] = 1.0
        return out
    raise ArgumentError(f"unknown mask style {style!r}; expected one of {MASK_STYLES}")


# ---------------------------------------------------------------------------
# Scenes and prompts
# ---------------------------------------------------------------------------

def random_scene(rng, geometry):
    count = int(rng.integers(geometry.min_shapes, geometry.max_shapes + 1))
    depths = rng.permutation(MAX_DEPTH + 1)[:count]
    colors = list(PALETTE)
    shapes = []
    for k in range(count):
        shapes.append(Shape(
            kind=SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))],
            color=colors[int(rng.integers(0, len(colors)))],
            radius=int(rng.integers(geometry.min_size, geometry.max_size + 1)),
            x=int(rng.integers(0, geometry.width)),
            y=int(rng.integers(0, geometry.height)),
            vx=int(rng.integers(-MAX_SPEED, MAX_SPEED + 1)),
            vy=int(rng.integers(-MAX_SPEED, MAX_SPEED + 1)),
            z=int(depths[k]),
        ))
    top = tuple(float(v) for v in rng.uniform(-0.8, 0.0, size=3))
    bottom = tuple(float(v) for v in rng.uniform(-0.8, 0.0, size=3))
    return Scene(tuple(shapes), top, bottom)


def direction(vx, vy):
    vertical = "up" if vy < 0 else "down" if vy > 0 else ""
    horizontal = "left" if vx < 0 else "right" if vx > 0 else ""
    if not vertical and not horizontal:
        return "still"
    return "-".join(p for p in (vertical, horizontal) if p)


def describe(scene):
    """Deterministic prompt naming each shape's color, kind and motion."""
    if not scene.shapes:
        return "an empty gradient background"
    parts = []
    for shape in sorted(scene.shapes, key=lambda s: -s.z):
        motion = "standing still" if direction(shape.vx, shape.vy) == "still" else f"moving {direction(shape.vx, shape.vy)}"
        parts.append(f"a {shape.color} {shape.kind} {motion}")
    return " and ".join(parts) + " on a gradient background"


def reference_crop(rng, scene, shape_index, h, w):
    """
    Object reference image: the shape rendered alone at frame 0, cropped to its tight
    bounding box, pasted centered on a neutral canvas and brightness-jittered by up to 0.1.
    """
    shape = scene.shapes[shape_index]
    pad = 2 * shape.radius + 1
    alone = Scene((dataclasses.replace(shape, x=shape.x + pad, y=shape.y + pad),), (0.0,) * 3, (0.0,) * 3)
    canvas = render_scene(alone, 1, h + 2 * pad, w + 2 * pad)[0]
    support = shape_support(alone.shapes[0], 0, h + 2 * pad, w + 2 * pad)
    rows, cols = np.where(support)
    crop = canvas[rows.min():rows.max() + 1, cols.min():cols.max() + 1]
    ch, cw = min(crop.shape[0], h), min(crop.shape[1], w)
    crop = crop[:ch, :cw]
    ref = np.zeros((h, w, 3), dtype=np.float32)
    y, x = (h - ch) // 2, (w - cw) // 2
    jitter = float(rng.uniform(-0.1, 0.1))
    ref[y:y + ch, x:x + cw] = np.clip(crop + jitter, -1.0, 1.0)
    return ref


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

def _blank(video, masks):
    """Source frames for repainting: masked pixels are neutral (0), the rest is kept."""
    return (video * (1.0 - masks[..., None])).astype(np.float32)


def _anchors(rng, task, n):
    if task == "extension_first":
        return [0]
    if task == "extension_last":
        return [n - 1]
    if task == "extension_ends":
        return sorted({0, n - 1})
    if task == "extension_random":
        count = int(rng.integers(1, max(1, n // 2) + 1))
        return sorted(int(i) for i in rng.choice(n, size=count, replace=False))
    if task == "extension_segments":
        head = int(rng.integers(1, max(1, n // 4) + 1))
        tail = int(rng.integers(1, max(1, n // 4) + 1))
        return sorted(set(range(head)) | set(range(n - tail, n)))
    raise ArgumentError(f"unknown extension task {task!r}")


def _base_vcu(task, rng, scene, target, prompt, geometry):
    n, h, w = geometry.frames, geometry.height, geometry.width
    if task == "t2v":
        return make_t2v(prompt, n, h, w)
    if task == "r2v_object":
        if not scene.shapes:
            raise ArgumentError("r2v_object needs a scene with at least one shape")
        ref = reference_crop(rng, scene, int(rng.integers(0, len(scene.shapes))), h, w)
        return make_r2v(prompt, [quantize(ref)], n)
    if task in V2V_TASKS:
        return make_v2v(prompt, quantize(condition(scene, target, V2V_TASKS[task])))
    if task in ("mv2v_inpaint", "mv2v_outpaint"):
        mask = random_mask(rng, scene, n, h, w, "instance_follow")
        if task == "mv2v_outpaint":
            mask = 1.0 - mask
        return make_mv2v(prompt, _blank(target, mask), mask)
    if task == "mv2v_random":
        style = ("static_rect", "augmented")[int(rng.integers(0, 2))]
        mask = random_mask(rng, scene, n, h, w, style)
        return make_mv2v(prompt, _blank(target, mask), mask)
    if task in EXTENSION_TASKS:
        anchors = [(i, target[i]) for i in _anchors(rng, task, n)]
        return make_frame_anchored(prompt, anchors, n, h, w, condition_mode=False)
    raise ArgumentError(f"unknown task {task!r}; expected one of {TASKS}")


def _composite_vcu(rng, scene, target, prompt, geometry, parts):
    """
    Combine tasks: ``parts`` names a base task plus "r2v" (prepend an object reference)
    and/or a condition kind (fill the masked region of an MV2V base with that condition).
    """
    if parts is None:
        base = COMPOSITE_BASES[int(rng.integers(0, len(COMPOSITE_BASES)))]
        if base.startswith("mv2v") and rng.random() < 0.5:
            parts = (base, CONDITION_KINDS[int(rng.integers(0, len(CONDITION_KINDS)))])
        else:
            parts = ("r2v", base)
    parts = tuple(parts)
    bases = [p for p in parts if p in COMPOSITE_BASES]
    kinds = [p for p in parts if p in CONDITION_KINDS]
    unknown = [p for p in parts if p not in COMPOSITE_BASES and p not in CONDITION_KINDS and p != "r2v"]
    if len(bases) != 1 or unknown or len(kinds) > 1:
        raise ArgumentError(f"composite parts must name one base task, optional 'r2v' and one condition kind: {parts}")
    if kinds and not bases[0].startswith("mv2v"):
        raise ArgumentError(f"a condition fill needs an mv2v base, got {bases[0]!r}")
    if "r2v" in parts and not scene.shapes:
        raise ArgumentError("composite with r2v needs a scene with at least one shape")

    vcu = _base_vcu(bases[0], rng, scene, target, prompt, geometry)
    if kinds:
        cond = quantize(condition(scene, target, kinds[0]))
        m = np.asarray(vcu.masks)[..., None]
        frames = (np.asarray(vcu.frames) * (1.0 - m) + cond * m).astype(np.float32)
        vcu = dataclasses.replace(vcu, frames=frames, task_tag=vcu.task_tag.combine(TaskTag("V2V")))
    if "r2v" in parts:
        ref = reference_crop(rng, scene, int(rng.integers(0, len(scene.shapes))), geometry.height, geometry.width)
        vcu = with_references(vcu, [quantize(ref)])
    return vcu


def make_sample(task, seed, geometry=None, parts=None):
    """
    Build one TrainSample; (task, seed, geometry) fully determine it

    Scene, mask and other draws come from one stream keyed by the seed only, so
    paired tasks (inpaint vs outpaint) see the same scene and mask for a seed.

    Parameters:
    -----------
    task : str
        One of TASKS
    seed : int
    geometry : Geometry or None
    parts : tuple of str or None
        Forced parts for "composite" (e.g. ("r2v", "mv2v_inpaint"))
    """
    geometry = geometry or Geometry()
    if task not in TASKS:
        raise ArgumentError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = num.make_rng(seed, "sample")
    scene = random_scene(rng, geometry)
    target = quantize(render_scene(scene, geometry.frames, geometry.height, geometry.width))
    prompt = describe(scene)
    if task == "composite":
        vcu = _composite_vcu(rng, scene, target, prompt, geometry, parts)
    else:
        vcu = _base_vcu(task, rng, scene, target, prompt, geometry)
    vcu = dataclasses.replace(vcu, frames=quantize(vcu.frames))
    return TrainSample(vcu=vcu, target=target, task=task, seed=int(seed))


def sample_seed(seed, split, index):
    return int(num.make_rng(seed, "dataset", split, index).integers(0, 2 ** 31 - 1))


def resolve_tasks(tasks):
    if isinstance(tasks, str):
        tasks = [t.strip() for t in tasks.split(",") if t.strip()]
    if not tasks or list(tasks) == ["all"]:
        return list(TASKS)
    unknown = [t for t in tasks if t not in TASKS]
    if unknown:
        raise ArgumentError(f"unknown tasks {unknown}; expected some of {TASKS}")
    return list(tasks)


def generate_dataset(tasks, count, seed, geometry=None, split="train", n_jobs=1, progress=False):
    """
    Generate ``count`` samples cycling through ``tasks``

    Each sample has its own seed derived from (seed, split, index); joblib keeps
    the output in index order for any ``n_jobs``.
    """
    tasks = resolve_tasks(tasks)
    geometry = geometry or Geometry()
    jobs = [(tasks[i % len(tasks)], sample_seed(seed, split, i)) for i in range(int(count))]
    samples = Parallel(n_jobs=n_jobs)(
        delayed(make_sample)(task, s, geometry) for task, s in tqdm(jobs, desc=f"gen {split}", disable=not progress)
    )
    counts = {}
    for sample in samples:
        counts[sample.task] = counts.get(sample.task, 0) + 1
    logger.info(f"Generated {len(samples)} {split} samples: {counts}")
    return list(samples)
