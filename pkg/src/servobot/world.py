"""Ground-truth tabletop world: scene geometry, pinhole camera, robot motion.

All geometry is metric (meters, radians); pixel coordinates follow the usual
image convention with x right and y down. The camera always looks straight
down and is free to rotate about its optical axis.
"""
from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels

FRAME_DT = 0.04  # 25 Hz camera
DEFAULT_FOCAL_PX = 525.0
DEFAULT_IMAGE_SIZE = (640, 480)
MIN_PROJECTION_DEPTH = 1e-6
CYLINDER_RIM_SAMPLES = 64


class DegenerateProjectionError(ValueError):
    """Raised when an object reaches or passes the camera's focal plane."""


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, math.tau)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_px: float = DEFAULT_FOCAL_PX
    principal_point: Tuple[float, float] = (320.0, 240.0)
    image_size: Tuple[int, int] = DEFAULT_IMAGE_SIZE

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError("focal length must be positive")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image size must be positive")

    def to_json(self) -> dict:
        return {
            "focal_px": self.focal_px,
            "principal_point": list(self.principal_point),
            "image_size": list(self.image_size),
        }

    @staticmethod
    def from_json(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(
            focal_px=float(d.get("focal_px", DEFAULT_FOCAL_PX)),
            principal_point=tuple(d.get("principal_point", (320.0, 240.0))),
            image_size=tuple(d.get("image_size", DEFAULT_IMAGE_SIZE)),
        )


@dataclass(frozen=True)
class CameraPose:
    """Downward-facing camera pose; orientation is (roll, pitch, yaw)."""

    x: float
    y: float
    z: float
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for v in (self.x, self.y, self.z, self.roll, self.pitch, self.yaw):
            if not math.isfinite(v):
                raise ValueError("pose components must be finite")
        object.__setattr__(self, "roll", wrap_angle(self.roll))
        object.__setattr__(self, "pitch", wrap_angle(self.pitch))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def vec6(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.roll, self.pitch, self.yaw],
            dtype=np.float64,
        )

    def moved(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0,
              dyaw: float = 0.0) -> "CameraPose":
        return CameraPose(self.x + dx, self.y + dy, self.z + dz,
                          self.roll, self.pitch, wrap_angle(self.yaw + dyaw))


def pose_delta(before: CameraPose, after: CameraPose) -> np.ndarray:
    """Six-vector displacement after - before with wrapped angle differences."""
    d = after.vec6 - before.vec6
    for i in (3, 4, 5):
        d[i] = wrap_angle(d[i])
    return d


@dataclass(frozen=True)
class ActuationNoise:
    """Gaussian actuation error applied per commanded motion.

    Translation error is multiplicative (sigma relative to the commanded
    displacement) with an additive floor so short steps stay imperfect.
    Axes that are not driven stay locked and keep their exact position.
    """

    mult_sigma: float = 0.05
    floor_m: float = 0.001

    def perturb(self, delta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = delta.copy()
        for i in range(3):
            if delta[i] == 0.0:
                continue
            out[i] = delta[i] * (1.0 + self.mult_sigma * rng.standard_normal())
            out[i] += self.floor_m * rng.standard_normal()
        return out


def apply_velocity(pose: CameraPose, velocity: np.ndarray, dt: float,
                   noise: Optional[ActuationNoise] = None,
                   rng: Optional[np.random.Generator] = None) -> CameraPose:
    """Integrate a 6-vector velocity over dt seconds.

    Roll/pitch commands are ignored: the camera mount only translates and
    rotates about the optical axis.
    """
    v = np.asarray(velocity, dtype=np.float64)
    if v.shape != (6,):
        raise ValueError("velocity must be a 6-vector")
    if not np.all(np.isfinite(v)) or not math.isfinite(dt) or dt < 0:
        raise ValueError("velocity and dt must be finite, dt non-negative")
    delta = v * dt
    if noise is not None:
        if rng is None:
            raise ValueError("actuation noise requires an rng")
        delta = noise.perturb(delta, rng)
    return CameraPose(pose.x + delta[0], pose.y + delta[1], pose.z + delta[2],
                      pose.roll, pose.pitch, wrap_angle(pose.yaw + delta[5]))


@dataclass(frozen=True)
class BoxShape:
    width: float
    depth: float
    height: float

    def __post_init__(self):
        if min(self.width, self.depth, self.height) <= 0:
            raise ValueError("box dimensions must be positive")

    def to_json(self) -> dict:
        return {"type": "box", "width": self.width, "depth": self.depth,
                "height": self.height}


@dataclass(frozen=True)
class CylinderShape:
    radius: float
    height: float

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("cylinder dimensions must be positive")

    def to_json(self) -> dict:
        return {"type": "cylinder", "radius": self.radius,
                "height": self.height}


@dataclass(frozen=True)
class SphereShape:
    """A ball; its top-down silhouette is the equator circle."""

    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    @property
    def height(self) -> float:
        return 2.0 * self.radius

    def to_json(self) -> dict:
        return {"type": "sphere", "radius": self.radius}


def shape_from_json(d: dict):
    kind = d.get("type")
    if kind == "box":
        return BoxShape(float(d["width"]), float(d["depth"]), float(d["height"]))
    if kind == "cylinder":
        return CylinderShape(float(d["radius"]), float(d["height"]))
    if kind == "sphere":
        return SphereShape(float(d["radius"]))
    raise ValueError(f"unknown shape type: {kind!r}")


@dataclass
class SceneObject:
    """A rigid object resting on a horizontal support."""

    obj_id: str
    class_label: str
    shape: object
    x: float
    y: float
    yaw: float = 0.0
    support_z: float = 0.0
    graspable: bool = True
    mass_ok: bool = True
    clutter_group: Optional[str] = None

    @property
    def top_z(self) -> float:
        return self.support_z + self.shape.height

    @property
    def height(self) -> float:
        return self.shape.height

    @property
    def silhouette_z(self) -> float:
        """Height of the plane carrying the widest top-down outline."""
        if isinstance(self.shape, SphereShape):
            return self.support_z + self.shape.radius
        return self.top_z

    @property
    def in_clutter(self) -> bool:
        return self.clutter_group is not None

    def footprint_outline(self) -> np.ndarray:
        """Widest outline in the world xy plane, shape (K, 2)."""
        if isinstance(self.shape, BoxShape):
            hw, hd = self.shape.width / 2.0, self.shape.depth / 2.0
            base = np.array([[-hw, -hd], [hw, -hd], [hw, hd], [-hw, hd]])
        else:
            ang = np.linspace(0.0, 2.0 * math.pi, CYLINDER_RIM_SAMPLES,
                              endpoint=False)
            base = self.shape.radius * np.stack(
                (np.cos(ang), np.sin(ang)), axis=1)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return base @ rot.T + np.array([self.x, self.y])

    def outline_points(self) -> np.ndarray:
        """3D outline points bounding the silhouette, shape (N, 3)."""
        xy = self.footprint_outline()
        if isinstance(self.shape, SphereShape):
            return np.column_stack((xy, np.full(len(xy), self.silhouette_z)))
        top = np.column_stack((xy, np.full(len(xy), self.top_z)))
        bot = np.column_stack((xy, np.full(len(xy), self.support_z)))
        return np.vstack((top, bot))

    def extent_along(self, direction_angle: float) -> float:
        """Width of the footprint measured along a world-frame direction."""
        if not isinstance(self.shape, BoxShape):
            return 2.0 * self.shape.radius
        rel = direction_angle - self.yaw
        return (self.shape.width * abs(math.cos(rel))
                + self.shape.depth * abs(math.sin(rel)))

    def contains_xy(self, px: float, py: float) -> bool:
        if not isinstance(self.shape, BoxShape):
            return math.hypot(px - self.x, py - self.y) <= self.shape.radius
        c, s = math.cos(-self.yaw), math.sin(-self.yaw)
        lx = (px - self.x) * c - (py - self.y) * s
        ly = (px - self.x) * s + (py - self.y) * c
        return (abs(lx) <= self.shape.width / 2.0
                and abs(ly) <= self.shape.depth / 2.0)

    def to_json(self) -> dict:
        d = {
            "obj_id": self.obj_id,
            "class": self.class_label,
            "shape": self.shape.to_json(),
            "x": self.x,
            "y": self.y,
            "yaw": self.yaw,
            "support_z": self.support_z,
            "graspable": self.graspable,
            "mass_ok": self.mass_ok,
        }
        if self.clutter_group is not None:
            d["clutter_group"] = self.clutter_group
        return d

    @staticmethod
    def from_json(d: dict) -> "SceneObject":
        return SceneObject(
            obj_id=str(d["obj_id"]),
            class_label=str(d["class"]),
            shape=shape_from_json(d["shape"]),
            x=float(d["x"]),
            y=float(d["y"]),
            yaw=float(d.get("yaw", 0.0)),
            support_z=float(d.get("support_z", 0.0)),
            graspable=bool(d.get("graspable", True)),
            mass_ok=bool(d.get("mass_ok", True)),
            clutter_group=d.get("clutter_group"),
        )


@dataclass(frozen=True)
class GroundTruthBox:
    """Axis-aligned projection of one object, clipped to the image."""

    object_id: str
    class_label: str
    center: Tuple[float, float]
    width: float
    height: float
    depth_to_top: float


def project_object(obj: SceneObject, cam: CameraPose,
                   intr: CameraIntrinsics) -> Optional[GroundTruthBox]:
    """Ground-truth bounding box of an object, or None when out of frame."""
    depth_top = cam.z - obj.top_z
    depth_bot = cam.z - obj.support_z
    if depth_top <= MIN_PROJECTION_DEPTH or depth_bot <= MIN_PROJECTION_DEPTH:
        raise DegenerateProjectionError(
            f"object {obj.obj_id} reaches the camera plane "
            f"(depth to top {depth_top:.6f} m)")
    pts = obj.outline_points()
    px = kernels.project_points(
        np.ascontiguousarray(pts), cam.x, cam.y, cam.z, cam.yaw,
        intr.focal_px, intr.principal_point[0], intr.principal_point[1])
    x_lo, y_lo = px[:, 0].min(), px[:, 1].min()
    x_hi, y_hi = px[:, 0].max(), px[:, 1].max()
    w_img, h_img = intr.image_size
    x_lo_c, x_hi_c = max(x_lo, 0.0), min(x_hi, float(w_img))
    y_lo_c, y_hi_c = max(y_lo, 0.0), min(y_hi, float(h_img))
    if x_lo_c >= x_hi_c or y_lo_c >= y_hi_c:
        return None
    return GroundTruthBox(
        object_id=obj.obj_id,
        class_label=obj.class_label,
        center=((x_lo_c + x_hi_c) / 2.0, (y_lo_c + y_hi_c) / 2.0),
        width=x_hi_c - x_lo_c,
        height=y_hi_c - y_lo_c,
        depth_to_top=depth_top,
    )


def pixel_to_world(u: float, v: float, depth: float, cam: CameraPose,
                   intr: CameraIntrinsics) -> Tuple[float, float, float]:
    """Back-project a pixel at a known depth below the camera."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    xc = (u - intr.principal_point[0]) * depth / intr.focal_px
    yc = (v - intr.principal_point[1]) * depth / intr.focal_px
    c, s = math.cos(cam.yaw), math.sin(cam.yaw)
    wx = cam.x + xc * c + yc * s
    wy = cam.y + xc * s - yc * c
    return wx, wy, cam.z - depth


class Scene:
    """Mutable collection of objects plus static world metadata."""

    def __init__(self, objects: Iterable[SceneObject],
                 intrinsics: CameraIntrinsics = CameraIntrinsics(),
                 name: str = "scene"):
        self.name = name
        self.intrinsics = intrinsics
        self._objects: Dict[str, SceneObject] = {}
        for obj in objects:
            if obj.obj_id in self._objects:
                raise ValueError(f"duplicate object id {obj.obj_id!r}")
            self._objects[obj.obj_id] = obj

    @property
    def objects(self) -> List[SceneObject]:
        return list(self._objects.values())

    def get(self, obj_id: str) -> SceneObject:
        return self._objects[obj_id]

    def remove(self, obj_id: str) -> SceneObject:
        return self._objects.pop(obj_id)

    def add(self, obj: SceneObject) -> None:
        if obj.obj_id in self._objects:
            raise ValueError(f"duplicate object id {obj.obj_id!r}")
        self._objects[obj.obj_id] = obj

    def class_vocabulary(self) -> List[str]:
        return sorted({o.class_label for o in self._objects.values()})

    def copy(self) -> "Scene":
        return Scene([copy.deepcopy(o) for o in self.objects],
                     self.intrinsics, self.name)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "intrinsics": self.intrinsics.to_json(),
            "objects": [o.to_json() for o in self.objects],
        }

    @staticmethod
    def from_json(d: dict) -> "Scene":
        intr = CameraIntrinsics.from_json(d.get("intrinsics", {}))
        objs = [SceneObject.from_json(o) for o in d.get("objects", [])]
        return Scene(objs, intr, str(d.get("name", "scene")))


class SimClock:
    """Simulated time; one camera frame per tick."""

    def __init__(self, dt: float = FRAME_DT):
        self.dt = dt
        self.t = 0.0
        self.frame = 0

    def tick(self, n: int = 1) -> float:
        self.frame += n
        self.t += n * self.dt
        return self.t


@dataclass(frozen=True)
class TruthEntry:
    box: GroundTruthBox
    in_clutter: bool


@dataclass
class ImageRecord:
    """One captured frame: camera state, per-object truth, lazy pixels."""

    image_id: str
    t: float
    cam: CameraPose
    camera_speed: float
    truth: Tuple[TruthEntry, ...]
    intrinsics: CameraIntrinsics
    render_objects: Tuple[SceneObject, ...] = ()
    _pixels: Optional[np.ndarray] = field(default=None, repr=False)

    def rasterize(self) -> np.ndarray:
        if self._pixels is None:
            self._pixels = render_pixels(self.render_objects, self.cam,
                                         self.intrinsics)
        return self._pixels


_PALETTE = [
    (204, 72, 56), (66, 133, 190), (96, 168, 82), (214, 162, 57),
    (136, 98, 180), (72, 180, 170), (188, 110, 150), (150, 150, 70),
    (100, 120, 200), (200, 120, 80), (90, 170, 120), (170, 90, 90),
]


def class_color(label: str) -> Tuple[int, int, int]:
    idx = sum(label.encode("utf-8")) % len(_PALETTE)
    return _PALETTE[idx]


def render_pixels(objects: Sequence[SceneObject], cam: CameraPose,
                  intr: CameraIntrinsics) -> np.ndarray:
    """Flat-shaded top-down render; lower objects are painted first."""
    w, h = intr.image_size
    img = np.full((h, w, 3), 228, dtype=np.uint8)
    for obj in sorted(objects, key=lambda o: (o.top_z, o.obj_id)):
        if cam.z - obj.top_z <= MIN_PROJECTION_DEPTH:
            continue
        xy = obj.footprint_outline()
        pts = np.column_stack((xy, np.full(len(xy), obj.silhouette_z)))
        px = kernels.project_points(
            np.ascontiguousarray(pts), cam.x, cam.y, cam.z, cam.yaw,
            intr.focal_px, intr.principal_point[0], intr.principal_point[1])
        r, g, b = class_color(obj.class_label)
        kernels.fill_convex_polygon(img, np.ascontiguousarray(px[:, 0]),
                                    np.ascontiguousarray(px[:, 1]), r, g, b)
    return img


def to_png_bytes(pixels: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class SnapshotStore:
    """Assigns deterministic image ids and keeps records for later lookup."""

    def __init__(self, keep_render_state: bool = True):
        self._records: Dict[str, ImageRecord] = {}
        self._counter = 0
        self.keep_render_state = keep_render_state

    def __len__(self) -> int:
        return len(self._records)

    def get(self, image_id: str) -> ImageRecord:
        return self._records[image_id]

    def capture(self, scene: Scene, cam: CameraPose, clock: SimClock,
                camera_speed: float = 0.0) -> ImageRecord:
        truth = []
        for obj in scene.objects:
            try:
                box = project_object(obj, cam, scene.intrinsics)
            except DegenerateProjectionError:
                # Object reaches the camera plane: invisible to a camera
                # looking straight down, so it simply yields no truth box.
                continue
            if box is not None:
                truth.append(TruthEntry(box=box, in_clutter=obj.in_clutter))
        image_id = f"img-{self._counter:06d}"
        self._counter += 1
        render_objs = (tuple(copy.deepcopy(o) for o in scene.objects)
                       if self.keep_render_state else ())
        rec = ImageRecord(
            image_id=image_id, t=clock.t, cam=cam, camera_speed=camera_speed,
            truth=tuple(truth), intrinsics=scene.intrinsics,
            render_objects=render_objs)
        self._records[image_id] = rec
        return rec


def save_scene(scene: Scene, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene(path: str) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return Scene.from_json(json.load(fh))
