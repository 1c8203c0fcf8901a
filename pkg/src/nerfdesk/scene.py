"""Procedural synthetic scenes, pinhole cameras, and the analytic oracle renderer.

A scene is a list of constant-density, constant-albedo primitives (spheres
and axis-aligned boxes) plus a background color.  The density field is the
sum of the member densities at a point and the emission color is the
density-weighted mean albedo, which makes the volumetric ground truth a
one-dimensional quadrature per ray.

Conventions: world up is +y; images are (H, W, 3) float64 in [0, 1] with
pixel (px, py) at ``img[py, px]``; camera rotation columns are
[right, down, forward] mapping camera coordinates to world coordinates.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .rng import Prng


@dataclass
class Primitive:
    kind: str                      # "sphere" or "box"
    center: np.ndarray             # (3,)
    size: np.ndarray               # sphere: (1,) radius; box: (3,) half extents
    density: float                 # 1/length, >= 0
    albedo: np.ndarray             # (3,) in [0, 1]

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        self.density = float(self.density)
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.kind == "sphere" and self.size.shape != (1,):
            raise ValueError("sphere size must be a single radius")
        if self.kind == "box" and self.size.shape != (3,):
            raise ValueError("box size must be three half extents")
        if self.density < 0.0:
            raise ValueError(f"density must be nonnegative, got {self.density}")
        if np.any(self.size <= 0.0):
            raise ValueError("primitive extents must be positive")
        if np.any(self.albedo < 0.0) or np.any(self.albedo > 1.0):
            raise ValueError(f"albedo must lie in [0,1]^3, got {self.albedo}")

    def outer_radius(self):
        if self.kind == "sphere":
            return float(self.size[0])
        return float(np.linalg.norm(self.size))

    def contains(self, pts):
        """Boolean mask of shape (N,) for points (N, 3)."""
        d = pts - self.center
        if self.kind == "sphere":
            return (d * d).sum(axis=1) <= self.size[0] * self.size[0]
        return (np.abs(d) <= self.size).all(axis=1)

    def surface_area(self):
        if self.kind == "sphere":
            return 4.0 * math.pi * float(self.size[0]) ** 2
        hx, hy, hz = self.size
        return 8.0 * (hx * hy + hy * hz + hz * hx)


@dataclass
class SyntheticScene:
    primitives: list = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if np.any(self.background < 0.0) or np.any(self.background > 1.0):
            raise ValueError("background must lie in [0,1]^3")


def field_at(scene, pts):
    """Analytic density and emission color at points (N, 3).

    Density adds over overlapping primitives and the color is the
    density-weighted mean albedo; where density is zero the color is zero
    (it never enters the compositing integral there).
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    sigma = np.zeros(n)
    emission = np.zeros((n, 3))
    for prim in scene.primitives:
        inside = prim.contains(pts)
        if not inside.any():
            continue
        sigma[inside] += prim.density
        emission[inside] += prim.density * prim.albedo
    rgb = np.zeros((n, 3))
    hit = sigma > 0.0
    rgb[hit] = emission[hit] / sigma[hit, None]
    return sigma, rgb


def scene_bounds(scene, margin=0.25):
    """(center, radius) of a sphere containing every primitive plus margin."""
    if not scene.primitives:
        return np.zeros(3), 1.0
    centers = np.stack([p.center for p in scene.primitives])
    center = centers.mean(axis=0)
    radius = max(
        float(np.linalg.norm(p.center - center)) + p.outer_radius()
        for p in scene.primitives
    )
    return center, radius + margin


# ---------------------------------------------------------------------------
# cameras and rays


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3), columns [right, down, forward]
    position: np.ndarray     # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (max |R'R - I| = {err:g})")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValueError("ray direction must be unit length")


def look_at(position, target, up=(0.0, 1.0, 0.0)):
    """Rotation with columns [right, down, forward] looking from position to target."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(fwd)
    if n == 0.0:
        raise ValueError("camera position coincides with target")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("view direction is parallel to the up vector")
    right = right / rn
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def make_camera_ring(n_views, radius, target=(0.0, 0.0, 0.0), resolution=32,
                     fov_deg=45.0):
    """Cameras equally spaced on a horizontal circle about ``target``.

    Each camera sits at distance ``radius`` from the target and looks at it;
    azimuths are uniform, so consecutive cameras differ by 360/n degrees.
    """
    if n_views < 1:
        raise ValueError("n_views must be at least 1")
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    target = np.asarray(target, dtype=np.float64)
    w = h = int(resolution)
    focal = 0.5 * w / math.tan(math.radians(fov_deg) / 2.0)
    cams = []
    for k in range(n_views):
        theta = 2.0 * math.pi * k / n_views
        pos = target + radius * np.array([math.cos(theta), 0.0, math.sin(theta)])
        cams.append(Camera(fx=focal, fy=focal, cx=w / 2.0, cy=h / 2.0,
                           width=w, height=h,
                           rotation=look_at(pos, target), position=pos))
    return cams


def cast_ray(camera, px, py):
    """Pinhole ray through the center of pixel (px, py)."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(
            f"pixel ({px}, {py}) outside {camera.width}x{camera.height}"
        )
    d = np.array([
        (px + 0.5 - camera.cx) / camera.fx,
        (py + 0.5 - camera.cy) / camera.fy,
        1.0,
    ])
    d_world = camera.rotation @ d
    d_world = d_world / np.linalg.norm(d_world)
    return Ray(origin=camera.position.copy(), direction=d_world)


def camera_ray_grid(camera):
    """Unit directions for every pixel, shape (H*W, 3), row-major (py, px)."""
    px = np.arange(camera.width) + 0.5
    py = np.arange(camera.height) + 0.5
    xs = (px - camera.cx) / camera.fx
    ys = (py - camera.cy) / camera.fy
    d = np.empty((camera.height, camera.width, 3))
    d[:, :, 0] = xs[None, :]
    d[:, :, 1] = ys[:, None]
    d[:, :, 2] = 1.0
    d = d.reshape(-1, 3) @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d


def near_far_for(scene, camera, near=None, far=None):
    """Default ray span from the scene's bounding sphere (overridable)."""
    center, radius = scene_bounds(scene)
    dist = float(np.linalg.norm(camera.position - center))
    if near is None:
        near = max(1e-3, dist - radius)
    if far is None:
        far = dist + radius
    if near >= far:
        raise ValueError(f"degenerate ray span: near {near} >= far {far}")
    return float(near), float(far)


def oracle_render(scene, camera, samples_per_ray, near=None, far=None):
    """Ground-truth render by stratified midpoint quadrature.

    Emission-absorption compositing of the analytic field, sampled at the
    midpoint of each of ``samples_per_ray`` equal strata along every pixel
    ray.  Deterministic given (scene, camera, samples_per_ray, span).
    """
    if samples_per_ray < 2:
        raise ValueError("samples_per_ray must be at least 2")
    near, far = near_far_for(scene, camera, near, far)
    dirs = camera_ray_grid(camera)
    n_rays = dirs.shape[0]
    s = int(samples_per_ray)
    step = (far - near) / s
    ts = near + (np.arange(s) + 0.5) * step
    img = np.empty((n_rays, 3))
    chunk = max(1, 2_000_000 // s)
    for lo in range(0, n_rays, chunk):
        d = dirs[lo:lo + chunk]
        pts = camera.position[None, None, :] + d[:, None, :] * ts[None, :, None]
        sigma, rgb = field_at(scene, pts.reshape(-1, 3))
        r = d.shape[0]
        sigma = sigma.reshape(r, s)
        rgb = rgb.reshape(r, s, 3)
        sd = sigma * step
        om = np.exp(-sd)
        alpha = -np.expm1(-sd)
        pixel, _, _ = backend.composite_scan(om, alpha, rgb, scene.background)
        img[lo:lo + chunk] = pixel
    return img.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# point sampling


def sample_point_cloud(scene, n, seed):
    """n points on primitive surfaces, area-weighted, deterministic in seed."""
    if n < 1:
        raise ValueError("need at least one point")
    if not scene.primitives:
        raise ValueError("cannot sample an empty scene")
    rng = Prng(seed)
    areas = np.array([p.surface_area() for p in scene.primitives])
    cum = np.cumsum(areas / areas.sum())
    u = rng.uniform(n)
    which = np.searchsorted(cum, u, side="right").clip(0, len(areas) - 1)
    pts = np.empty((n, 3))
    for i, prim in enumerate(scene.primitives):
        idx = np.flatnonzero(which == i)
        if idx.size == 0:
            continue
        if prim.kind == "sphere":
            v = rng.normal((idx.size, 3))
            norm = np.linalg.norm(v, axis=1, keepdims=True)
            norm[norm == 0.0] = 1.0
            pts[idx] = prim.center + prim.size[0] * (v / norm)
        else:
            pts[idx] = _sample_box_surface(prim, idx.size, rng)
    return pts


def _sample_box_surface(prim, k, rng):
    hx, hy, hz = prim.size
    face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    cum = np.cumsum(face_areas / face_areas.sum())
    face = np.searchsorted(cum, rng.uniform(k), side="right").clip(0, 5)
    uv = rng.uniform((k, 2)) * 2.0 - 1.0
    out = np.empty((k, 3))
    axis = face // 2                     # 0: +-x, 1: +-y, 2: +-z
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    half = prim.size
    for a in range(3):
        sel = axis == a
        if not sel.any():
            continue
        o1, o2 = [b for b in range(3) if b != a]
        out[sel, a] = sign[sel] * half[a]
        out[sel, o1] = uv[sel, 0] * half[o1]
        out[sel, o2] = uv[sel, 1] * half[o2]
    return out + prim.center


# ---------------------------------------------------------------------------
# rigid motion (for invariance checks and scene tooling)


def transform_scene(scene, rotation=None, translation=None):
    """Rigidly move a scene; boxes stay axis-aligned so they accept translation only."""
    r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
    prims = []
    for p in scene.primitives:
        if p.kind == "box" and not np.allclose(r, np.eye(3), atol=0.0):
            raise ValueError("axis-aligned boxes only support translation")
        prims.append(Primitive(p.kind, r @ p.center + t, p.size.copy(),
                               p.density, p.albedo.copy()))
    return SyntheticScene(prims, scene.background.copy())


def transform_camera(camera, rotation=None, translation=None):
    r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
    return Camera(camera.fx, camera.fy, camera.cx, camera.cy,
                  camera.width, camera.height,
                  rotation=r @ camera.rotation,
                  position=r @ camera.position + t)


# ---------------------------------------------------------------------------
# procedural generation


def generate_scene(seed):
    """Two spheres and one box with seed-varied placement, sizes, and colors."""
    rng = Prng(seed).child(101)
    prims = []
    for i in range(2):
        theta = rng.uniform() * 2.0 * math.pi
        rad = 0.45 + 0.35 * rng.uniform()
        dist = 0.45 + 0.45 * rng.uniform()
        center = np.array([dist * math.cos(theta),
                           -0.15 + 0.3 * rng.uniform(),
                           dist * math.sin(theta)])
        albedo = 0.15 + 0.75 * rng.uniform(3)
        prims.append(Primitive("sphere", center, [rad],
                               3.0 + 3.0 * rng.uniform(), albedo))
    theta = rng.uniform() * 2.0 * math.pi
    dist = 0.5 + 0.4 * rng.uniform()
    center = np.array([dist * math.cos(theta),
                       -0.2 + 0.3 * rng.uniform(),
                       dist * math.sin(theta)])
    half = 0.2 + 0.25 * rng.uniform(3)
    prims.append(Primitive("box", center, half,
                           3.0 + 3.0 * rng.uniform(), 0.15 + 0.75 * rng.uniform(3)))
    background = np.full(3, 0.06 + 0.08 * rng.uniform())
    return SyntheticScene(prims, background)


# ---------------------------------------------------------------------------
# persistence: scene files, images, point clouds


def _fmt(x):
    # shortest round-trip decimal form of a float64
    return repr(float(x))


def save_scene(path, scene):
    """Write the line-oriented scene format (see load_scene)."""
    lines = ["# synthetic scene"]
    bg = scene.background
    lines.append(f"background {_fmt(bg[0])} {_fmt(bg[1])} {_fmt(bg[2])}")
    for p in scene.primitives:
        c = p.center
        a = p.albedo
        if p.kind == "sphere":
            geom = f"radius {_fmt(p.size[0])}"
        else:
            geom = f"half {_fmt(p.size[0])} {_fmt(p.size[1])} {_fmt(p.size[2])}"
        lines.append(
            f"{p.kind} center {_fmt(c[0])} {_fmt(c[1])} {_fmt(c[2])} {geom} "
            f"density {_fmt(p.density)} albedo {_fmt(a[0])} {_fmt(a[1])} {_fmt(a[2])}"
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _parse_floats(tokens, key, count, lineno):
    if tokens[:1] != [key]:
        raise ValueError(f"scene line {lineno}: expected key {key!r}")
    if len(tokens) < count + 1:
        raise ValueError(f"scene line {lineno}: {key!r} needs {count} numbers")
    try:
        vals = [float(t) for t in tokens[1:count + 1]]
    except ValueError as exc:
        raise ValueError(f"scene line {lineno}: bad number in {key!r}") from exc
    return vals, tokens[count + 1:]


def load_scene(path):
    """Parse a scene file.

    Grammar (UTF-8, one record per line, ``#`` starts a comment):

        background R G B
        sphere center X Y Z radius R density D albedo R G B
        box center X Y Z half HX HY HZ density D albedo R G B
    """
    background = np.zeros(3)
    prims = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            kind = tokens[0]
            if kind == "background":
                vals, rest = _parse_floats(tokens, "background", 3, lineno)
                if rest:
                    raise ValueError(f"scene line {lineno}: trailing tokens {rest}")
                background = np.array(vals)
            elif kind in ("sphere", "box"):
                rest = tokens[1:]
                center, rest = _parse_floats(rest, "center", 3, lineno)
                if kind == "sphere":
                    size, rest = _parse_floats(rest, "radius", 1, lineno)
                else:
                    size, rest = _parse_floats(rest, "half", 3, lineno)
                dens, rest = _parse_floats(rest, "density", 1, lineno)
                albedo, rest = _parse_floats(rest, "albedo", 3, lineno)
                if rest:
                    raise ValueError(f"scene line {lineno}: trailing tokens {rest}")
                prims.append(Primitive(kind, center, size, dens[0], albedo))
            else:
                raise ValueError(f"scene line {lineno}: unknown record {kind!r}")
    return SyntheticScene(prims, background)


def write_ppm(path, img):
    """Binary PPM (P6, maxval 255); values round half-up from [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    quant = np.floor(img * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quant.tobytes(order="C"))


def read_ppm(path):
    """Load a binary PPM written by write_ppm back to (H, W, 3) in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    raw = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3)
    return raw.reshape(h, w, 3).astype(np.float64) / float(maxval)


def write_image_f64(path, img):
    """Raw float64 image: one ASCII header line 'f64 H W C', then LE payload."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(f"f64 {img.shape[0]} {img.shape[1]} {img.shape[2]}\n".encode())
        f.write(img.astype("<f8").tobytes(order="C"))


def read_image_f64(path):
    with open(path, "rb") as f:
        header = f.readline().split()
        if header[:1] != [b"f64"] or len(header) != 4:
            raise ValueError(f"{path}: not a raw float64 image")
        h, w, c = (int(x) for x in header[1:])
        return np.frombuffer(f.read(), dtype="<f8").reshape(h, w, c).copy()


def write_pointcloud(path, pts):
    """ASCII ``x y z`` lines."""
    pts = np.asarray(pts, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in pts:
            f.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n")


def read_pointcloud(path):
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path} line {lineno}: expected 'x y z'")
            rows.append([float(p) for p in parts])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)
