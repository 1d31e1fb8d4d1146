"""Deterministic synthetic scenes and videos with exact ground truth."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io

MANIFEST_VERSION = "conceptseg-dataset/1"
KINDS = ("disk", "rectangle", "triangle", "ring")

# saturated class colours; background is drawn from a low-saturation range
DEFAULT_PALETTE = (
    (0.85, 0.15, 0.15),
    (0.15, 0.70, 0.20),
    (0.15, 0.25, 0.90),
    (0.95, 0.85, 0.15),
    (0.75, 0.20, 0.85),
    (0.10, 0.80, 0.85),
    (0.95, 0.55, 0.10),
    (0.45, 0.25, 0.10),
)


@dataclass
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (7.0, 14.0)
    kinds: tuple[str, ...] = KINDS
    palette: tuple[tuple[float, float, float], ...] | None = None
    palette_margin: float = 0.4
    color_jitter: float = 0.05
    texture_noise: float = 0.03
    background_range: tuple[float, float] = (0.35, 0.65)
    background_gradient: float = 0.15
    min_visible: float = 0.3

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.shapes_per_image = tuple(self.shapes_per_image)
        self.size_range = tuple(self.size_range)
        self.kinds = tuple(self.kinds)
        if self.palette is None:
            if self.num_classes > len(DEFAULT_PALETTE):
                raise ValueError(f"default palette has {len(DEFAULT_PALETTE)} colours")
            self.palette = DEFAULT_PALETTE[:self.num_classes]
        self.palette = tuple(tuple(c) for c in self.palette)
        if len(self.palette) != self.num_classes:
            raise ValueError("palette needs one colour per class")
        if unknown := set(self.kinds) - set(KINDS):
            raise ValueError(f"unknown shape kinds {unknown}")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi <= self.num_classes:
            raise ValueError("shapes_per_image must satisfy 1 <= min <= max <= num_classes")
        for a, b in itertools.combinations(range(self.num_classes), 2):
            gap = np.linalg.norm(np.subtract(self.palette[a], self.palette[b]))
            if gap < self.palette_margin:
                raise ValueError(f"classes {a + 1} and {b + 1} are only {gap:.3f} apart in RGB")

    def kind_of(self, cls: int) -> str:
        return self.kinds[(cls - 1) % len(self.kinds)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class Shape:
    cls: int
    kind: str
    center: tuple[float, float]
    radius: float
    aspect: float
    color: np.ndarray
    texture: np.ndarray  # (2R+1, 2R+1, 3) noise in object coordinates

    def extent(self) -> tuple[float, float]:
        if self.kind == "rectangle":
            return self.radius * self.aspect, self.radius / self.aspect
        return self.radius, self.radius

    def mask(self, shape: tuple[int, int], center=None) -> np.ndarray:
        cy, cx = self.center if center is None else center
        yy, xx = np.mgrid[:shape[0], :shape[1]]
        dy, dx = yy - cy, xx - cx
        r = self.radius
        if self.kind == "disk":
            return dy ** 2 + dx ** 2 <= r ** 2
        if self.kind == "ring":
            d2 = dy ** 2 + dx ** 2
            return (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
        if self.kind == "rectangle":
            hy, hx = self.extent()
            return (np.abs(dy) <= hy) & (np.abs(dx) <= hx)
        # upward isosceles triangle with apex at (cy - r, cx)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)

    def texture_at(self, shape: tuple[int, int], center) -> np.ndarray:
        cy, cx = center
        half = self.texture.shape[0] // 2
        yy, xx = np.mgrid[:shape[0], :shape[1]]
        ty = np.clip(np.round(yy - cy).astype(int) + half, 0, 2 * half)
        tx = np.clip(np.round(xx - cx).astype(int) + half, 0, 2 * half)
        return self.texture[ty, tx]


@dataclass
class Layout:
    background: np.ndarray  # (H, W, 3) gradient plus noise
    shapes: list[Shape] = field(default_factory=list)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    label: np.ndarray  # (H, W) uint8 class ids, 0 = background
    instances: np.ndarray  # (H, W) uint8 object ids, 0 = background


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    base = rng.uniform(*spec.background_range, size=3)
    tilt = rng.uniform(-spec.background_gradient, spec.background_gradient, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[:h, :w]
    t = (np.cos(angle) * xx / max(w - 1, 1) + np.sin(angle) * yy / max(h - 1, 1)) - 0.5
    img = base + t[..., None] * tilt
    return img + spec.texture_noise * rng.standard_normal((h, w, 3))


def _shape_fits(spec: SceneSpec) -> bool:
    h, w = spec.image_size
    return 2 * spec.size_range[1] + 1 <= min(h, w)


def render(spec: SceneSpec, layout: Layout, centers=None) -> Scene:
    """Paint shapes in order (later shapes occlude earlier ones)."""
    h, w = spec.image_size
    img = layout.background.copy()
    label = np.zeros((h, w), dtype=np.uint8)
    inst = np.zeros((h, w), dtype=np.uint8)
    for i, s in enumerate(layout.shapes):
        c = s.center if centers is None else centers[i]
        m = s.mask((h, w), c)
        img[m] = (s.color + s.texture_at((h, w), c))[m]
        label[m] = s.cls
        inst[m] = i + 1
    img8 = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return Scene(img8, label, inst)


def _visible_enough(spec: SceneSpec, layout: Layout, scene: Scene) -> bool:
    for i, s in enumerate(layout.shapes):
        area = s.mask(spec.image_size).sum()
        if area == 0 or (scene.instances == i + 1).sum() < spec.min_visible * area:
            return False
    return True


def sample_layout(spec: SceneSpec, rng: np.random.Generator, max_tries: int = 200) -> Layout:
    if not _shape_fits(spec):
        raise ValueError(f"shapes up to size {spec.size_range[1]} do not fit {spec.image_size}")
    h, w = spec.image_size
    background = _background(spec, rng)
    n = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    classes = rng.choice(spec.num_classes, size=n, replace=False) + 1
    shapes = []
    for cls in classes.tolist():
        kind = spec.kind_of(cls)
        radius = float(rng.uniform(*spec.size_range))
        aspect = float(rng.uniform(0.7, 1.3)) if kind == "rectangle" else 1.0
        color = np.asarray(spec.palette[cls - 1]) + rng.uniform(
            -spec.color_jitter, spec.color_jitter, size=3)
        half = int(np.ceil(radius * 1.5)) + 1
        texture = spec.texture_noise * rng.standard_normal((2 * half + 1, 2 * half + 1, 3))
        shapes.append(Shape(cls, kind, (0.0, 0.0), radius, aspect, color, texture))
    for _ in range(max_tries):
        for s in shapes:
            hy, hx = s.extent()
            s.center = (float(rng.uniform(hy, h - 1 - hy)), float(rng.uniform(hx, w - 1 - hx)))
        layout = Layout(background, shapes)
        if _visible_enough(spec, layout, render(spec, layout)):
            return layout
    raise ValueError("could not place shapes with the required visibility")


def generate_scene(spec: SceneSpec, seed: int, index: int) -> Scene:
    return render(spec, sample_layout(spec, _image_rng(seed, index)))


def generate_scenes(spec: SceneSpec, count: int, seed: int) -> list[Scene]:
    """``count`` scenes; scene ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate_scene(spec, seed, i) for i in range(count)]


@dataclass
class Video:
    frames: list[np.ndarray]  # uint8 (H, W, 3)
    masks: list[np.ndarray]  # uint8 (H, W) object ids, 0 = background
    labels: list[np.ndarray]  # uint8 (H, W) class ids
    object_classes: list[int]


def generate_video(spec: SceneSpec, frames: int, seed: int, velocities=None,
                   max_speed: float = 1.5) -> Video:
    """Shapes of the first scene translating at constant velocity.

    Frame 0 equals ``generate_scenes(spec, 1, seed)[0]``. Centres are clamped
    so each shape stays fully inside the image.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = _image_rng(seed, 0)
    layout = sample_layout(spec, rng)
    n = len(layout.shapes)
    if velocities is None:
        vel_rng = np.random.default_rng([seed, 1 << 20])
        velocities = vel_rng.uniform(-max_speed, max_speed, size=(n, 2))
    velocities = np.broadcast_to(np.asarray(velocities, dtype=np.float64), (n, 2))
    h, w = spec.image_size
    out = Video([], [], [], [s.cls for s in layout.shapes])
    for t in range(frames):
        centers = []
        for s, v in zip(layout.shapes, velocities):
            hy, hx = s.extent()
            cy = float(np.clip(s.center[0] + v[0] * t, hy, h - 1 - hy))
            cx = float(np.clip(s.center[1] + v[1] * t, hx, w - 1 - hx))
            centers.append((cy, cx))
        scene = render(spec, layout, centers)
        out.frames.append(scene.image)
        out.masks.append(scene.instances)
        out.labels.append(scene.label)
    return out


# --- dataset on disk ---------------------------------------------------------------------------

@dataclass
class DatasetEntry:
    id: str
    image: str
    label: str
    split: str
    seg: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[DatasetEntry]
    classes: list[str]
    seed: int
    spec: dict
    videos: list[dict] = field(default_factory=list)
    version: str = MANIFEST_VERSION

    def split(self, name: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> dict:
        return {"version": self.version, "seed": self.seed, "classes": self.classes,
                "spec": self.spec, "entries": [asdict(e) for e in self.entries],
                "videos": self.videos}

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')!r}")
        root = path.parent
        entries = [DatasetEntry(**e) for e in d["entries"]]
        for e in entries:
            for rel in (e.image, e.label, e.seg):
                if rel is not None and not (root / rel).exists():
                    raise FileNotFoundError(root / rel)
        return cls(root, entries, d["classes"], d["seed"], d["spec"], d.get("videos", []),
                   d["version"])

    def load_images(self, split: str) -> tuple[list[np.ndarray], list[np.ndarray]]:
        items = self.split(split)
        images = [io.load_rgb(self.root / e.image) for e in items]
        labels = [io.load_label(self.root / e.label) for e in items]
        return images, labels

    def load_video(self, index: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        v = self.videos[index]
        vdir = self.root / v["dir"]
        frames = [io.load_rgb(vdir / f"frame_{t:03d}.png") for t in range(v["frames"])]
        masks = [io.load_label(vdir / f"mask_{t:03d}.png") for t in range(v["frames"])]
        return frames, masks


def write_dataset(out: Path, spec: SceneSpec, n_train: int, n_val: int, seed: int,
                  n_videos: int = 0, video_frames: int = 20) -> DatasetManifest:
    """Generate and save a dataset; val scenes continue the train index sequence."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_train + n_val):
        scene = generate_scene(spec, seed, i)
        split = "train" if i < n_train else "val"
        name = f"{split}_{i:05d}"
        io.save_rgb(out / "images" / f"{name}.png", scene.image)
        io.save_label(out / "labels" / f"{name}.png", scene.label)
        entries.append(DatasetEntry(name, f"images/{name}.png", f"labels/{name}.png", split))
    videos = []
    for v in range(n_videos):
        vid = generate_video(spec, video_frames, seed=seed * 1000 + 7919 + v)
        vdir = out / "videos" / f"{v:03d}"
        vdir.mkdir(parents=True, exist_ok=True)
        for t, (frame, mask) in enumerate(zip(vid.frames, vid.masks)):
            io.save_rgb(vdir / f"frame_{t:03d}.png", frame)
            io.save_label(vdir / f"mask_{t:03d}.png", mask)
        videos.append({"dir": f"videos/{v:03d}", "frames": video_frames,
                       "object_classes": vid.object_classes})
    classes = ["background"] + [f"{spec.kind_of(c)}_{c}" for c in range(1, spec.num_classes + 1)]
    manifest = DatasetManifest(out, entries, classes, seed, spec.to_dict(), videos)
    manifest.save()
    return manifest
