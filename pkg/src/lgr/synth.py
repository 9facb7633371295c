"""Synthetic layout-consistent landmark scenes.

A scene is one "person" drawn as filled garment polygons (one per body part,
the convex hull of that part's landmarks, slightly inflated) plus a head,
over a background with clutter rectangles. Landmarks come from the
hierarchy's anchor template: left points are jittered, right points are
mirror images of the left ones about the torso axis plus ``sigma_sym``
jitter, and the parts listed under ``order`` keep their top-to-bottom
order. An optional smaller distractor person is drawn but not annotated.

Every scene is a pure function of (spec, split, index).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.spatial import ConvexHull, QhullError

from .config import SynthSpec
from .errors import DataError, ValidationError
from .graph import HierarchySpec, get_hierarchy

SPLITS = ("train", "val", "test")
FORMAT = "lgr-synth-1"


@dataclass
class Landmark:
    name: str
    x: float
    y: float
    visible: bool = True


@dataclass
class SceneAnnotation:
    id: str
    width: int
    height: int
    landmarks: list[Landmark]
    tags: dict = field(default_factory=dict)
    pose: dict = field(default_factory=dict)
    distractor: list[list[float]] = field(default_factory=list)
    render_seed: int = 0

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "SceneAnnotation":
        try:
            lms = [Landmark(str(m["name"]), float(m["x"]), float(m["y"]), bool(m["visible"])) for m in rec["landmarks"]]
            return cls(
                id=str(rec["id"]),
                width=int(rec["width"]),
                height=int(rec["height"]),
                landmarks=lms,
                tags=dict(rec.get("tags", {})),
                pose=dict(rec.get("pose", {})),
                distractor=[list(map(float, pt)) for pt in rec.get("distractor", [])],
                render_seed=int(rec.get("render_seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed annotation record: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def coords(self) -> np.ndarray:
        return np.array([[m.x, m.y] for m in self.landmarks])

    def visible(self) -> np.ndarray:
        return np.array([m.visible for m in self.landmarks], dtype=bool)


def validate_annotation(ann: SceneAnnotation, hierarchy: HierarchySpec) -> None:
    names = [m.name for m in ann.landmarks]
    if names != hierarchy.leaves:
        missing = set(hierarchy.leaves) - set(names)
        extra = set(names) - set(hierarchy.leaves)
        raise ValidationError(f"{ann.id}: landmark names do not match hierarchy (missing {sorted(missing)}, extra {sorted(extra)})")
    for m in ann.landmarks:
        if m.visible and not (0.0 <= m.x <= 1.0 and 0.0 <= m.y <= 1.0):
            raise ValidationError(f"{ann.id}: visible landmark {m.name} outside the image ({m.x}, {m.y})")


# ----------------------------------------------------------------------------
# sampling


def _rotation(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def to_image(points: np.ndarray, pose: dict) -> np.ndarray:
    """Torso-frame points -> normalized image coordinates."""
    R = _rotation(pose["angle"])
    return np.array([pose["cx"], pose["cy"]]) + pose["scale"] * points @ R.T


def _ordered(h: HierarchySpec, pts: dict[str, np.ndarray]) -> bool:
    for upper, lower in zip(h.order, h.order[1:]):
        top = max(pts[c][1] for c in h.children_of(upper))
        bottom = min(pts[c][1] for c in h.children_of(lower))
        if not top < bottom:
            return False
    return True


def sample_layout(rng: np.random.Generator, h: HierarchySpec, spec: SynthSpec) -> np.ndarray:
    """Leaf positions in the torso frame (leaf order), mirrored pairs and ordering enforced."""
    partner = {a: b for a, b in h.symmetric_pairs}
    rights = set(partner.values())
    for _ in range(50):
        pts: dict[str, np.ndarray] = {}
        for n in h.leaves:
            if n in rights:
                continue
            pts[n] = np.asarray(h.anchors[n]) + rng.normal(0.0, spec.sigma_pos, 2)
            if n in partner:
                lx, ly = pts[n]
                pts[partner[n]] = np.array([-lx, ly]) + rng.normal(0.0, spec.sigma_sym, 2)
        if _ordered(h, pts):
            break
    else:
        pts = {n: np.asarray(h.anchors[n], dtype=float) for n in h.leaves}
    return np.array([pts[n] for n in h.leaves])


def sample_scene(rng: np.random.Generator, spec: SynthSpec, hierarchy: HierarchySpec | None = None, image_id: str = "0") -> SceneAnnotation:
    h = hierarchy or get_hierarchy(spec.hierarchy)
    missing = [n for n in h.leaves if n not in h.anchors]
    if missing:
        raise ValidationError(f"hierarchy {h.name} has no anchor for {missing}")
    pose = {
        "cx": 0.5 + float(rng.uniform(-spec.shift, spec.shift)),
        "cy": 0.5 + float(rng.uniform(-spec.shift, spec.shift)),
        "angle": float(rng.uniform(-spec.rotation_deg, spec.rotation_deg)),
        "scale": float(rng.uniform(*spec.scale_range)),
    }
    xy = to_image(sample_layout(rng, h, spec), pose)
    landmarks = [
        Landmark(n, float(x), float(y), bool(0.0 <= x <= 1.0 and 0.0 <= y <= 1.0)) for n, (x, y) in zip(h.leaves, xy)
    ]
    distractor: list[list[float]] = []
    has_distractor = bool(rng.uniform() < spec.distractor_prob)
    if has_distractor:
        for _ in range(20):
            c = rng.uniform(0.2, 0.8, 2)
            if np.hypot(*(c - [pose["cx"], pose["cy"]])) > 0.3:
                break
        dpose = {
            "cx": float(c[0]),
            "cy": float(c[1]),
            "angle": float(rng.uniform(-spec.rotation_deg, spec.rotation_deg)),
            "scale": pose["scale"] * float(rng.uniform(*spec.distractor_scale)),
        }
        distractor = to_image(sample_layout(rng, h, spec), dpose).tolist()
    n_clutter = int(rng.poisson(spec.clutter_density)) if spec.clutter_density > 0 else 0
    occluded = bool(rng.uniform() < spec.occlusion_prob)
    return SceneAnnotation(
        id=image_id,
        width=spec.image_size,
        height=spec.image_size,
        landmarks=landmarks,
        tags={"occluded": occluded, "distractor_present": has_distractor, "clutter_level": n_clutter},
        pose=pose,
        distractor=distractor,
        render_seed=int(rng.integers(2**31)),
    )


# ----------------------------------------------------------------------------
# rendering


def garment_polygons(points: np.ndarray, h: HierarchySpec, inflate: float = 1.1) -> list[np.ndarray]:
    """One inflated convex hull per body part (level just below the root)."""
    body_level = len(h.levels) - 2
    leaf_to_body = {}
    for n in h.leaves:
        node = n
        for _ in range(body_level):
            node = h.parent_of[node]
        leaf_to_body[n] = node
    polys = []
    for body in h.levels[body_level]:
        idx = [i for i, n in enumerate(h.leaves) if leaf_to_body[n] == body]
        pts = points[idx]
        try:
            hull = pts[ConvexHull(pts).vertices]
        except (QhullError, ValueError):
            # degenerate part (2 points or collinear): thin quad along its extent
            c = pts.mean(axis=0)
            far = pts[np.argmax(np.linalg.norm(pts - c, axis=1))] - c
            normal = np.array([-far[1], far[0]]) * 0.25
            hull = np.array([c + far + normal, c - far + normal, c - far - normal, c + far - normal])
        c = hull.mean(axis=0)
        polys.append(c + inflate * (hull - c))
    return polys


def _head(points: np.ndarray, h: HierarchySpec, scale: float) -> tuple[np.ndarray, float]:
    top = points[np.argsort(points[:, 1])[:2]].mean(axis=0)
    r = 0.09 * scale
    return top - np.array([0.0, 1.3 * r]), r


def _draw_person(draw: ImageDraw.ImageDraw, points: np.ndarray, h: HierarchySpec, scale: float, rng, px: float) -> None:
    def to_px(p):
        return [tuple(q) for q in (np.asarray(p) * px - 0.5)]

    skin = tuple(int(v) for v in rng.integers(120, 256, 3))
    c, r = _head(points, h, scale)
    draw.ellipse([*(c - r) * px - 0.5, *(c + r) * px - 0.5], fill=skin)
    for poly in garment_polygons(points, h):
        colour = tuple(int(v) for v in rng.integers(0, 256, 3))
        edge = tuple(max(0, v - 90) for v in colour)
        draw.polygon(to_px(poly), fill=colour, outline=edge, width=max(1, int(px / 64)))


def render_image(scene: SceneAnnotation, spec: SynthSpec, hierarchy: HierarchySpec | None = None) -> np.ndarray:
    """H×W×3 float image in [0, 1] (8-bit quantized), deterministic for the scene."""
    h = hierarchy or get_hierarchy(spec.hierarchy)
    rng = np.random.default_rng(scene.render_seed)
    k = spec.supersample
    W, H = scene.width * k, scene.height * k
    bg = tuple(int(v) for v in rng.integers(0, 256, 3))
    img = Image.new("RGB", (W, H), bg)
    draw = ImageDraw.Draw(img)
    for _ in range(scene.tags.get("clutter_level", 0)):
        x0, y0 = rng.uniform(0, 1, 2)
        w, hh = rng.uniform(0.05, 0.3, 2)
        colour = tuple(int(v) for v in rng.integers(0, 256, 3))
        draw.rectangle([x0 * W, y0 * H, (x0 + w) * W, (y0 + hh) * H], fill=colour)
    if scene.distractor:
        dscale = scene.pose.get("scale", 1.0) * 0.45
        _draw_person(draw, np.asarray(scene.distractor), h, dscale, rng, W)
    pts = scene.coords()
    _draw_person(draw, pts, h, scene.pose.get("scale", 1.0), rng, W)
    if scene.tags.get("occluded"):
        target = pts[int(rng.integers(len(pts)))]
        half = rng.uniform(0.04, 0.08)
        colour = tuple(int(v) for v in rng.integers(0, 256, 3))
        draw.rectangle([(target[0] - half) * W, (target[1] - half) * H, (target[0] + half) * W, (target[1] + half) * H], fill=colour)
    if k > 1:
        img = img.resize((scene.width, scene.height), Image.BOX)
    return np.asarray(img, dtype=np.float64) / 255.0


def render_heatmaps(landmarks: list[Landmark], H: int, W: int, sigma_g: float = 1.0) -> np.ndarray:
    """Unit-peak Gaussians on an H×W grid, one channel per landmark; invisible -> zeros.

    Cell (u, v) has its centre at normalized ((u + 0.5)/W, (v + 0.5)/H).
    """
    if sigma_g <= 0:
        raise ValueError("sigma_g must be positive")
    out = np.zeros((H, W, len(landmarks)))
    u = np.arange(W)[None, :]
    v = np.arange(H)[:, None]
    for c, m in enumerate(landmarks):
        if not m.visible:
            continue
        u0, v0 = m.x * W - 0.5, m.y * H - 0.5
        out[:, :, c] = np.exp(-((u - u0) ** 2 + (v - v0) ** 2) / (2 * sigma_g**2))
    return out


# ----------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # N×H×W×3 float32 in [0, 1]
    annotations: list[SceneAnnotation]
    hierarchy: str

    def __len__(self) -> int:
        return len(self.annotations)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], [self.annotations[i] for i in idx], self.hierarchy)

    def where(self, pred) -> "Dataset":
        return self.subset(i for i, a in enumerate(self.annotations) if pred(a))


def to_float(pixels: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [0, 1]; the single conversion used everywhere."""
    return pixels.astype(np.float32) / np.float32(255)


def _rng_for(spec: SynthSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, SPLITS.index(split), index]))


def make_split(spec: SynthSpec, split: str, count: int | None = None) -> Dataset:
    """Generate one split in memory."""
    spec.validate()
    h = get_hierarchy(spec.hierarchy)
    count = getattr(spec, f"{split}_count") if count is None else count
    anns, imgs = [], []
    for i in range(count):
        ann = sample_scene(_rng_for(spec, split, i), spec, h, image_id=f"{split}_{i:06d}")
        anns.append(ann)
        imgs.append(render_image(ann, spec, h))
    shape = (count, spec.image_size, spec.image_size, 3)
    images = to_float(np.round(np.array(imgs).reshape(shape) * 255).astype(np.uint8))
    return Dataset(images, anns, spec.hierarchy)


def generate_dataset(spec: SynthSpec, out_dir: str | Path) -> dict[str, Dataset]:
    """Write PNG images, JSON-lines annotations and a manifest for every split."""
    out = Path(out_dir)
    splits = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            ds = make_split(spec, split)
            img_dir = out / split / "images"
            img_dir.mkdir(parents=True, exist_ok=True)
            with open(out / split / "annotations.jsonl", "w") as fh:
                for ann, img in zip(ds.annotations, ds.images):
                    fh.write(ann.to_json() + "\n")
                    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(img_dir / f"{ann.id}.png")
            splits[split] = ds
        manifest = {"format": FORMAT, "seed": spec.seed, "hierarchy": spec.hierarchy, "spec": asdict(spec)}
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise DataError(f"writing dataset under {out}: {exc}") from exc
    return splits


def read_annotations(path: str | Path) -> list[SceneAnnotation]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read annotations {path}: {exc}") from exc
    anns = []
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            anns.append(SceneAnnotation.from_record(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{i}: {exc}") from exc
    return anns


def load_dataset(root: str | Path, split: str, hierarchy: str | None = None) -> Dataset:
    """Load a split written by :func:`generate_dataset` (or any data in that format)."""
    root = Path(root)
    if hierarchy is None:
        try:
            hierarchy = json.loads((root / "manifest.json").read_text())["hierarchy"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"{root}: no usable manifest.json ({exc}); pass the hierarchy explicitly") from exc
    h = get_hierarchy(hierarchy)
    anns = read_annotations(root / split / "annotations.jsonl")
    imgs = []
    for ann in anns:
        validate_annotation(ann, h)
        p = root / split / "images" / f"{ann.id}.png"
        try:
            with Image.open(p) as im:
                arr = to_float(np.asarray(im.convert("RGB")))
        except OSError as exc:
            raise DataError(f"cannot read image {p}: {exc}") from exc
        if arr.shape[:2] != (ann.height, ann.width):
            raise DataError(f"{p}: image is {arr.shape[1]}×{arr.shape[0]}, annotation says {ann.width}×{ann.height}")
        imgs.append(arr)
    images = np.array(imgs, dtype=np.float32).reshape(len(anns), *(imgs[0].shape if imgs else (0, 0, 3)))
    return Dataset(images, anns, hierarchy)
