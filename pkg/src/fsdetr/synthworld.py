"""Deterministic synthetic detection world: shapes on noisy backgrounds.

36 classes = 6 shape kinds x 6 colors, so a class is defined by BOTH shape
and color and templates carry real appearance information. Scenes are
anti-aliased renders with exact bounding boxes; generation, episode
sampling, and proposal sampling are all pure functions of their rng stream.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .errors import SamplingError
from .matching import Box, cxcywh_to_xyxy, iou_matrix
from .prompts import TemplateImage, crop_template

SHAPE_KINDS = ("circle", "square", "triangle", "cross", "ring", "diamond")

PALETTE = (
    ("red", (0.85, 0.10, 0.10)),
    ("green", (0.10, 0.75, 0.15)),
    ("blue", (0.15, 0.30, 0.90)),
    ("yellow", (0.90, 0.85, 0.10)),
    ("magenta", (0.85, 0.15, 0.80)),
    ("cyan", (0.10, 0.80, 0.85)),
)

N_CLASSES = len(SHAPE_KINDS) * len(PALETTE)

# Novel split: unseen shape-color combinations spanning every shape kind and
# every color (diagonal plus two off-diagonal extras); base keeps all kinds
# and colors in other pairings. 28 base / 8 novel.
DEFAULT_NOVEL_CLASSES = tuple(sorted(
    [kind * 6 + kind for kind in range(6)] + [0 * 6 + 3, 3 * 6 + 0]))
DEFAULT_BASE_CLASSES = tuple(c for c in range(N_CLASSES) if c not in DEFAULT_NOVEL_CLASSES)

IMAGE_SIZE = 96
MIN_OBJECT_PX = 12
MAX_OBJECT_PX = 40
MAX_PAIRWISE_IOU = 0.3
SUPERSAMPLE = 4


def class_name(class_id: int) -> str:
    return f"{PALETTE[class_id % 6][0]}-{SHAPE_KINDS[class_id // 6]}"


@dataclass
class Annotation:
    class_id: int
    box: Box


@dataclass
class Scene:
    image: np.ndarray                 # (3,S,S) float32 in [0,1]
    annotations: list
    seed: int = -1


@dataclass
class Episode:
    """One target scene, its per-class template stacks, and ground truth."""
    scene: Scene
    class_ids: list                   # m real class ids (bookkeeping/firewall)
    templates: list                   # m lists of k TemplateImage
    targets: list                     # (episode-class index, Box) pairs

    @property
    def m(self) -> int:
        return len(self.class_ids)

    @property
    def k(self) -> int:
        return len(self.templates[0])


@dataclass
class SceneDataset:
    scenes: list
    class_ids: list
    image_size: int = IMAGE_SIZE
    _index: dict = field(default_factory=dict, repr=False)

    def instances_of(self, class_id: int) -> list:
        if not self._index:
            for si, scene in enumerate(self.scenes):
                for ai, ann in enumerate(scene.annotations):
                    self._index.setdefault(ann.class_id, []).append((si, ai))
        return self._index.get(class_id, [])


def _coverage(kind: str, size: float, cx: float, cy: float, xs, ys) -> np.ndarray:
    """Subpixel membership mask for a shape spanning the (size x size) box."""
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    r = size / 2.0
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "cross":
        bar = 0.30 * r
        return ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | ((np.abs(dy) <= bar) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape kind: {kind}")


def _render_shape(image: np.ndarray, class_id: int, cx: float, cy: float, size: float):
    """Alpha-composite one anti-aliased shape onto the image in place."""
    s = image.shape[1]
    color = np.array(PALETTE[class_id % 6][1])
    kind = SHAPE_KINDS[class_id // 6]
    x0 = max(int(np.floor(cx - size / 2)), 0)
    y0 = max(int(np.floor(cy - size / 2)), 0)
    x1 = min(int(np.ceil(cx + size / 2)), s)
    y1 = min(int(np.ceil(cy + size / 2)), s)
    f = SUPERSAMPLE
    sub = (np.arange(f) + 0.5) / f
    xs = (x0 + (np.arange(x1 - x0)[:, None] + sub[None, :])).reshape(-1)
    ys = (y0 + (np.arange(y1 - y0)[:, None] + sub[None, :])).reshape(-1)
    mask = _coverage(kind, size, cx, cy, xs, ys)
    alpha = mask.reshape(y1 - y0, f, x1 - x0, f).mean(axis=(1, 3))
    region = image[:, y0:y1, x0:x1]
    image[:, y0:y1, x0:x1] = region * (1 - alpha) + color[:, None, None] * alpha


def _background(rng, s: int) -> np.ndarray:
    """Smooth gray blobs plus mild per-pixel noise; keeps color discriminative."""
    coarse = rng.uniform(0.25, 0.55, size=(6, 6))
    axis = (np.arange(s) + 0.5) / s * 5.0
    i0 = np.clip(np.floor(axis).astype(int), 0, 4)
    frac = axis - i0
    rows = coarse[i0][:, i0] * (1 - frac[None, :]) * (1 - frac[:, None]) \
        + coarse[i0][:, i0 + 1] * frac[None, :] * (1 - frac[:, None]) \
        + coarse[i0 + 1][:, i0] * (1 - frac[None, :]) * frac[:, None] \
        + coarse[i0 + 1][:, i0 + 1] * frac[None, :] * frac[:, None]
    noise = rng.uniform(-0.04, 0.04, size=(3, s, s))
    return np.clip(rows[None] + noise, 0.0, 1.0)


def generate_scene(rng, class_pool, image_size: int = IMAGE_SIZE,
                   max_objects: int = 5, seed_label: int = -1) -> Scene:
    """Render 1-5 shapes with pairwise box IoU < 0.3; exact boxes recorded.

    Placement failures after 100 attempts drop the object rather than error.
    """
    class_pool = list(class_pool)
    if not class_pool:
        raise SamplingError("empty class pool")
    image = _background(rng, image_size)
    n_objects = int(rng.integers(1, max_objects + 1))
    annotations = []
    placed_xyxy = []
    for _ in range(n_objects):
        class_id = int(class_pool[rng.integers(len(class_pool))])
        for _attempt in range(100):
            size = float(rng.uniform(MIN_OBJECT_PX, MAX_OBJECT_PX))
            cx = float(rng.uniform(size / 2, image_size - size / 2))
            cy = float(rng.uniform(size / 2, image_size - size / 2))
            box = Box(cx / image_size, cy / image_size, size / image_size, size / image_size)
            xyxy = cxcywh_to_xyxy(box)[None]
            if placed_xyxy and iou_matrix(xyxy, np.array(placed_xyxy)).max() >= MAX_PAIRWISE_IOU:
                continue
            _render_shape(image, class_id, cx, cy, size)
            annotations.append(Annotation(class_id=class_id, box=box))
            placed_xyxy.append(xyxy[0])
            break
    return Scene(image=image.astype(np.float32), annotations=annotations, seed=seed_label)


def generate_dataset(rng_factory, n_scenes: int, class_pool, image_size: int = IMAGE_SIZE) -> SceneDataset:
    """Generate scenes from per-index rng streams: rng_factory(i) -> Generator."""
    scenes = [generate_scene(rng_factory(i), class_pool, image_size, seed_label=i)
              for i in range(n_scenes)]
    return SceneDataset(scenes=scenes, class_ids=sorted(int(c) for c in class_pool),
                        image_size=image_size)


def sample_episode(dataset: SceneDataset, m: int, k: int, rng,
                   include_absent: bool = True, patch_size: int = 32,
                   jitter: bool = False, present_bias: float = 0.5) -> Episode:
    """Sample one episode: a target scene, m classes, k donor templates each.

    Templates always come from scenes other than the target. With
    include_absent=True, classes beyond the first (always present) are drawn
    from the whole pool, so some episode classes may have no ground truth in
    the target; with include_absent=False all m classes are present.
    """
    if m < 1 or k < 1:
        raise SamplingError(f"need m >= 1 and k >= 1, got m={m}, k={k}")
    eligible = [c for c in dataset.class_ids if len(dataset.instances_of(c)) >= k + 1]
    if len(eligible) < m:
        raise SamplingError(f"only {len(eligible)} classes have enough instances for k={k}")
    eligible_set = set(eligible)

    target_idx = None
    for _ in range(200):
        cand = int(rng.integers(len(dataset.scenes)))
        present = [c for c in sorted({a.class_id for a in dataset.scenes[cand].annotations})
                   if c in eligible_set]
        need = 1 if include_absent else m
        if len(present) >= need:
            target_idx = cand
            break
    if target_idx is None:
        raise SamplingError(f"no scene offers {'1' if include_absent else m} eligible present classes")
    scene = dataset.scenes[target_idx]
    present = [c for c in sorted({a.class_id for a in scene.annotations}) if c in eligible_set]

    chosen = [present[int(rng.integers(len(present)))]]
    if include_absent:
        while len(chosen) < m:
            rest_present = [c for c in present if c not in chosen]
            rest_all = [c for c in eligible if c not in chosen]
            if rest_present and rng.random() < present_bias:
                pool = rest_present
            else:
                pool = rest_all
            chosen.append(pool[int(rng.integers(len(pool)))])
    else:
        rest = [c for c in present if c != chosen[0]]
        order = rng.permutation(len(rest))
        chosen.extend(rest[i] for i in order[: m - 1])
        if len(chosen) < m:
            raise SamplingError(f"target scene has only {len(present)} present classes, need {m}")

    templates = []
    for c in chosen:
        donors = [(si, ai) for si, ai in dataset.instances_of(c) if si != target_idx]
        if len(donors) < k:
            raise SamplingError(f"class {c} has {len(donors)} donor instances, need {k}")
        picks = rng.choice(len(donors), size=k, replace=False)
        row = []
        for p in picks:
            si, ai = donors[int(p)]
            donor = dataset.scenes[si]
            ann = donor.annotations[ai]
            row.append(crop_template(donor.image, cxcywh_to_xyxy(ann.box), rng=rng,
                                     jitter=jitter, patch_size=patch_size, source_class=c))
        templates.append(row)

    targets = [(chosen.index(a.class_id), a.box) for a in scene.annotations
               if a.class_id in chosen]
    return Episode(scene=scene, class_ids=chosen, templates=templates, targets=targets)


def propose_patches(scene: Scene, n: int, rng, mode: str = "random") -> list:
    """Object-proposal boxes with area between 1% and 40% of the image.

    Random mode samples area and aspect uniformly; grid mode tiles three
    fixed scales deterministically (seed-independent).
    """
    if n < 1:
        raise SamplingError(f"need n >= 1 proposals, got {n}")
    boxes = []
    if mode == "random":
        for _ in range(n):
            area = rng.uniform(0.01, 0.40)
            aspect = rng.uniform(0.5, 2.0)
            w = min(np.sqrt(area * aspect), 1.0)
            h = min(np.sqrt(area / aspect), 1.0)
            cx = rng.uniform(w / 2, 1 - w / 2)
            cy = rng.uniform(h / 2, 1 - h / 2)
            boxes.append(Box(float(cx), float(cy), float(w), float(h)))
        return boxes
    if mode == "grid":
        for s in (0.5, 0.3, 0.15):
            steps = int(np.floor(1.0 / s))
            for iy in range(steps):
                for ix in range(steps):
                    boxes.append(Box((ix + 0.5) / steps, (iy + 0.5) / steps, s, s))
        return [boxes[i % len(boxes)] for i in range(n)]
    raise ValueError(f"unknown proposal mode: {mode!r}")


# ---------------------------------------------------------------------------
# persistence: PPM images + one annotations.json per split

def save_split(directory, dataset: SceneDataset):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(dataset.scenes):
        name = f"scene_{i:05d}.ppm"
        netpbm.write_ppm(directory / name, scene.image)
        entries.append({
            "image": name,
            "objects": [{"class": int(a.class_id),
                         "box": [float(v) for v in a.box.to_array()]}
                        for a in scene.annotations],
        })
    with open(directory / "annotations.json", "w", encoding="utf-8") as f:
        json.dump(entries, f, indent=1)
        f.write("\n")


def save_dataset(root, splits: dict, manifest: dict):
    """Write split directories plus a root manifest recording the class split."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["splits"] = {
        name: {"scenes": len(ds.scenes), "classes": [int(c) for c in ds.class_ids]}
        for name, ds in splits.items()
    }
    for name, ds in splits.items():
        save_split(root / name, ds)
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def load_manifest(root) -> dict:
    with open(Path(root) / "manifest.json", encoding="utf-8") as f:
        return json.load(f)


def load_dataset_split(root, split: str) -> SceneDataset:
    manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise IOError(f"dataset at {root} has no split {split!r}")
    info = manifest["splits"][split]
    return load_split(Path(root) / split, class_ids=info["classes"],
                      image_size=manifest.get("image_size", IMAGE_SIZE))


def load_split(directory, class_ids=None, image_size: int = IMAGE_SIZE) -> SceneDataset:
    directory = Path(directory)
    with open(directory / "annotations.json", encoding="utf-8") as f:
        entries = json.load(f)
    scenes = []
    seen = set()
    for i, entry in enumerate(entries):
        image = netpbm.read_ppm(directory / entry["image"]).astype(np.float32)
        anns = [Annotation(class_id=int(o["class"]), box=Box(*o["box"])) for o in entry["objects"]]
        seen.update(a.class_id for a in anns)
        scenes.append(Scene(image=image, annotations=anns, seed=i))
    pool = sorted(seen) if class_ids is None else sorted(int(c) for c in class_ids)
    return SceneDataset(scenes=scenes, class_ids=pool, image_size=image_size)
