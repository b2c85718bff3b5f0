"""Template handling: cropping, augmentation, pooled encoding, stamping.

A template is a tight crop of one object instance, resized to a small fixed
resolution. Encoded templates are pooled to one vector each, then "stamped"
by adding a pseudo-class embedding drawn fresh from a class-agnostic bank:
the model is trained to predict the stamp index, never the real class, which
is what lets it detect classes it has never seen.
"""

from dataclasses import dataclass

import numpy as np

from . import backbone, ndgrad
from .errors import ConfigError, InvalidBoxError
from .ndgrad import Tensor

DEFAULT_PATCH_SIZE = 32

COLOR_JITTER_P = 0.8
COLOR_JITTER_STRENGTH = 0.4
GRAYSCALE_P = 0.2
BLUR_P = 0.5


@dataclass
class TemplateImage:
    """One template crop; `source_class` is bookkeeping the model never sees."""
    pixels: np.ndarray
    source_class: int = -1


@dataclass
class PseudoClassBank:
    """Learned bank of pseudo-class embeddings, rows indexed by pseudo id."""
    embeddings: Tensor

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class PromptSet:
    """Stamped template features plus their pseudo/episode-class bookkeeping."""
    stamped: Tensor          # (m*k, d)
    pseudo_ids: np.ndarray   # (m*k,) bank index per row
    class_of_row: np.ndarray  # (m*k,) episode-class index per row
    assignment: np.ndarray   # (m,) bank index per episode class
    m: int
    k: int


def init_bank(rng, bank_size: int, d: int, dtype=np.float32) -> PseudoClassBank:
    emb = rng.standard_normal((bank_size, d)).astype(dtype)
    return PseudoClassBank(embeddings=Tensor(emb, requires_grad=True))


def init_pooling(rng, d: int, dtype=np.float32) -> dict:
    return {"pool/query": Tensor(rng.standard_normal(d).astype(dtype), requires_grad=True)}


def _bilinear_crop(image: np.ndarray, x1: float, y1: float, x2: float, y2: float, p: int) -> np.ndarray:
    """Resample the pixel-space rect [x1,x2) x [y1,y2) to a (C,p,p) patch."""
    _, h, w = image.shape
    sx = x1 + (np.arange(p) + 0.5) / p * (x2 - x1) - 0.5
    sy = y1 + (np.arange(p) + 0.5) / p * (y2 - y1) - 0.5
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1i = np.minimum(x0 + 1, w - 1)
    y1i = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[None, None, :]
    fy = (sy - y0)[None, :, None]
    tl = image[:, y0[:, None], x0[None, :]]
    tr = image[:, y0[:, None], x1i[None, :]]
    bl = image[:, y1i[:, None], x0[None, :]]
    br = image[:, y1i[:, None], x1i[None, :]]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def crop_template(image: np.ndarray, box_xyxy, rng=None, jitter: bool = False,
                  patch_size: int = DEFAULT_PATCH_SIZE, source_class: int = -1) -> TemplateImage:
    """Tight crop of a normalized corner box, resized to patch_size square.

    With jitter=True each corner moves by up to 10% of the box size before
    cropping (ablation knob; defaults off because it hurts accuracy).
    """
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    x1, y1, x2, y2 = (float(v) for v in box_xyxy)
    bw, bh = x2 - x1, y2 - y1
    if bw <= 0 or bh <= 0:
        raise InvalidBoxError(f"degenerate template box: {box_xyxy}")
    if x1 < -1e-9 or y1 < -1e-9 or x2 > 1 + 1e-9 or y2 > 1 + 1e-9:
        raise InvalidBoxError(f"template box outside image bounds: {box_xyxy}")
    if jitter:
        if rng is None:
            raise ConfigError("jitter=True requires an rng")
        x1 = x1 + rng.uniform(-0.1, 0.1) * bw
        x2 = x2 + rng.uniform(-0.1, 0.1) * bw
        y1 = y1 + rng.uniform(-0.1, 0.1) * bh
        y2 = y2 + rng.uniform(-0.1, 0.1) * bh
        x1, x2 = np.clip((x1, x2), 0.0, 1.0)
        y1, y2 = np.clip((y1, y2), 0.0, 1.0)
        if x2 - x1 <= 1e-6 or y2 - y1 <= 1e-6:
            raise InvalidBoxError("jitter collapsed the box")
    patch = _bilinear_crop(image, x1 * w, y1 * h, x2 * w, y2 * h, patch_size)
    return TemplateImage(pixels=np.clip(patch, 0.0, 1.0), source_class=source_class)


def _luma(x: np.ndarray) -> np.ndarray:
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]


def _box_blur3(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy:dy + x.shape[1], dx:dx + x.shape[2]]
    return out / 9.0


def augment_template(t: TemplateImage, rng) -> TemplateImage:
    """Training-time photometric augmentation.

    Color jitter (brightness/contrast/saturation, prob 0.8, strength 0.4),
    random grayscale (prob 0.2), 3x3 box blur (prob 0.5). Draw order is
    fixed so a given rng state reproduces the same augmentation.
    """
    x = t.pixels.astype(np.float64, copy=True)
    if rng.random() < COLOR_JITTER_P:
        s = COLOR_JITTER_STRENGTH
        brightness = 1.0 + rng.uniform(-s, s)
        contrast = 1.0 + rng.uniform(-s, s)
        saturation = 1.0 + rng.uniform(-s, s)
        x = x * brightness
        mean = x.mean()
        x = (x - mean) * contrast + mean
        gray = _luma(x)[None]
        x = gray + (x - gray) * saturation
    if rng.random() < GRAYSCALE_P:
        x = np.repeat(_luma(x)[None], 3, axis=0)
    if rng.random() < BLUR_P:
        x = _box_blur3(x)
    return TemplateImage(pixels=np.clip(x, 0.0, 1.0), source_class=t.source_class)


def pool_tokens(tokens: Tensor, pooling: str, pooling_params: dict | None = None) -> Tensor:
    """Pool (B,s,d) spatial tokens to (B,d).

    "global_avg" averages the s tokens; "attention" softmax-weights them by
    similarity to a learned query vector (uniform, hence equal to the
    average, when all tokens are identical).
    """
    b, s, d = tokens.shape
    if pooling == "global_avg":
        return ndgrad.tmean(tokens, axis=1)
    if pooling == "attention":
        q = ndgrad.reshape(pooling_params["pool/query"], (d, 1))
        scores = ndgrad.reshape(ndgrad.matmul(ndgrad.reshape(tokens, (b * s, d)), q), (b, s))
        attn = ndgrad.softmax(ndgrad.scale(scores, 1.0 / np.sqrt(d)), axis=-1)
        pooled = ndgrad.matmul(ndgrad.reshape(attn, (b, 1, s)), tokens)
        return ndgrad.reshape(pooled, (b, d))
    raise ConfigError(f"unknown pooling mode: {pooling!r}")


def encode_templates(backbone_params: dict, pooling_params: dict,
                     templates: list, pooling: str = "attention") -> Tensor:
    """Encode templates to one d-vector each: backbone tokens, then pooling."""
    if not templates:
        raise ValueError("encode_templates requires at least one template")
    dtype = backbone_params["conv1/w"].dtype
    stackarr = np.stack([t.pixels for t in templates]).astype(dtype)
    tokens = backbone.encode_patch_batch(backbone_params, Tensor(stackarr))
    return pool_tokens(tokens, pooling, pooling_params)


def assign_pseudo_classes(m: int, bank: PseudoClassBank, rng) -> np.ndarray:
    """Sample m distinct pseudo ids uniformly without replacement."""
    if m > bank.size:
        raise ConfigError(f"episode needs {m} pseudo classes but bank holds {bank.size}")
    return rng.choice(bank.size, size=m, replace=False)


def stamp(x: Tensor, class_of_row, assignment, bank: PseudoClassBank) -> PromptSet:
    """Add each row's pseudo-class embedding: stamped[j] = x[j] + bank[assignment[class_of_row[j]]]."""
    class_of_row = np.asarray(class_of_row, dtype=np.intp)
    assignment = np.asarray(assignment, dtype=np.intp)
    m = len(assignment)
    if len(np.unique(assignment)) != m:
        raise ValueError("pseudo-class assignment must be distinct per episode class")
    if m and (assignment.min() < 0 or assignment.max() >= bank.size):
        raise ConfigError(f"pseudo id outside bank of size {bank.size}")
    if class_of_row.shape != (x.shape[0],):
        raise ValueError(f"every row needs an episode-class label: {class_of_row.shape} vs {x.shape[0]} rows")
    if class_of_row.min(initial=0) < 0 or class_of_row.max(initial=0) >= m:
        raise ValueError(f"episode-class label outside [0, {m})")
    counts = np.bincount(class_of_row, minlength=m)
    if len(set(counts.tolist())) != 1:
        raise ValueError(f"unequal shots per class: {counts}")
    pseudo_ids = assignment[class_of_row]
    emb = ndgrad.take_rows(bank.embeddings, pseudo_ids)
    stamped = ndgrad.add(x, emb)
    return PromptSet(stamped=stamped, pseudo_ids=pseudo_ids, class_of_row=class_of_row,
                     assignment=assignment, m=m, k=int(counts[0]))
