"""Shared convolutional feature extractor for target images and templates.

Three blocks of [conv3x3 stride 2 -> relu -> conv3x3 stride 1 -> relu] with
widths (32, 48, d), total stride 8. The same weights encode full scenes and
template crops, so template features live in the same space as image tokens.
"""

from dataclasses import dataclass

import numpy as np

from . import ndgrad
from .errors import ConfigError
from .ndgrad import Tensor

TOTAL_STRIDE = 8
_STRIDES = (2, 1, 2, 1, 2, 1)


@dataclass
class FeatureMap:
    """Spatial tokens in row-major grid order: S = height * width rows."""
    tokens: Tensor
    height: int
    width: int


def init_params(rng, d: int, widths=(32, 48), in_channels: int = 3, dtype=np.float32) -> dict:
    """He-uniform conv weights (keeps activation scale through the relu stack)."""
    chans = [in_channels, widths[0], widths[0], widths[1], widths[1], d, d]
    params = {}
    for i in range(6):
        cin, cout = chans[i], chans[i + 1]
        bound = np.sqrt(6.0 / (cin * 9))
        w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(dtype)
        params[f"conv{i + 1}/w"] = Tensor(w, requires_grad=True)
        params[f"conv{i + 1}/b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return params


def _run_stack(params: dict, x: Tensor) -> Tensor:
    for i, stride in enumerate(_STRIDES):
        x = ndgrad.conv2d(x, params[f"conv{i + 1}/w"], params[f"conv{i + 1}/b"],
                          stride=stride, padding=1)
        x = ndgrad.relu(x)
    return x


def _as_input(params: dict, image) -> Tensor:
    if isinstance(image, Tensor):
        return image
    dtype = params["conv1/w"].dtype
    return Tensor(np.asarray(image, dtype=dtype))


def encode_image(params: dict, image) -> FeatureMap:
    """Encode a (C,H,W) image into an (S,d) token grid, S = (H/8)*(W/8)."""
    x = _as_input(params, image)
    _, h, w = x.shape
    if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
        raise ConfigError(f"image size {h}x{w} not divisible by total stride {TOTAL_STRIDE}")
    feat = _run_stack(params, x)
    d, fh, fw = feat.shape
    tokens = ndgrad.reshape(ndgrad.transpose(feat, (1, 2, 0)), (fh * fw, d))
    return FeatureMap(tokens=tokens, height=fh, width=fw)


def encode_patch(params: dict, patch) -> Tensor:
    """Encode one (C,P,P) template crop into its (s,d) spatial tokens."""
    fm = encode_image(params, patch)
    return fm.tokens


def encode_patch_batch(params: dict, patches) -> Tensor:
    """Encode (B,C,P,P) crops into (B,s,d) tokens in one batched pass."""
    x = _as_input(params, patches)
    _, _, h, w = x.shape
    if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
        raise ConfigError(f"patch size {h}x{w} not divisible by total stride {TOTAL_STRIDE}")
    feat = _run_stack(params, x)
    b, d, fh, fw = feat.shape
    return ndgrad.reshape(ndgrad.transpose(feat, (0, 2, 3, 1)), (b, fh * fw, d))
