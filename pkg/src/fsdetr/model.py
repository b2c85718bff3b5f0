"""Template-conditioned detection transformer.

Encoder layers interleave self-attention over image tokens with
cross-attention INTO the stamped template prompts, so template-relevant
regions are highlighted before decoding. The decoder runs over the prompts
prepended to N learned object queries; prompts also act as the queries'
positional content (added to attention queries/keys, never to values). Only
the N query rows reach the prediction heads: a class head over the full
pseudo-class bank (gathered down to the episode's m ids plus no-object) and
a sigmoid-bounded box head.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import backbone, ndgrad, prompts, rng as rngmod
from .errors import ConfigError
from .ndgrad import Tensor


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    n_queries: int = 25
    use_encoder_mhca: bool = True
    use_ts_mlp: bool = True
    dropout_p: float = 0.1
    bank_size: int = 16
    pooling: str = "attention"
    ffn_dim: int = 128
    head_hidden: int = 64
    patch_size: int = 32
    backbone_widths: tuple = (32, 48)
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if self.d % self.n_heads:
            raise ConfigError(f"width {self.d} not divisible by {self.n_heads} heads")
        if self.d % 4:
            raise ConfigError(f"width {self.d} must be divisible by 4 for 2-d positions")
        if self.n_queries < 1:
            raise ConfigError("need at least one object query")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.pooling not in ("global_avg", "attention"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.bank_size < 1:
            raise ConfigError("bank_size must be positive")
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class DetectionSet:
    """N decoded predictions; probability column m is the no-object class."""
    probs: Tensor
    boxes: Tensor
    logits: Tensor
    attn_maps: list | None = None


_POS_CACHE: dict = {}


def sinusoidal_positions(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-d sine/cosine grid encoding: half the channels per axis.

    One full period of the slowest frequency spans the grid; values in [-1,1].
    Channel layout per axis: [sin f0, cos f0, sin f1, cos f1, ...].
    """
    if d % 4:
        raise ConfigError(f"positional encoding needs d divisible by 4, got {d}")
    key = (h, w, d)
    if key in _POS_CACHE:
        return _POS_CACHE[key]
    n_freq = d // 4
    omega = 1.0 / (100.0 ** (np.arange(n_freq) / n_freq))

    def axis_encoding(n):
        theta = np.arange(n)[:, None] / max(n, 1) * 2 * np.pi * omega[None, :]
        enc = np.zeros((n, 2 * n_freq))
        enc[:, 0::2] = np.sin(theta)
        enc[:, 1::2] = np.cos(theta)
        return enc

    rows = axis_encoding(h)
    cols = axis_encoding(w)
    grid = np.concatenate([
        np.repeat(rows, w, axis=0),
        np.tile(cols, (h, 1)),
    ], axis=1)
    _POS_CACHE[key] = grid
    return grid


def _xavier(rng, shape, dtype):
    fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _init_attn(params, prefix, rng, d, dtype):
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}/{name}"] = Tensor(_xavier(rng, (d, d), dtype), requires_grad=True)
    for name in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}/{name}"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)


def _init_ln(params, prefix, d, dtype):
    params[f"{prefix}/g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
    params[f"{prefix}/b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)


def _init_mlp(params, prefix, rng, dims, dtype):
    for i, (cin, cout) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"{prefix}/w{i + 1}"] = Tensor(_xavier(rng, (cin, cout), dtype), requires_grad=True)
        params[f"{prefix}/b{i + 1}"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


class FSDetr:
    """The few-shot detector: parameters plus forward/ prompt-encoding logic."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg.validate()
        self.params = params
        self._backbone_view = {k.split("/", 1)[1]: v for k, v in params.items()
                               if k.startswith("backbone/")}
        self._pool_view = {"pool/query": params["pool/query"]} if "pool/query" in params else {}
        self.bank = prompts.PseudoClassBank(embeddings=params["bank/emb"])

    # -- construction --------------------------------------------------------

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "FSDetr":
        cfg = cfg.validate()
        dtype = cfg.np_dtype
        d = cfg.d
        params: dict = {}
        for k, v in backbone.init_params(rngmod.stream(seed, "init", "backbone"),
                                         d, cfg.backbone_widths, dtype=dtype).items():
            params[f"backbone/{k}"] = v
        params["bank/emb"] = Tensor(
            rngmod.stream(seed, "init", "bank").standard_normal((cfg.bank_size, d)).astype(dtype),
            requires_grad=True)
        params["queries"] = Tensor(
            rngmod.stream(seed, "init", "queries").standard_normal((cfg.n_queries, d)).astype(dtype),
            requires_grad=True)
        params["pool/query"] = Tensor(
            rngmod.stream(seed, "init", "pool").standard_normal(d).astype(dtype),
            requires_grad=True)
        # interface norm: the raw conv stack outputs small activations, and
        # positional encodings / pseudo-class embeddings are O(1) per channel;
        # normalizing backbone features keeps content and additive codes balanced
        _init_ln(params, "featnorm", d, dtype)
        for layer in range(cfg.n_enc_layers):
            r = rngmod.stream(seed, "init", "enc", layer)
            p = f"enc{layer}"
            _init_ln(params, f"{p}/ln1", d, dtype)
            _init_attn(params, f"{p}/sa", r, d, dtype)
            if cfg.use_encoder_mhca:
                _init_ln(params, f"{p}/ln2", d, dtype)
                _init_attn(params, f"{p}/ca", r, d, dtype)
            _init_ln(params, f"{p}/ln3", d, dtype)
            _init_mlp(params, f"{p}/mlp", r, (d, cfg.ffn_dim, d), dtype)
        for layer in range(cfg.n_dec_layers):
            r = rngmod.stream(seed, "init", "dec", layer)
            p = f"dec{layer}"
            _init_ln(params, f"{p}/ln1", d, dtype)
            _init_attn(params, f"{p}/sa", r, d, dtype)
            _init_ln(params, f"{p}/ln2", d, dtype)
            _init_attn(params, f"{p}/ca", r, d, dtype)
            _init_ln(params, f"{p}/ln3", d, dtype)
            _init_mlp(params, f"{p}/mlp_q", r, (d, cfg.ffn_dim, d), dtype)
            if cfg.use_ts_mlp:
                _init_mlp(params, f"{p}/mlp_t", r, (d, cfg.ffn_dim, d), dtype)
        rh = rngmod.stream(seed, "init", "heads")
        _init_mlp(params, "head_cls", rh, (d, cfg.head_hidden, cfg.head_hidden, cfg.bank_size + 1), dtype)
        _init_mlp(params, "head_box", rh, (d, cfg.head_hidden, cfg.head_hidden, 4), dtype)
        return cls(cfg, params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}

    # -- building blocks -----------------------------------------------------

    def _attn_group(self, prefix):
        p = self.params
        return {k: p[f"{prefix}/{k}"] for k in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}

    def _ln(self, prefix, x):
        return ndgrad.layer_norm(x, self.params[f"{prefix}/g"], self.params[f"{prefix}/b"])

    def _mlp2(self, prefix, x):
        p = self.params
        h = ndgrad.relu(ndgrad.add(ndgrad.matmul(x, p[f"{prefix}/w1"]), p[f"{prefix}/b1"]))
        return ndgrad.add(ndgrad.matmul(h, p[f"{prefix}/w2"]), p[f"{prefix}/b2"])

    def _head(self, prefix, x):
        p = self.params
        h = ndgrad.relu(ndgrad.add(ndgrad.matmul(x, p[f"{prefix}/w1"]), p[f"{prefix}/b1"]))
        h = ndgrad.relu(ndgrad.add(ndgrad.matmul(h, p[f"{prefix}/w2"]), p[f"{prefix}/b2"]))
        return ndgrad.add(ndgrad.matmul(h, p[f"{prefix}/w3"]), p[f"{prefix}/b3"])

    def encoder_layer(self, layer: int, z: Tensor, xs: Tensor, drop):
        """One encoder block; returns (tokens, template cross-attention or None)."""
        p = f"enc{layer}"
        a, _ = ndgrad.multi_head_attention(*( [self._ln(f"{p}/ln1", z)] * 3 ),
                                           weights=self._attn_group(f"{p}/sa"),
                                           n_heads=self.cfg.n_heads)
        z = ndgrad.add(drop(a), z)
        attn = None
        if self.cfg.use_encoder_mhca:
            h = self._ln(f"{p}/ln2", z)
            a, attn = ndgrad.multi_head_attention(h, xs, xs,
                                                  weights=self._attn_group(f"{p}/ca"),
                                                  n_heads=self.cfg.n_heads)
            z = ndgrad.add(drop(a), z)
        f = self._mlp2(f"{p}/mlp", self._ln(f"{p}/ln3", z))
        z = ndgrad.add(drop(f), z)
        return z, attn

    def decoder_layer(self, layer: int, v: Tensor, o_prime: Tensor, z_enc: Tensor,
                      mk: int, drop) -> Tensor:
        """One decoder block: prompts+queries as positional content, TS-MLP tail."""
        p = f"dec{layer}"
        h = self._ln(f"{p}/ln1", v)
        hq = ndgrad.add(h, o_prime)
        a, _ = ndgrad.multi_head_attention(hq, hq, h,
                                           weights=self._attn_group(f"{p}/sa"),
                                           n_heads=self.cfg.n_heads)
        v = ndgrad.add(drop(a), v)
        h = self._ln(f"{p}/ln2", v)
        a, _ = ndgrad.multi_head_attention(ndgrad.add(h, o_prime), z_enc, z_enc,
                                           weights=self._attn_group(f"{p}/ca"),
                                           n_heads=self.cfg.n_heads)
        v = ndgrad.add(drop(a), v)
        h = self._ln(f"{p}/ln3", v)
        if self.cfg.use_ts_mlp:
            ft = self._mlp2(f"{p}/mlp_t", ndgrad.slice_rows(h, 0, mk))
            fq = self._mlp2(f"{p}/mlp_q", ndgrad.slice_rows(h, mk, h.shape[0]))
            f = ndgrad.concat([ft, fq], axis=0)
        else:
            f = self._mlp2(f"{p}/mlp_q", h)
        return ndgrad.add(drop(f), v)

    # -- prompt encoding -----------------------------------------------------

    def encode_prompts(self, templates_by_class: list, assignment,
                       training: bool = False, rng=None) -> prompts.PromptSet:
        """Encode m x k templates and stamp them with their pseudo-classes.

        Training mode augments each template first (consuming `rng`).
        """
        flat, class_of_row = [], []
        for ci, row in enumerate(templates_by_class):
            for t in row:
                flat.append(prompts.augment_template(t, rng) if training else t)
                class_of_row.append(ci)
        dtype = self.cfg.np_dtype
        stacked = Tensor(np.stack([t.pixels for t in flat]).astype(dtype))
        tokens = backbone.encode_patch_batch(self._backbone_view, stacked)
        tokens = self._ln("featnorm", tokens)
        x = prompts.pool_tokens(tokens, self.cfg.pooling, self._pool_view)
        return prompts.stamp(x, class_of_row, assignment, self.bank)

    # -- full forward --------------------------------------------------------

    def forward(self, image, prompt_set: prompts.PromptSet, training: bool = False,
                rng=None, want_attn: bool = False) -> DetectionSet:
        cfg = self.cfg
        if prompt_set.m < 1:
            raise ConfigError("forward needs at least one prompt class")
        if prompt_set.m > cfg.bank_size:
            raise ConfigError(f"{prompt_set.m} classes exceed bank size {cfg.bank_size}")
        if training and cfg.dropout_p > 0 and rng is None:
            raise ConfigError("training forward with dropout needs an rng")

        def drop(t):
            return ndgrad.path_drop(t, cfg.dropout_p, training, rng)

        fm = backbone.encode_image(self._backbone_view, image)
        pos_key = (fm.height, fm.width, cfg.d, cfg.dtype)
        if pos_key not in _POS_CACHE:
            _POS_CACHE[pos_key] = sinusoidal_positions(fm.height, fm.width, cfg.d).astype(cfg.np_dtype)
        z = ndgrad.add(self._ln("featnorm", fm.tokens), Tensor(_POS_CACHE[pos_key]))
        xs = prompt_set.stamped
        attn_maps = [] if want_attn else None
        for layer in range(cfg.n_enc_layers):
            z, attn = self.encoder_layer(layer, z, xs, drop)
            if want_attn and attn is not None:
                attn_maps.append(attn.data.copy())

        mk = xs.shape[0]
        o_prime = ndgrad.concat([xs, self.params["queries"]], axis=0)
        v = ndgrad.concat([xs, Tensor(np.zeros((cfg.n_queries, cfg.d), dtype=cfg.np_dtype))], axis=0)
        for layer in range(cfg.n_dec_layers):
            v = self.decoder_layer(layer, v, o_prime, z, mk, drop)
        vq = ndgrad.slice_rows(v, mk, mk + cfg.n_queries)

        gather = np.append(prompt_set.assignment, cfg.bank_size)
        logits = ndgrad.take_cols(self._head("head_cls", vq), gather)
        probs = ndgrad.softmax(logits, axis=-1)
        boxes = ndgrad.sigmoid(self._head("head_box", vq))
        return DetectionSet(probs=probs, boxes=boxes, logits=logits, attn_maps=attn_maps)


def config_with_overrides(cfg: ModelConfig, **kwargs) -> ModelConfig:
    return replace(cfg, **kwargs).validate()
