"""Two-stage optimization: label-free pre-training, then episodic training.

Pre-training samples patch proposals from the target scene itself, stamps
each with its own pseudo-class, and trains the detector to locate them (an
object/no-object regime realized through the same set-loss machinery with
one-instance pseudo-classes). Supervised training then runs base-class
episodes, with a pre-training step interleaved every Nth iteration to keep
the built-in proposal behavior from overfitting to base classes.

Everything is driven by named rng streams of (seed, phase, counters), so a
run is bit-reproducible and a resumed run is step-exact.
"""

import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ndgrad, rng as rngmod
from .errors import ConfigError, ContaminationError, NumericAbort
from .matching import cxcywh_to_xyxy, set_loss
from .model import FSDetr, ModelConfig
from .ndgrad import Tape, Tensor, backward, adamw_step, sgd_momentum_step
from .prompts import assign_pseudo_classes, crop_template
from .synthworld import propose_patches, sample_episode

CHECKPOINT_MAGIC = b"FSDT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    lr_decay_epoch: int = 13          # zero-based; epochs >= this run at lr/10
    batch_size: int = 4
    episodes_per_epoch: int = 500
    pretrain_steps: int = 2000
    pretrain_interleave_period: int = 8
    pretrain_proposals: int = 3
    proposal_mode: str = "random"
    optimizer: str = "sgd"            # "sgd" or "adamw"
    warmup_steps: int = 0             # linear lr ramp over the first N updates
    weight_decay: float = 0.0         # adamw only
    clip_norm: float = 0.5            # global gradient-norm clip; 0 disables
    backbone_lr_scale: float = 0.1    # conv grads are spatially accumulated, so
                                      # the backbone runs at a reduced rate
    lambda_cls: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    noobj_weight: float = 0.1
    m_min: int = 1
    m_max: int = 3
    k_min: int = 1
    k_max: int = 3
    include_absent: bool = True
    present_bias: float = 0.5
    jitter_templates: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.epochs < 0 or self.pretrain_steps < 0:
            raise ConfigError("epochs and pretrain_steps must be >= 0")
        if self.epochs > 0 and not 0 <= self.lr_decay_epoch < self.epochs:
            raise ConfigError(f"lr_decay_epoch {self.lr_decay_epoch} must lie in [0, epochs)")
        if self.batch_size < 1 or self.episodes_per_epoch < 1:
            raise ConfigError("batch_size and episodes_per_epoch must be >= 1")
        if self.pretrain_interleave_period < 1:
            raise ConfigError("pretrain_interleave_period must be >= 1")
        if not 1 <= self.m_min <= self.m_max or not 1 <= self.k_min <= self.k_max:
            raise ConfigError("need 1 <= m_min <= m_max and 1 <= k_min <= k_max")
        if self.pretrain_proposals < 1:
            raise ConfigError("pretrain_proposals must be >= 1")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_steps and weight_decay must be >= 0")
        return self


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict                       # name -> float32 ndarray
    opt_state: dict                    # name -> float32 ndarray (velocities)
    split: dict                        # {"base": [...], "novel": [...]}
    epoch: int = 0                     # completed supervised epochs
    pretrain_done: int = 0             # completed pre-training steps
    step: int = 0                      # total optimizer steps
    rng_state: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)


def _loss_lambdas(cfg: TrainConfig) -> dict:
    return dict(lam_cls=cfg.lambda_cls, lam_l1=cfg.lambda_l1,
                lam_giou=cfg.lambda_giou, noobj_weight=cfg.noobj_weight)


def _guard_forward(dets):
    if not (np.all(np.isfinite(dets.logits.data)) and np.all(np.isfinite(dets.boxes.data))):
        raise NumericAbort("model forward produced non-finite predictions")


def episode_loss(detector: FSDetr, episode, rng, cfg: TrainConfig):
    """Forward + set loss + backward for one episode; grads accumulate."""
    assignment = assign_pseudo_classes(episode.m, detector.bank, rng)
    with Tape():
        ps = detector.encode_prompts(episode.templates, assignment, training=True, rng=rng)
        dets = detector.forward(episode.scene.image, ps, training=True, rng=rng)
        _guard_forward(dets)
        targets = [(ci, box.to_array()) for ci, box in episode.targets]
        loss, terms = set_loss(dets, targets, return_terms=True, **_loss_lambdas(cfg))
    backward(loss)
    return float(loss.data), terms


def pretrain_loss(detector: FSDetr, scene, rng, cfg: TrainConfig):
    """Self-supervised proposal localization on one scene; grads accumulate."""
    boxes = propose_patches(scene, cfg.pretrain_proposals, rng, mode=cfg.proposal_mode)
    templates = [[crop_template(scene.image, cxcywh_to_xyxy(b), rng=rng,
                                patch_size=detector.cfg.patch_size)] for b in boxes]
    assignment = assign_pseudo_classes(len(boxes), detector.bank, rng)
    with Tape():
        ps = detector.encode_prompts(templates, assignment, training=True, rng=rng)
        dets = detector.forward(scene.image, ps, training=True, rng=rng)
        _guard_forward(dets)
        targets = [(i, b.to_array()) for i, b in enumerate(boxes)]
        loss, terms = set_loss(dets, targets, return_terms=True, **_loss_lambdas(cfg))
    backward(loss)
    return float(loss.data), terms


def _check_finite(value: float, where: str):
    if not np.isfinite(value):
        raise NumericAbort(f"non-finite loss at {where}")


def _step(detector: FSDetr, opt_state: dict, lr: float, cfg: TrainConfig,
          scale: float = 1.0):
    grads = detector.grads()
    if scale != 1.0:
        grads = {k: g * scale for k, g in grads.items()}
    if cfg.backbone_lr_scale != 1.0:
        grads = {k: (g * cfg.backbone_lr_scale if k.startswith("backbone/") else g)
                 for k, g in grads.items()}
    if cfg.clip_norm > 0:
        total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        if total > cfg.clip_norm:
            factor = cfg.clip_norm / total
            grads = {k: g * factor for k, g in grads.items()}
    if cfg.optimizer == "adamw":
        adamw_step(detector.params, grads, opt_state, lr=lr,
                   weight_decay=cfg.weight_decay)
    else:
        sgd_momentum_step(detector.params, grads, opt_state, lr=lr, momentum=cfg.momentum)
    detector.zero_grad()


def _warmed(lr: float, cfg: TrainConfig, global_step: int) -> float:
    if cfg.warmup_steps > 0 and global_step < cfg.warmup_steps:
        return lr * (global_step + 1) / cfg.warmup_steps
    return lr


def pretrain_step(detector: FSDetr, scene, rng, cfg: TrainConfig,
                  opt_state: dict, lr: float | None = None) -> float:
    """One pre-training optimizer update on one scene."""
    detector.zero_grad()
    value, _ = pretrain_loss(detector, scene, rng, cfg)
    _check_finite(value, "pretrain step")
    _step(detector, opt_state, lr if lr is not None else cfg.lr, cfg)
    return value


def train_step(detector: FSDetr, episode, rng, cfg: TrainConfig,
               opt_state: dict, split: dict, lr: float | None = None) -> float:
    """One supervised optimizer update on one episode (batch of one).

    Hard novel-class firewall: any novel id in the episode aborts the run.
    """
    _assert_clean(episode, split)
    detector.zero_grad()
    value, _ = episode_loss(detector, episode, rng, cfg)
    _check_finite(value, "train step")
    _step(detector, opt_state, lr if lr is not None else cfg.lr, cfg)
    return value


def _assert_clean(episode, split: dict):
    novel = set(split.get("novel", ()))
    leaked = novel.intersection(episode.class_ids)
    if leaked:
        raise ContaminationError(f"novel classes {sorted(leaked)} appeared in a supervised episode")


def _sample_train_episode(dataset, rng, cfg: TrainConfig, patch_size: int):
    m = int(rng.integers(cfg.m_min, cfg.m_max + 1))
    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    return sample_episode(dataset, m=m, k=k, rng=rng, include_absent=cfg.include_absent,
                          patch_size=patch_size, jitter=cfg.jitter_templates,
                          present_bias=cfg.present_bias)


def snapshot(detector: FSDetr, cfg: TrainConfig, opt_state: dict, split: dict,
             epoch: int, pretrain_done: int, step: int, metrics: list) -> Checkpoint:
    return Checkpoint(
        model_config=detector.cfg,
        train_config=cfg,
        params={k: np.asarray(p.data, dtype=np.float32).copy() for k, p in detector.params.items()},
        opt_state={k: np.asarray(v, dtype=np.float32).copy() for k, v in opt_state.items()},
        split={"base": sorted(int(c) for c in split["base"]),
               "novel": sorted(int(c) for c in split["novel"])},
        epoch=epoch, pretrain_done=pretrain_done, step=step,
        rng_state={"seed": cfg.seed, "epoch": epoch, "pretrain_step": pretrain_done},
        metrics=list(metrics),
    )


def fit(detector: FSDetr, datasets: dict, cfg: TrainConfig, split: dict,
        out_dir=None, resume: Checkpoint | None = None, log=None) -> Checkpoint:
    """Pre-training phase (if configured) then supervised epochs.

    `datasets` holds "train" (base classes) and optionally "pretrain" (used
    label-free; falls back to "train"). Emits a checkpoint and a JSONL
    metrics log under `out_dir` after every epoch; a non-finite loss raises
    NumericAbort with the last epoch checkpoint left on disk.
    """
    cfg = cfg.validate()
    train_ds = datasets["train"]
    pre_ds = datasets.get("pretrain", train_ds)
    opt_state: dict = {}
    metrics: list = []
    start_epoch = 0
    pretrain_start = 0
    step = 0
    if resume is not None:
        for name, arr in resume.opt_state.items():
            opt_state[name] = arr.astype(detector.cfg.np_dtype).copy()
        metrics = list(resume.metrics)
        start_epoch = resume.epoch
        pretrain_start = resume.pretrain_done
        step = resume.step

    def emit(ckpt, record=None):
        if out_dir is None:
            return
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.fsdt", ckpt)
        if record is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")

    # phase 1: label-free pre-training
    t0 = time.monotonic()
    pre_losses = []
    for s in range(pretrain_start, cfg.pretrain_steps):
        pick = rngmod.stream(cfg.seed, "pretrain-pick", s)
        scene = pre_ds.scenes[int(pick.integers(len(pre_ds.scenes)))]
        value = pretrain_step(detector, scene, rngmod.stream(cfg.seed, "pretrain", s),
                              cfg, opt_state, lr=_warmed(cfg.lr, cfg, step))
        pre_losses.append(value)
        step += 1
        if log and (s + 1) % 200 == 0:
            log(f"pretrain {s + 1}/{cfg.pretrain_steps} loss {np.mean(pre_losses[-200:]):.4f}")
    if cfg.pretrain_steps > pretrain_start:
        record = {"phase": "pretrain", "epoch": -1, "loss": float(np.mean(pre_losses)),
                  "lr": cfg.lr, "seconds": round(time.monotonic() - t0, 3)}
        metrics.append(record)
        emit(snapshot(detector, cfg, opt_state, split, start_epoch, cfg.pretrain_steps, step, metrics), record)

    # phase 2: supervised episodes with interleaved pre-training loss
    iters = cfg.episodes_per_epoch // cfg.batch_size
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr * (0.1 if epoch >= cfg.lr_decay_epoch else 1.0)
        t_epoch = time.monotonic()
        totals = {"total": [], "ce": [], "l1": [], "giou": []}
        for it in range(iters):
            detector.zero_grad()
            batch_vals = []
            for b in range(cfg.batch_size):
                r = rngmod.stream(cfg.seed, "train", epoch, it, b)
                episode = _sample_train_episode(train_ds, r, cfg, detector.cfg.patch_size)
                _assert_clean(episode, split)
                value, terms = episode_loss(detector, episode, r, cfg)
                _check_finite(value, f"epoch {epoch} iter {it}")
                batch_vals.append(value)
                totals["ce"].append(terms["ce"])
                totals["l1"].append(terms["l1"])
                totals["giou"].append(terms["giou"])
            totals["total"].extend(batch_vals)
            _step(detector, opt_state, _warmed(lr, cfg, step), cfg,
                  scale=1.0 / cfg.batch_size)
            step += 1
            if cfg.pretrain_steps > 0 and (it + 1) % cfg.pretrain_interleave_period == 0:
                pick = rngmod.stream(cfg.seed, "interleave-pick", epoch, it)
                scene = pre_ds.scenes[int(pick.integers(len(pre_ds.scenes)))]
                pretrain_step(detector, scene, rngmod.stream(cfg.seed, "interleave", epoch, it),
                              cfg, opt_state, lr=_warmed(lr, cfg, step))
                step += 1
        record = {"phase": "train", "epoch": epoch,
                  "loss": float(np.mean(totals["total"])),
                  "loss_ce": float(np.mean(totals["ce"])),
                  "loss_l1": float(np.mean(totals["l1"])),
                  "loss_giou": float(np.mean(totals["giou"])),
                  "lr": lr, "seconds": round(time.monotonic() - t_epoch, 3)}
        metrics.append(record)
        emit(snapshot(detector, cfg, opt_state, split, epoch + 1, cfg.pretrain_steps, step, metrics), record)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {record['loss']:.4f} lr {lr:g} "
                f"({record['seconds']:.1f}s)")

    final = snapshot(detector, cfg, opt_state, split, max(start_epoch, cfg.epochs),
                     max(pretrain_start, cfg.pretrain_steps), step, metrics)
    if out_dir is not None:
        emit(final)
    return final


# ---------------------------------------------------------------------------
# checkpoint serialization: FSDT | u32 version | u32 header len | JSON | blobs

def save_checkpoint(path, ckpt: Checkpoint):
    names = sorted(ckpt.params) + [f"opt/{n}" for n in sorted(ckpt.opt_state)]
    arrays = [ckpt.params[n] if not n.startswith("opt/") else ckpt.opt_state[n[4:]]
              for n in names]
    tensors = []
    offset = 0
    blobs = []
    for name, arr in zip(names, arrays):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config),
        "split": ckpt.split,
        "epoch": ckpt.epoch,
        "pretrain_done": ckpt.pretrain_done,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
        "tensors": tensors,
    }
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise IOError(f"{path}: not a checkpoint (magic {magic!r})")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise IOError(f"{path}: unsupported checkpoint version {version}")
        hlen, = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    params, opt_state = {}, {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape).copy()
        if entry["name"].startswith("opt/"):
            opt_state[entry["name"][4:]] = arr
        else:
            params[entry["name"]] = arr
    mc = dict(header["model_config"])
    mc["backbone_widths"] = tuple(mc["backbone_widths"])
    return Checkpoint(
        model_config=ModelConfig(**mc),
        train_config=TrainConfig(**header["train_config"]),
        params=params,
        opt_state=opt_state,
        split=header["split"],
        epoch=header["epoch"],
        pretrain_done=header["pretrain_done"],
        step=header["step"],
        rng_state=header["rng_state"],
        metrics=header["metrics"],
    )


def build_model(ckpt: Checkpoint) -> FSDetr:
    """Reconstruct a model from checkpoint parameters."""
    dtype = ckpt.model_config.np_dtype
    params = {name: Tensor(arr.astype(dtype), requires_grad=True)
              for name, arr in ckpt.params.items()}
    return FSDetr(ckpt.model_config, params)
