"""Command-line front end: data generation, training, evaluation, detection.

One binary with subcommands (gen-data, pretrain, train, eval, detect); all
configuration comes from an optional JSON file plus dotted-key overrides
(e.g. `--model.n_queries 25`), validated before any compute. Exit codes:
0 success, 1 config/validation error, 2 contamination error, 3 numeric abort.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaltool, netpbm, rng as rngmod, synthworld, trainpipe
from .errors import ConfigError, ContaminationError, NumericAbort
from .matching import cxcywh_to_xyxy
from .model import FSDetr, ModelConfig
from .prompts import TemplateImage, assign_pseudo_classes, crop_template
from .synthworld import DEFAULT_NOVEL_CLASSES, N_CLASSES
from .trainpipe import TrainConfig, build_model, load_checkpoint, save_checkpoint


@dataclass
class DataConfig:
    root: str = "data"
    image_size: int = 96
    scenes_train: int = 600
    scenes_val: int = 200
    scenes_test: int = 200
    scenes_pretrain: int = 400
    novel_classes: list = field(default_factory=lambda: list(DEFAULT_NOVEL_CLASSES))

    def validate(self) -> "DataConfig":
        novel = sorted(set(int(c) for c in self.novel_classes))
        if any(c < 0 or c >= N_CLASSES for c in novel):
            raise ConfigError(f"novel class ids must lie in [0,{N_CLASSES})")
        if len(novel) >= N_CLASSES or not novel:
            raise ConfigError("novel split must be a non-empty proper subset of all classes")
        if self.image_size % 8:
            raise ConfigError("image_size must be divisible by the backbone stride (8)")
        for name in ("scenes_train", "scenes_val", "scenes_test", "scenes_pretrain"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        self.novel_classes = novel
        return self

    @property
    def base_classes(self) -> list:
        novel = set(self.novel_classes)
        return [c for c in range(N_CLASSES) if c not in novel]


@dataclass
class EvalConfig:
    episodes: int = 200
    m: int = 2
    shots: list = field(default_factory=lambda: [1])
    threshold: float = 0.0
    include_absent: bool = True
    split: str = "test"

    def validate(self) -> "EvalConfig":
        if self.episodes < 1 or self.m < 1:
            raise ConfigError("eval episodes and m must be >= 1")
        self.shots = [int(s) for s in self.shots]
        if not self.shots or any(s < 1 for s in self.shots):
            raise ConfigError("eval shots must be positive")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.eval.validate()
        return self


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}


def _coerce(raw: str, target_type):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if target_type is bool and not isinstance(value, bool):
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    return value


def build_run_config(config_path=None, overrides=None, seed_flag=None) -> RunConfig:
    """Assemble RunConfig from file + dotted overrides; unknown keys rejected.

    Seed precedence: --seed flag, then config/overrides, then FSDETR_SEED,
    then 0. The training seed follows the run seed unless set explicitly.
    """
    cfg = RunConfig()
    seed_set = train_seed_set = False

    def apply(path: str, value):
        nonlocal seed_set, train_seed_set
        parts = path.split(".")
        if parts == ["seed"]:
            cfg.seed = int(value)
            seed_set = True
            return
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"unknown config key: {path!r}")
        section, key = parts
        target = getattr(cfg, section)
        names = {f.name: f for f in fields(target)}
        if key not in names:
            raise ConfigError(f"unknown config key: {path!r}")
        current = getattr(target, key)
        if isinstance(value, str):
            value = _coerce(value, type(current))
        if key == "backbone_widths" and isinstance(value, list):
            value = tuple(value)
        setattr(target, key, value)
        if path == "train.seed":
            train_seed_set = True

    if config_path:
        with open(config_path, encoding="utf-8") as f:
            doc = json.load(f)
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        for section, value in doc.items():
            if section == "seed":
                apply("seed", value)
            elif section in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {section!r} must be an object")
                for key, v in value.items():
                    apply(f"{section}.{key}", v)
            else:
                raise ConfigError(f"unknown config section: {section!r}")
    for path, raw in (overrides or []):
        apply(path, raw)
    if seed_flag is not None:
        cfg.seed = int(seed_flag)
        seed_set = True
    if not seed_set and "FSDETR_SEED" in os.environ:
        cfg.seed = int(os.environ["FSDETR_SEED"])
    if not train_seed_set:
        cfg.train.seed = cfg.seed
    return cfg.validate()


def _split_overrides(extras) -> list:
    """Parse trailing `--section.key value` pairs."""
    pairs = []
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument: {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            i += 1
            if i >= len(extras):
                raise ConfigError(f"missing value for override {tok!r}")
            raw = extras[i]
        pairs.append((key, raw))
        i += 1
    return pairs


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, overrides) -> int:
    cfg = build_run_config(args.config, overrides, args.seed)
    if args.scenes is not None:
        cfg.data.scenes_train = int(args.scenes)
        cfg.data.validate()
    out = Path(args.out or cfg.data.root)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty (use --force to overwrite)")
    data = cfg.data
    base, novel = data.base_classes, data.novel_classes
    every = sorted(base + novel)
    seed = cfg.seed

    def factory(name):
        return lambda i: rngmod.stream(seed, "data", name, i)

    splits = {
        "train": synthworld.generate_dataset(factory("train"), data.scenes_train, base, data.image_size),
        "val": synthworld.generate_dataset(factory("val"), data.scenes_val, every, data.image_size),
        "test": synthworld.generate_dataset(factory("test"), data.scenes_test, novel, data.image_size),
        "pretrain": synthworld.generate_dataset(factory("pretrain"), data.scenes_pretrain, every, data.image_size),
    }
    synthworld.save_dataset(out, splits, {
        "seed": seed, "image_size": data.image_size, "base": base, "novel": novel,
    })
    print(f"wrote dataset to {out} ({len(base)} base / {len(novel)} novel classes)", file=sys.stderr)
    return 0


def _load_split_checked(root, split):
    manifest = synthworld.load_manifest(root)
    return manifest, synthworld.load_dataset_split(root, split)


def _run_fit(args, overrides, pretrain_only: bool) -> int:
    cfg = build_run_config(args.config, overrides, args.seed)
    if pretrain_only:
        cfg.train.epochs = 0
    manifest, train_ds = _load_split_checked(args.data, "train")
    datasets = {"train": train_ds}
    try:
        datasets["pretrain"] = synthworld.load_dataset_split(args.data, "pretrain")
    except IOError:
        pass
    split = {"base": manifest["base"], "novel": manifest["novel"]}
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        detector = build_model(resume)
    else:
        detector = FSDetr.init(cfg.model, cfg.seed)
    out = Path(args.out)
    ckpt = trainpipe.fit(detector, datasets, cfg.train, split, out_dir=out,
                         resume=resume, log=lambda msg: print(msg, file=sys.stderr))
    print(str(out / "checkpoint.fsdt"))
    return 0


def cmd_pretrain(args, overrides) -> int:
    return _run_fit(args, overrides, pretrain_only=True)


def cmd_train(args, overrides) -> int:
    return _run_fit(args, overrides, pretrain_only=False)


def _apply_eval_flags(args, cfg: RunConfig) -> dict:
    flags = {}
    if args.no_mhca:
        flags["use_encoder_mhca"] = False
    if args.no_ts_mlp:
        flags["use_ts_mlp"] = False
    if args.pool:
        flags["pooling"] = {"avg": "global_avg", "attn": "attention"}.get(args.pool, args.pool)
    return flags


def cmd_eval(args, overrides) -> int:
    cfg = build_run_config(args.config, overrides, args.seed)
    ckpt = load_checkpoint(args.ckpt)
    manifest, ds = _load_split_checked(args.data, args.split or cfg.eval.split)
    if sorted(manifest["novel"]) != sorted(ckpt.split["novel"]):
        raise ContaminationError(
            f"dataset novel split {manifest['novel']} does not match checkpoint {ckpt.split['novel']}")
    flags = _apply_eval_flags(args, cfg)
    for arch_flag in ("use_encoder_mhca", "use_ts_mlp"):
        if arch_flag in flags and flags[arch_flag] != getattr(ckpt.model_config, arch_flag):
            raise ConfigError(f"{arch_flag}={flags[arch_flag]} conflicts with the checkpoint architecture")
    detector = build_model(ckpt)
    if "pooling" in flags:
        from dataclasses import replace
        detector.cfg = replace(ckpt.model_config, pooling=flags["pooling"]).validate()
    shots = [int(s) for s in args.shots.split(",")] if args.shots else cfg.eval.shots
    reports = []
    for k in shots:
        report = evaltool.evaluate(
            detector, ds, k=k, m=args.m or cfg.eval.m, n_episodes=args.episodes or cfg.eval.episodes,
            seed=cfg.seed, novel_ids=ckpt.split["novel"], base_ids=ckpt.split["base"],
            include_absent=cfg.eval.include_absent, threshold=cfg.eval.threshold,
            flags=flags)
        reports.append(report)
        print(f"k={k} m={report.m} episodes={report.episodes}  "
              f"novel AP50={report.novel['ap50']:.3f} AP={report.novel['ap']:.3f}  "
              f"base AP50={report.base.get('ap50', float('nan')):.3f}  "
              f"all AP50={report.all_classes['ap50']:.3f}", file=sys.stderr)
    payload = json.dumps([r.to_dict() for r in reports], indent=1)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)
    return 0


def _draw_box(image, box_cxcywh, color):
    _, h, w = image.shape
    x1, y1, x2, y2 = cxcywh_to_xyxy(np.asarray(box_cxcywh))
    xa, xb = int(np.clip(x1 * w, 0, w - 1)), int(np.clip(x2 * w, 0, w - 1))
    ya, yb = int(np.clip(y1 * h, 0, h - 1)), int(np.clip(y2 * h, 0, h - 1))
    col = np.array(color)[:, None]
    image[:, ya, xa:xb + 1] = col
    image[:, yb, xa:xb + 1] = col
    image[:, ya:yb + 1, xa] = col
    image[:, ya:yb + 1, xb] = col


def cmd_detect(args, overrides) -> int:
    cfg = build_run_config(args.config, overrides, args.seed)
    ckpt = load_checkpoint(args.ckpt)
    detector = build_model(ckpt)
    if not args.template:
        raise ConfigError("detect needs at least one --template")
    try:
        image = netpbm.read_ppm(args.image)
    except FileNotFoundError as e:
        raise IOError(f"cannot read image {args.image}: {e}") from e
    templates = []
    for t_path in args.template:
        pixels = netpbm.read_ppm(t_path)
        crop = crop_template(pixels, (0.0, 0.0, 1.0, 1.0), patch_size=detector.cfg.patch_size)
        templates.append([TemplateImage(pixels=crop.pixels)])
    m = len(templates)
    r = rngmod.stream(cfg.seed, "detect")
    assignment = assign_pseudo_classes(m, detector.bank, r)
    ps = detector.encode_prompts(templates, assignment, training=False)
    dets = detector.forward(image.astype(detector.cfg.np_dtype), ps, training=False,
                            want_attn=args.attn)
    found = evaltool.score_detections(dets, threshold=args.threshold)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    annotated = image.copy()
    palette = [(1.0, 0.2, 0.2), (0.2, 1.0, 0.2), (0.3, 0.4, 1.0), (1.0, 1.0, 0.2),
               (1.0, 0.3, 1.0), (0.3, 1.0, 1.0)]
    for ci, box, _score in found:
        _draw_box(annotated, box, palette[ci % len(palette)])
    netpbm.write_ppm(out_dir / "annotated.ppm", annotated)
    payload = [{"template": int(ci), "box": [float(v) for v in box], "score": float(s)}
               for ci, box, s in found]
    with open(out_dir / "detections.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")
    if args.attn and dets.attn_maps:
        last = dets.attn_maps[-1]            # (heads, S, mk); one map per template
        grid_h = image.shape[1] // 8
        grid_w = image.shape[2] // 8
        weights = last.mean(axis=0)          # (S, mk)
        for j in range(m):
            col = weights[:, j].reshape(grid_h, grid_w)
            lo, hi = col.min(), col.max()
            norm = (col - lo) / (hi - lo) if hi > lo else np.zeros_like(col)
            netpbm.write_pgm(out_dir / f"attn_{j:02d}.pgm", norm)
    print(f"wrote {len(found)} detections to {out_dir}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="fsdetr",
                                description="Few-shot detection transformer on a synthetic shapes world")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="master seed (falls back to FSDETR_SEED)")

    g = sub.add_parser("gen-data", help="generate train/val/test/pretrain splits")
    common(g)
    g.add_argument("--out", help="output dataset directory (default: data.root)")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    g.add_argument("--scenes", type=int, default=None, help="shorthand for data.scenes_train")
    g.set_defaults(func=cmd_gen_data)

    for name, fn, help_text in (("pretrain", cmd_pretrain, "label-free pre-training only"),
                                ("train", cmd_train, "pre-training (if configured) + supervised training")):
        t = sub.add_parser(name, help=help_text)
        common(t)
        t.add_argument("--data", required=True, help="dataset root from gen-data")
        t.add_argument("--out", required=True, help="output directory for checkpoint + metrics")
        t.add_argument("--resume", help="checkpoint to resume from")
        t.set_defaults(func=fn)

    e = sub.add_parser("eval", help="episodic k-shot evaluation")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--shots", help="comma-separated shot counts, e.g. 1,5")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--m", type=int, default=None, help="classes per episode")
    e.add_argument("--split", help="dataset split to evaluate (default from config: test)")
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    e.add_argument("--no-mhca", action="store_true", help="record the encoder-MHCA ablation flag")
    e.add_argument("--no-ts-mlp", action="store_true", help="record the TS-MLP ablation flag")
    e.add_argument("--pool", choices=("avg", "attn"), help="override template pooling at eval time")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="detect templates in one image")
    common(d)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True, help="target PPM image")
    d.add_argument("--template", action="append", default=[], help="template PPM (repeatable)")
    d.add_argument("--out-dir", required=True)
    d.add_argument("--threshold", type=float, default=0.5)
    d.add_argument("--attn", action="store_true", help="export encoder cross-attention PGMs")
    d.set_defaults(func=cmd_detect)
    return p


def main(argv=None) -> int:
    parser = _parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(extras)
        return args.func(args, overrides)
    except ContaminationError as e:
        print(f"contamination error: {e}", file=sys.stderr)
        return 2
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3
    except (ConfigError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
