"""Dual-network training with uncertainty-masked cross-teaching.

Two networks are trained on the same batches: F1 against the intersection
pseudo-label, F2 against the union. On top of the supervised CE+Dice terms,
each network is supervised by the other's hard prediction, but only inside
the uncertainty map, weighted by lambda (Eq.-style total: sup + lambda*ct).
With lambda=0 the coupling term is skipped entirely, which makes F1's
trajectory bit-identical to the single-model baseline -- that property is
load-bearing for the ablation harness and is covered by tests.

Determinism contract: fixed (seed, config, dataset) reproduces loss.csv and
all checkpoints bit-identically. All stochastic draws (validation split,
epoch shuffling, augmentation) come from seeded generators; the optimizer
and network math are single-threaded float32.
"""

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio, losses, pseudolabel
from .errors import ConfigError, MissingArtifactError, NumericalError
from .model import SegModel, load_checkpoint, save_checkpoint

LOSS_CSV_HEADER = ["step", "lr", "lambda", "l_sup", "l_ct_u", "l_total", "val_dsc"]
LAMBDA_MODES = ("constant", "gaussian_warmup")


@dataclass
class TrainConfig:
    image_size: int = 128
    batch_size: int = 8
    lr0: float = 0.01
    max_iters: int = 2000
    poly_power: float = 0.9
    lambda_mode: str = "constant"
    lambda_value: float = 0.1
    seed: int = 0
    aug_rot90: bool = True
    aug_hflip: bool = True
    aug_vflip: bool = True
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_interval: int = 200
    depth: int = 3
    base_channels: int = 16
    val_fraction: float = 0.1
    drop_empty_yint: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_value < 0:
            raise ConfigError(f"lambda_value must be >= 0, got {self.lambda_value}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigError(
                f"lambda_mode must be one of {LAMBDA_MODES}, got {self.lambda_mode!r}"
            )
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.poly_power <= 0:
            raise ConfigError(f"poly_power must be > 0, got {self.poly_power}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be >= 1")
        div = 1 << self.depth
        if self.image_size % div:
            raise ConfigError(
                f"image_size {self.image_size} must be divisible by 2^depth = {div}"
            )
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg):
    """Canonical key=value serialization (sorted keys); hash input."""
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}"
             for f in sorted(dataclasses.fields(cfg), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).hexdigest()[:16]


def _coerce(name, ftype, raw):
    if ftype is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {name}: expected boolean, got {raw!r}")
    try:
        return ftype(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from exc


def load_config(path=None, overrides=None):
    """Build a TrainConfig from a flat key=value file plus overrides.

    Unknown keys are an error (typos must not silently fall back to
    defaults). Lines starting with # and blank lines are ignored.
    """
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    types = {"int": int, "float": float, "bool": bool, "str": str,
             int: int, float: float, bool: bool, str: str}
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingArtifactError(f"config file not found: {path}")
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, types[fields[key]], val)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = types[fields[key]]
        values[key] = _coerce(key, ftype, val) if isinstance(val, str) else ftype(val)
    return TrainConfig(**values)


def save_config(cfg, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(config_to_text(cfg), encoding="utf-8")


def poly_lr(step, cfg):
    frac = min(step / cfg.max_iters, 1.0)
    return cfg.lr0 * (1.0 - frac) ** cfg.poly_power


def lambda_at(step, cfg):
    if cfg.lambda_mode == "constant":
        return cfg.lambda_value
    frac = min(step / cfg.max_iters, 1.0)
    return cfg.lambda_value * math.exp(-5.0 * (1.0 - frac) ** 2)


def sample_transform(rng, rot90=True, hflip=True, vflip=True):
    """Draw (k, hflip, vflip); draw order is part of the determinism contract."""
    k = int(rng.integers(4)) if rot90 else 0
    h = bool(rng.random() < 0.5) if hflip else False
    v = bool(rng.random() < 0.5) if vflip else False
    return k, h, v


def apply_transform(arr, k, h, v):
    """rot90 x k, then horizontal flip, then vertical flip, on the last 2 axes."""
    if k:
        arr = np.rot90(arr, k, axes=(-2, -1))
    if h:
        arr = arr[..., ::-1]
    if v:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(arr)


def invert_transform(arr, k, h, v):
    if v:
        arr = arr[..., ::-1, :]
    if h:
        arr = arr[..., ::-1]
    if k:
        arr = np.rot90(arr, -k, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def augment(image, y_int, y_uni, u, rng, rot90=True, hflip=True, vflip=True):
    """One jointly-sampled transform applied identically to all four arrays."""
    k, h, v = sample_transform(rng, rot90, hflip, vflip)
    return tuple(apply_transform(a, k, h, v) for a in (image, y_int, y_uni, u))


@dataclass
class TrainData:
    ids: list
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    y_int: np.ndarray   # (N, H, W) uint8
    y_uni: np.ndarray
    u: np.ndarray
    gt: np.ndarray | None = None  # reference for validation DSC when present


def load_training_arrays(data_root, bundles_dir, image_size, split_name="train"):
    """Assemble in-memory training tensors from a dataset + bundle directory."""
    index = dataio.load_dataset(data_root)
    split = dataio.load_split(data_root)
    entries = [e for e in index.entries if split.get(e.image_id) == split_name]
    if not entries:
        raise ConfigError(f"no images with split={split_name!r} in {data_root}")
    ids, imgs, yints, yunis, us, gts = [], [], [], [], [], []
    have_gt = all(e.gt_mask_path is not None for e in entries)
    size = (image_size, image_size)
    for e in entries:
        img = dataio.load_image(e.image_path, e.image_id)
        bundle = pseudolabel.load_bundle(bundles_dir, e.image_id,
                                         expected_shape=img.pixels.shape)
        ids.append(e.image_id)
        imgs.append(dataio.resize_nearest(img.pixels, size))
        yints.append(dataio.resize_nearest(bundle.y_int, size))
        yunis.append(dataio.resize_nearest(bundle.y_uni, size))
        us.append(dataio.resize_nearest(bundle.u, size))
        if have_gt:
            gt = dataio.load_mask(e.gt_mask_path, expected_shape=img.pixels.shape)
            gts.append(dataio.resize_nearest(gt, size))
    return TrainData(ids, np.stack(imgs), np.stack(yints), np.stack(yunis),
                     np.stack(us), np.stack(gts) if have_gt else None)


class SGD:
    """SGD with momentum and L2 weight decay, all-float32 update:
    v = momentum*v + (g + wd*w); w -= lr*v.
    """

    def __init__(self, params, momentum, weight_decay):
        self.momentum = np.float32(momentum)
        self.weight_decay = np.float32(weight_decay)
        self.velocity = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, params, lr):
        lr = np.float32(lr)
        for p in params:
            g = p.grad + self.weight_decay * p.value
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.value -= lr * v

    def state(self):
        return dict(self.velocity)

    def load_state(self, state):
        for name, arr in state.items():
            if name not in self.velocity:
                raise ConfigError(f"optimizer state has unknown parameter {name!r}")
            self.velocity[name][...] = arr


def _single_supervised_with_grad(logits, target):
    ce, gce = losses.ce_loss_with_grad(logits, target)
    di, gdi = losses.dice_loss_with_grad(logits, target)
    return ce + di, gce + gdi


def _mean_prob(models, image):
    probs = [m.predict(image)[0].astype(np.float64) for m in models]
    return sum(probs) / len(probs)


def infer(models, image, mode="ensemble"):
    """models: dict with keys among f1/f2/single. ensemble = mean softmax."""
    if mode in ("f1", "f2"):
        if mode not in models:
            raise MissingArtifactError(f"no checkpoint for mode {mode!r}")
        return models[mode].predict(image)[1]
    if mode == "ensemble":
        pool = [models[k] for k in ("f1", "f2", "single") if k in models]
        if not pool:
            raise MissingArtifactError("no checkpoints available for ensemble")
        return (_mean_prob(pool, image) > 0.5).astype(np.uint8)
    raise ConfigError(f"unknown inference mode {mode!r}")


def load_infer_models(ckpt_dir, mode="ensemble"):
    """Load f1.ckpt/f2.ckpt (dual run) or model.ckpt (baseline run)."""
    ckpt_dir = Path(ckpt_dir)
    models = {}
    for key, fname in (("f1", "f1.ckpt"), ("f2", "f2.ckpt"), ("single", "model.ckpt")):
        path = ckpt_dir / fname
        if path.is_file():
            models[key], _, _ = load_checkpoint(path)
    if not models:
        raise MissingArtifactError(
            f"no checkpoints (f1.ckpt/f2.ckpt/model.ckpt) in {ckpt_dir} (run train first)"
        )
    if mode in ("f1", "f2") and mode not in models:
        raise MissingArtifactError(f"{ckpt_dir} has no {mode}.ckpt")
    return models


@dataclass
class TrainOutcome:
    out_dir: Path
    steps: int
    best_val_dsc: float | None
    loss_csv: Path
    checkpoints: dict


def train(data, cfg, out_dir, resume=False, stop_after=None):
    """Dual cross-teaching run; writes f1.ckpt/f2.ckpt (+ *_last) and loss.csv.

    stop_after: optional step count to pause at (same config); a paused run
    is continued bit-identically with resume=True.
    """
    models = [SegModel(cfg.depth, cfg.base_channels, seed=cfg.seed),
              SegModel(cfg.depth, cfg.base_channels, seed=cfg.seed + 1)]
    return _fit(models, ("y_int", "y_uni"), True, data, cfg, Path(out_dir),
                ("f1", "f2"), resume, stop_after)


def train_single_baseline(data, cfg, out_dir, target="y_int", resume=False,
                          stop_after=None):
    """Supervised-only single model on one pseudo-label; same schedule and
    data stream as train(), so with lambda=0 the trajectories coincide."""
    if target not in ("y_int", "y_uni"):
        raise ConfigError(f"target must be y_int or y_uni, got {target!r}")
    seed = cfg.seed if target == "y_int" else cfg.seed + 1
    model = SegModel(cfg.depth, cfg.base_channels, seed=seed)
    return _fit([model], (target,), False, data, cfg, Path(out_dir),
                ("model",), resume, stop_after)


def _val_split(n, cfg):
    val_n = int(round(cfg.val_fraction * n))
    val_n = min(val_n, n - 1)
    perm = np.random.default_rng([cfg.seed, 431]).permutation(n)
    return sorted(perm[val_n:].tolist()), sorted(perm[:val_n].tolist())


def _fit(models, targets, cross_teach, data, cfg, out_dir, prefixes, resume,
         stop_after=None):
    n = len(data.ids)
    if n == 0:
        raise ConfigError("training dataset is empty")
    end = cfg.max_iters if stop_after is None else min(int(stop_after), cfg.max_iters)
    if end < 1:
        raise ConfigError(f"stop_after must be >= 1, got {stop_after}")
    train_idx, val_idx = _val_split(n, cfg)
    if cfg.drop_empty_yint:
        train_idx = [i for i in train_idx if data.y_int[i].any()]
    if len(train_idx) < cfg.batch_size:
        raise ConfigError(
            f"{len(train_idx)} training images < batch_size {cfg.batch_size}"
        )
    target_arrays = {"y_int": data.y_int, "y_uni": data.y_uni}
    val_ref = data.gt if data.gt is not None else data.y_int
    chash = config_hash(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([cfg.seed, 977])
    opts = [SGD(m.parameters(), cfg.momentum, cfg.weight_decay) for m in models]
    start_step = 0
    best_dsc = None
    perm, ptr = None, 0
    rows = []

    if resume:
        metas = []
        for m_i, (model, opt, prefix) in enumerate(zip(models, opts, prefixes)):
            path = out_dir / f"{prefix}_last.ckpt"
            loaded, meta, opt_state = load_checkpoint(path)
            for p, q in zip(model.parameters(), loaded.parameters()):
                p.value[...] = q.value
            opt.load_state(opt_state)
            metas.append(meta)
        meta = metas[0]
        start_step = meta["step"]
        best_dsc = meta.get("best_val_dsc")
        rng.bit_generator.state = json.loads(meta["rng_state"])
        if meta.get("epoch_perm") is not None:
            perm = np.array(meta["epoch_perm"], dtype=np.intp)
            ptr = meta["epoch_ptr"]
        loss_path = out_dir / "loss.csv"
        if loss_path.is_file():
            with open(loss_path, newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                next(reader)
                rows = [r for r in reader if int(r[0]) < start_step]

    def run_validation():
        if not val_idx:
            return None
        scores = []
        for i in val_idx:
            if len(models) == 1:
                pred = models[0].predict(data.images[i])[1]
            else:
                pred = (_mean_prob(models, data.images[i]) > 0.5).astype(np.uint8)
            scores.append(_dsc_fast(pred, val_ref[i]))
        return sum(scores) / len(scores)

    def save_best():
        for model, opt, prefix in zip(models, opts, prefixes):
            save_checkpoint(out_dir / f"{prefix}.ckpt", model, step=step + 1,
                            config_hash=chash)

    for step in range(start_step, end):
        if perm is None or ptr + cfg.batch_size > len(train_idx):
            perm = rng.permutation(len(train_idx))
            ptr = 0
        batch = [train_idx[j] for j in perm[ptr:ptr + cfg.batch_size]]
        ptr += cfg.batch_size

        imgs, tgts, us = [], {t: [] for t in targets}, []
        for i in batch:
            k, h, v = sample_transform(rng, cfg.aug_rot90, cfg.aug_hflip, cfg.aug_vflip)
            imgs.append(apply_transform(data.images[i], k, h, v))
            for t in targets:
                tgts[t].append(apply_transform(target_arrays[t][i], k, h, v))
            us.append(apply_transform(data.u[i], k, h, v))
        x = np.stack(imgs)[:, None]
        u_b = np.stack(us)

        lr = poly_lr(step, cfg)
        lam = lambda_at(step, cfg) if cross_teach else 0.0
        logits = [m.forward(x) for m in models]
        grads = []
        sup = 0.0
        for li, t in zip(logits, targets):
            s, g = _single_supervised_with_grad(li, np.stack(tgts[t]))
            sup += s
            grads.append(g)
        ct = 0.0
        if cross_teach and lam > 0.0:
            ct, c1, c2 = losses.cross_teaching_loss_with_grad(logits[0], logits[1], u_b)
            grads[0] = grads[0] + lam * c1
            grads[1] = grads[1] + lam * c2
        total = losses.total_loss(sup, ct, lam)
        if not math.isfinite(total):
            raise NumericalError(
                f"non-finite loss at step {step}: l_sup={sup}, l_ct_u={ct}; "
                f"batch ids {[data.ids[i] for i in batch]}"
            )
        for model, opt, g in zip(models, opts, grads):
            model.zero_grad()
            model.backward(g.astype(np.float32))
            opt.step(model.parameters(), lr)

        val_cell = ""
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.max_iters:
            vd = run_validation()
            if vd is not None:
                val_cell = repr(vd)
                if best_dsc is None or vd > best_dsc:
                    best_dsc = vd
                    save_best()
        rows.append([str(step), repr(lr), repr(lam), repr(float(sup)),
                     repr(float(ct)), repr(float(total)), val_cell])

    extra = {
        "best_val_dsc": best_dsc,
        "epoch_perm": perm.tolist() if perm is not None else None,
        "epoch_ptr": ptr,
    }
    rng_state = json.dumps(rng.bit_generator.state)
    ckpts = {}
    for model, opt, prefix in zip(models, opts, prefixes):
        save_checkpoint(out_dir / f"{prefix}_last.ckpt", model, step=end,
                        config_hash=chash, rng_state=rng_state,
                        opt_state=opt.state(), extra_meta=extra)
        best_path = out_dir / f"{prefix}.ckpt"
        if not best_path.is_file():
            save_checkpoint(best_path, model, step=end, config_hash=chash)
        ckpts[prefix] = best_path

    loss_path = out_dir / "loss.csv"
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_CSV_HEADER)
        w.writerows(rows)
    save_config(cfg, out_dir / "config.txt")
    return TrainOutcome(out_dir, end, best_dsc, loss_path, ckpts)


def _dsc_fast(pred, ref):
    p = int(pred.sum())
    g = int(ref.sum())
    if p == 0 and g == 0:
        return 100.0
    if p == 0 or g == 0:
        return 0.0
    return 100.0 * 2.0 * int((pred & ref).sum()) / (p + g)
