"""Joint optimization of network parameters and point features.

The loss is either plain l1 or a weighted sum of l1 distances between
fixed random conv+downsample feature pyramids of the two images (the
raw-pixel term is layer 0).  Both parameter sets share one Adam
optimizer and the piecewise-constant learning-rate schedule; points
that contributed nothing to a step are left untouched.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field, asdict
from io import BytesIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import CheckpointError, ContractViolation, NonFiniteLossError
from .metrics import psnr
from .network import RenderNet, RenderNetArch, RenderedImage, blend
from .pointcloud import PointCloudStore
from .voxelizer import AggregationParams, build_volume

CHECKPOINT_VERSION = 1
FEATURE_KEY = "point_features"


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossConfig:
    kind: str = "l1"
    layer_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)  # multiscale only
    seed: int = 0
    stage_channels: int = 8

    def __post_init__(self):
        if self.kind not in ("l1", "multiscale-feature"):
            raise ContractViolation(f"unknown loss kind {self.kind!r}")
        self.layer_weights = tuple(float(w) for w in self.layer_weights)
        if any(w <= 0 for w in self.layer_weights):
            raise ContractViolation("layer weights must be positive")


def _feature_bank(config: LossConfig):
    """Fixed random conv stages; stage l halves H and W."""
    rng = np.random.default_rng(config.seed)
    stages = []
    c_prev = 3
    for _ in range(len(config.layer_weights) - 1):
        shape = (config.stage_channels, c_prev, 1, 3, 3)
        bound = math.sqrt(1.0 / (c_prev * 9))
        stages.append(rng.uniform(-bound, bound, size=shape).astype(np.float32))
        c_prev = config.stage_channels
    return stages


def build_loss(config: LossConfig):
    """Returns loss_fn(prediction, target) -> scalar Tensor on the tape."""
    stages = _feature_bank(config) if config.kind == "multiscale-feature" else []

    def meanabs(x: Tensor, target: np.ndarray) -> Tensor:
        return ad.tmean(ad.absolute(ad.sub(x, Tensor(target, dtype=x.dtype))))

    def pyramid(x: Tensor):
        c, h, w = x.shape
        feat = ad.reshape(x, (c, 1, h, w))
        out = []
        for wgt in stages:
            bias = Tensor(np.zeros(wgt.shape[0], dtype=x.dtype))
            feat = ad.relu(ad.conv3d(feat, Tensor(wgt, dtype=x.dtype), bias,
                                     stride=(1, 2, 2), padding="same"))
            out.append(feat)
        return out

    def loss_fn(prediction, target) -> Tensor:
        if isinstance(prediction, RenderedImage):
            prediction = prediction.pixels
        target = np.asarray(target)
        if prediction.shape != target.shape:
            raise ContractViolation(
                f"prediction {prediction.shape} vs target {target.shape}")
        total = meanabs(prediction, target) * config.layer_weights[0] \
            if config.kind == "multiscale-feature" else meanabs(prediction, target)
        if config.kind == "multiscale-feature":
            # target pyramid runs off-tape; only values matter
            target_feats = pyramid(Tensor(target, dtype=prediction.dtype))
            for lam, pf, tf in zip(config.layer_weights[1:], pyramid(prediction),
                                   target_feats):
                total = ad.add(total, ad.tmean(ad.absolute(ad.sub(pf, tf.data))) * lam)
        return total

    return loss_fn


# ---------------------------------------------------------------------------
# optimizer


def adam_update(param, grad, m, v, step: int, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step; returns new (param, m, v)."""
    if param.shape != grad.shape:
        raise ContractViolation(f"param {param.shape} vs grad {grad.shape}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


def default_schedule(epochs: int, base_lr: float = 0.01):
    """0.01 -> 0.005 -> 0.001 at one-third epoch boundaries."""
    return ((0, base_lr),
            (max(1, math.ceil(epochs / 3)), base_lr / 2),
            (max(2, math.ceil(2 * epochs / 3)), base_lr / 10))


def lr_for_epoch(schedule, epoch: int) -> float:
    lr = schedule[0][1]
    for boundary, value in schedule:
        if epoch >= boundary:
            lr = value
    return float(lr)


@dataclass
class OptimizerState:
    schedule: tuple
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(param_shapes: dict[str, tuple], n_points: int, feature_dim: int,
                   schedule) -> OptimizerState:
    shapes = dict(param_shapes)
    shapes[FEATURE_KEY] = (n_points, feature_dim)
    zeros = {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}
    return OptimizerState(schedule=tuple(tuple(p) for p in schedule),
                          m=zeros, lr=lr_for_epoch(schedule, 0),
                          v={k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()})


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainRunConfig:
    epochs: int = 9
    batch_size: int = 1  # views accumulated per optimizer step
    planes: int = 8
    height: int = 64
    width: int = 64
    a: float = 1.0
    b: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    feature_mode: str = "learned"  # "learned" (8-dim) or "rgb" (fixed colors)
    feature_sgd: bool = False      # plain-SGD feature updates instead of Adam
    checkpoint_every: int = 0      # steps; 0 means final checkpoint only
    max_steps: int | None = None
    lr_schedule: tuple | None = None
    padding: float = 1e-3
    near: float | None = None      # fixed partition override
    far: float | None = None
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epochs < 1 or self.batch_size < 1 or self.planes < 1:
            raise ContractViolation("epochs, batch_size and planes must be positive")
        if self.feature_mode not in ("learned", "rgb"):
            raise ContractViolation(f"unknown feature_mode {self.feature_mode!r}")

    @property
    def feature_dim(self) -> int:
        return 8 if self.feature_mode == "learned" else 3

    @property
    def in_channels(self) -> int:
        return self.feature_dim + 3

    def schedule(self):
        return self.lr_schedule if self.lr_schedule else default_schedule(self.epochs)

    def aggregation(self) -> AggregationParams:
        return AggregationParams(a=self.a, b=self.b)

    def partition_for(self):
        from .camera import FrustumPartition
        if self.near is not None and self.far is not None:
            return FrustumPartition(near=self.near, far=self.far, planes=self.planes)
        return None


@dataclass
class StepResult:
    loss: float
    psnr: float
    n_contributing: int


def forward_render(store: PointCloudStore, view, net: RenderNet, params,
                   cfg: TrainRunConfig, tape: Tape | None = None,
                   features: Tensor | None = None):
    """Shared volume -> network -> blend path.  Returns (image, volume)."""
    if features is None:
        source = store.features if cfg.feature_mode == "learned" else store.rgb
        features = Tensor(source, tape=tape) if tape is not None else source
    volume = build_volume(store, view, cfg.aggregation(),
                          partition=cfg.partition_for(), planes=cfg.planes,
                          padding=cfg.padding, features=features,
                          deterministic=cfg.deterministic)
    if isinstance(params, dict) and params and isinstance(next(iter(params.values())), np.ndarray):
        params = net.params_as_tensors(params, tape)
    stack = net.forward(volume.values, params)
    return blend(stack), volume


def train_step(store: PointCloudStore, views, targets, net: RenderNet,
               params: dict[str, np.ndarray], opt: OptimizerState,
               cfg: TrainRunConfig) -> StepResult:
    """One optimizer step over a batch of views (default one).

    Aborts with NonFiniteLossError before touching any parameter if the
    loss is not finite.
    """
    if not isinstance(views, (list, tuple)):
        views, targets = [views], [targets]
    loss_fn = build_loss(cfg.loss)
    grad_params = {k: np.zeros_like(v) for k, v in params.items()}
    grad_feats = np.zeros((len(store), cfg.feature_dim), dtype=np.float32)
    contributing = np.zeros(len(store), dtype=bool)
    learn_features = cfg.feature_mode == "learned"

    loss_total = 0.0
    psnr_last = 0.0
    for view, target in zip(views, targets):
        tape = Tape()
        feats = Tensor(store.features if learn_features else store.rgb, tape=tape)
        leaves = net.params_as_tensors(params, tape)
        image, volume = forward_render(store, view, net, leaves, cfg,
                                       tape=tape, features=feats)
        loss_t = loss_fn(image, target)
        value = loss_t.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(
                f"non-finite loss {value} (|volume|max="
                f"{np.abs(volume.values.data).max():.3e}, included="
                f"{volume.n_contributing}); step aborted, no parameters changed")
        tape.backward(loss_t)
        for k in params:
            grad_params[k] += leaves[k].grad
        grad_feats += feats.grad
        contributing[volume.bookkeeping.point_idx] = True
        loss_total += value
        psnr_last = psnr(image.pixels.data, target)

    batch = len(views)
    for k in grad_params:
        grad_params[k] /= batch
    grad_feats /= batch

    opt.step += 1
    t = opt.step
    for k in params:
        params[k], opt.m[k], opt.v[k] = adam_update(
            params[k], grad_params[k], opt.m[k], opt.v[k], t, opt.lr,
            opt.beta1, opt.beta2, opt.eps)
    if learn_features:
        rows = np.nonzero(contributing)[0]
        if rows.size:
            if cfg.feature_sgd:
                store.features[rows] -= opt.lr * grad_feats[rows]
            else:
                fk = FEATURE_KEY
                new_p, new_m, new_v = adam_update(
                    store.features[rows], grad_feats[rows], opt.m[fk][rows],
                    opt.v[fk][rows], t, opt.lr, opt.beta1, opt.beta2, opt.eps)
                store.features[rows] = new_p
                opt.m[fk][rows] = new_m
                opt.v[fk][rows] = new_v
    return StepResult(loss=loss_total / batch, psnr=psnr_last,
                      n_contributing=int(contributing.sum()))


def run_training(store: PointCloudStore, views, targets, net: RenderNet,
                 params: dict[str, np.ndarray], opt: OptimizerState,
                 cfg: TrainRunConfig, *, log_path=None, checkpoint_dir=None,
                 config_hash: str = "", on_step=None) -> list[dict]:
    """Deterministic round-robin training loop.

    Views are consumed in a fixed order derived from the step index, so
    a resumed run replays exactly.  Checkpoints go to checkpoint_dir at
    the configured cadence plus once at the end; an interrupt flushes a
    checkpoint before propagating.
    """
    n_views = len(views)
    steps_per_epoch = max(1, math.ceil(n_views / cfg.batch_size))
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch
    schedule = cfg.schedule()
    records = []
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None

    def flush_checkpoint():
        if checkpoint_dir is None:
            return
        path = checkpoint_dir / f"ckpt_{opt.step:06d}.ckpt"
        save_checkpoint(path, net_params=params, opt=opt, store=store,
                        arch=net.arch, cfg=cfg, config_hash=config_hash)

    try:
        while opt.step < total:
            step = opt.step
            epoch = step // steps_per_epoch
            opt.lr = lr_for_epoch(schedule, epoch)
            idx = [(step * cfg.batch_size + j) % n_views for j in range(cfg.batch_size)]
            result = train_step(store, [views[i] for i in idx],
                                [targets[i] for i in idx], net, params, opt, cfg)
            record = {"step": opt.step, "epoch": epoch, "lr": opt.lr,
                      "loss": result.loss, "psnr": result.psnr}
            records.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if on_step:
                on_step(record)
            if cfg.checkpoint_every and opt.step % cfg.checkpoint_every == 0:
                flush_checkpoint()
    except KeyboardInterrupt:
        flush_checkpoint()
        raise
    finally:
        if log_file:
            log_file.close()
    flush_checkpoint()
    return records


# ---------------------------------------------------------------------------
# checkpoints (deterministic zip container)


_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


@dataclass
class CheckpointData:
    params: dict[str, np.ndarray]
    features: np.ndarray
    positions: np.ndarray
    rgb: np.ndarray
    opt: OptimizerState
    arch: RenderNetArch
    config_hash: str
    train_cfg: dict


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = BytesIO()
    np.save(buf, np.ascontiguousarray(arr))
    return buf.getvalue()


def save_checkpoint(path, *, net_params, opt: OptimizerState,
                    store: PointCloudStore, arch: RenderNetArch,
                    cfg: TrainRunConfig, config_hash: str = "") -> None:
    """Write a self-contained run snapshot; byte-identical per state."""
    descriptor = arch.descriptor()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "arch": json.loads(descriptor),
        "arch_hash": arch.descriptor_hash(),
        "config_hash": config_hash,
        "optimizer": {
            "step": opt.step, "lr": opt.lr,
            "schedule": [[int(e), float(l)] for e, l in opt.schedule],
            "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
        },
        "train_config": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in asdict(cfg).items()},
        "param_names": sorted(net_params),
    }
    entries = {"meta.json": json.dumps(meta, sort_keys=True).encode("ascii"),
               "features.npy": _npy_bytes(store.features),
               "positions.npy": _npy_bytes(store.positions),
               "rgb.npy": _npy_bytes(store.rgb)}
    for name, arr in net_params.items():
        entries[f"params/{name}.npy"] = _npy_bytes(arr)
    for name, arr in opt.m.items():
        entries[f"adam_m/{name}.npy"] = _npy_bytes(arr)
    for name, arr in opt.v.items():
        entries[f"adam_v/{name}.npy"] = _npy_bytes(arr)

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_FIXED_TIME)
            zf.writestr(info, entries[name])


def load_checkpoint(path, expected_config_hash: str | None = None) -> CheckpointData:
    """Read a checkpoint; raises CheckpointError on damage or mismatch."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            names = set(zf.namelist())
            if "meta.json" not in names:
                raise CheckpointError(f"{path}: not a checkpoint (no meta.json)")
            meta = json.loads(zf.read("meta.json"))

            def load_arr(name):
                if name not in names:
                    raise CheckpointError(f"{path}: missing entry {name}")
                return np.load(BytesIO(zf.read(name)))

            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: format version {meta.get('format_version')} unsupported")
            arch = RenderNetArch.from_descriptor(json.dumps(meta["arch"], sort_keys=True))
            if arch.descriptor_hash() != meta.get("arch_hash"):
                raise CheckpointError(f"{path}: incompatible architecture hash")
            if expected_config_hash is not None and meta["config_hash"] != expected_config_hash:
                raise CheckpointError(
                    f"{path}: config hash mismatch (checkpoint {meta['config_hash'][:12]}..., "
                    f"expected {expected_config_hash[:12]}...)")
            params = {n: load_arr(f"params/{n}.npy") for n in meta["param_names"]}
            moment_names = list(meta["param_names"]) + [FEATURE_KEY]
            opt_doc = meta["optimizer"]
            opt = OptimizerState(
                schedule=tuple((int(e), float(l)) for e, l in opt_doc["schedule"]),
                m={n: load_arr(f"adam_m/{n}.npy") for n in moment_names},
                v={n: load_arr(f"adam_v/{n}.npy") for n in moment_names},
                step=int(opt_doc["step"]), lr=float(opt_doc["lr"]),
                beta1=opt_doc["beta1"], beta2=opt_doc["beta2"], eps=opt_doc["eps"])
            return CheckpointData(
                params=params, features=load_arr("features.npy"),
                positions=load_arr("positions.npy"), rgb=load_arr("rgb.npy"),
                opt=opt, arch=arch, config_hash=meta["config_hash"],
                train_cfg=meta["train_config"])
    except zipfile.BadZipFile as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from e
    except KeyError as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e
