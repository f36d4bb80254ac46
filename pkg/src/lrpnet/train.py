"""SGD training with a poly schedule, augmentation and segmentation metrics."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import backprop, leaf
from .network import Model, NetworkConfig, forward, init_model
from .voxel import PointCloud, SparseTensor, VoxelMap, project_predictions, voxelize

log = logging.getLogger(__name__)

STREAMS = ("data", "init", "augment", "shuffle")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Named random sub-stream of the experiment seed."""
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), *map(int, extra)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    class_weights: tuple | None = None
    voxel_size: float = 0.05
    augment_scale: bool = True
    augment_rotate: bool = True
    augment_translate: bool = True
    augment_jitter: bool = True
    eval_every: int = 1
    grad_clip: float = 0.0  # global L2 norm limit, 0 disables

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ValueError("lr0 must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")

    @property
    def augments(self) -> bool:
        return self.augment_scale or self.augment_rotate or self.augment_translate or self.augment_jitter


def poly_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    frac = min(max(step / total_steps, 0.0), 1.0)
    return cfg.lr0 * (1.0 - frac) ** cfg.poly_power


def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0, velocity: dict | None = None) -> dict:
    """Momentum SGD, updating ``params`` (and ``velocity``) in place.

    v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        d = g + weight_decay * p if weight_decay else g
        if momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity dict")
            v = velocity.get(name)
            v = d.copy() if v is None else momentum * v + d
            velocity[name] = v
            d = v
        p -= lr * d
    return params


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def augment(pc: PointCloud, seed, cfg: TrainConfig | None = None) -> PointCloud:
    """Random scale, z-rotation about the centroid, translation and colour jitter.

    ``seed`` is an int or a Generator.  Labels are never touched.
    """
    cfg = cfg or TrainConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    # draw every variate regardless of toggles so streams stay aligned
    scale = rng.uniform(0.9, 1.1)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    shift = rng.uniform(-0.2, 0.2, size=3)
    jitter = rng.normal(0.0, 0.05, size=pc.colors.shape)
    pos = pc.positions.copy()
    col = pc.colors.copy()
    if cfg.augment_scale:
        pos *= scale
    if cfg.augment_rotate:
        centre = pos.mean(axis=0)
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pos = (pos - centre) @ rot.T + centre
    if cfg.augment_translate:
        pos += shift
    if cfg.augment_jitter:
        col = np.clip(col + jitter, 0.0, 1.0)
    return PointCloud(pos, col, pc.labels.copy(), meta=pc.meta)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    confusion: np.ndarray
    iou: np.ndarray  # per class, nan where the union is empty
    acc: np.ndarray  # per class, nan where the class is absent from the truth
    miou: float
    oa: float
    macc: float

    def summary(self) -> str:
        return f"mIoU {self.miou:.2f}  OA {self.oa:.2f}  mAcc {self.macc:.2f}"


def evaluate(point_labels, ground_truth, num_classes: int | None = None) -> EvalReport:
    """Confusion-matrix metrics over labelled points, in percent.

    Rows are truth, columns prediction.  A prediction of -1 counts as a miss.
    """
    pred = np.asarray(point_labels, dtype=np.int64)
    gt = np.asarray(ground_truth, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and truth lengths differ")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=-1), gt.max(initial=-1))) + 1
    k = num_classes
    keep = gt >= 0
    pred, gt = pred[keep], gt[keep]
    if np.any(gt >= k) or np.any(pred >= k):
        raise ValueError("label outside the class range")
    # column k collects unpredicted points
    pcol = np.where(pred >= 0, pred, k)
    conf = np.bincount(gt * (k + 1) + pcol, minlength=k * (k + 1)).reshape(k, k + 1)
    tp = np.diag(conf[:, :k]).astype(np.float64)
    truth = conf.sum(axis=1).astype(np.float64)
    predicted = conf[:, :k].sum(axis=0).astype(np.float64)
    union = truth + predicted - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(truth > 0, tp / truth, np.nan)
    total = truth.sum()
    miou = float(np.nanmean(iou) * 100) if np.any(union > 0) else 0.0
    macc = float(np.nanmean(acc) * 100) if np.any(truth > 0) else 0.0
    oa = float(tp.sum() / total * 100) if total else 0.0
    return EvalReport(conf[:, :k].copy(), iou, acc, miou, oa, macc)


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


def batch_scenes(clouds, voxel_size: float) -> tuple[SparseTensor, np.ndarray, list[VoxelMap]]:
    """Voxelize each cloud with its own batch index and merge into one tensor."""
    coords, feats, labels, maps = [], [], [], []
    for b, pc in enumerate(clouds):
        t, vmap, lab = voxelize(pc, voxel_size, batch=b)
        coords.append(t.coords)
        feats.append(t.features)
        labels.append(lab)
        maps.append(vmap)
    tensor = SparseTensor(np.vstack(coords), np.vstack(feats), check=False)
    return tensor, np.concatenate(labels), maps


def predict(model: Model, pc: PointCloud, voxel_size: float) -> np.ndarray:
    """Per-point labels from voxel logits projected back through the voxel map."""
    tensor, vmap, _ = voxelize(pc, voxel_size)
    logits = forward(tensor, model, training=False).value.features
    return project_predictions(np.argmax(logits, axis=1), vmap)


def evaluate_model(model: Model, clouds, voxel_size: float) -> EvalReport:
    preds, truth = [], []
    for pc in clouds:
        preds.append(predict(model, pc, voxel_size))
        truth.append(pc.labels)
    return evaluate(np.concatenate(preds), np.concatenate(truth), model.cfg.num_classes)


def loss_and_grads(model: Model, tensor: SparseTensor, labels, class_weights=None,
                   training: bool = True) -> tuple[float, dict]:
    logits = forward(leaf(tensor), model, training=training)
    loss_node = ops.softmax_cross_entropy(logits.value, labels, class_weights)
    (dlogits,) = loss_node.backward(1.0)
    grads = backprop(logits, dlogits)
    return loss_node.output, grads


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)
    report: EvalReport | None = None


LOG_COLUMNS = ("step", "epoch", "lr", "loss", "miou", "oa", "macc")


def train(net_cfg: NetworkConfig, train_cfg: TrainConfig, train_clouds, val_clouds=(),
          model: Model | None = None) -> TrainResult:
    """Run ``epochs`` of seeded, shuffled mini-batch SGD.

    One log row per step; the last row of every ``eval_every``-th epoch also
    carries validation metrics (training-set metrics when no validation data is
    given).
    """
    train_clouds = list(train_clouds)
    val_clouds = list(val_clouds)
    if not train_clouds:
        raise ValueError("empty training set")
    if model is None:
        model = init_model(net_cfg, stream(train_cfg.seed, "init"))
    steps_per_epoch = -(-len(train_clouds) // train_cfg.batch_size)
    total = steps_per_epoch * train_cfg.epochs
    velocity: dict = {}
    rows = []
    step = 0
    report = None
    for epoch in range(train_cfg.epochs):
        order = stream(train_cfg.seed, "shuffle", epoch).permutation(len(train_clouds))
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            clouds = [train_clouds[i] for i in idx]
            if train_cfg.augments:
                clouds = [augment(pc, stream(train_cfg.seed, "augment", epoch, int(i)), train_cfg)
                          for pc, i in zip(clouds, idx)]
            tensor, labels, _ = batch_scenes(clouds, train_cfg.voxel_size)
            loss, grads = loss_and_grads(model, tensor, labels, train_cfg.class_weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at step {step} (epoch {epoch}, lr {poly_lr(step, total, train_cfg):g})"
                )
            lr = poly_lr(step, total, train_cfg)
            if train_cfg.grad_clip:
                clip_gradients(grads, train_cfg.grad_clip)
            sgd_step(model.params, grads, lr, train_cfg.momentum, train_cfg.weight_decay, velocity)
            rows.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss,
                         "miou": None, "oa": None, "macc": None})
            step += 1
        if (epoch + 1) % train_cfg.eval_every == 0 or epoch + 1 == train_cfg.epochs:
            report = evaluate_model(model, val_clouds or train_clouds, train_cfg.voxel_size)
            rows[-1].update(miou=report.miou, oa=report.oa, macc=report.macc)
            log.info("epoch %d loss %.4f %s", epoch, rows[-1]["loss"], report.summary())
    return TrainResult(model, rows, report)


def format_log(rows) -> str:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [",".join(LOG_COLUMNS)]
    lines += [",".join(fmt(r[c]) for c in LOG_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"
