"""Segmentation head, loss, mIoU, synthetic paired scenes, training, eval.

The head is a deliberately small multi-scale sum head: every fused scale is
projected to a common width, upsampled to the /4 grid, summed, classified
with a 1x1 conv and upsampled to full resolution. The synthetic dataset
places rectangles that are bright in only one modality (or in both), so
telling the classes apart genuinely requires looking at both inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment, backbone
from . import params as P
from .errors import DimensionError, NonFiniteError
from .io_formats import Config
from .rng import RngState
from .tensor import (
    Tensor,
    _node,
    conv2d,
    named_gradients,
    relu,
    trace,
    upsample_nearest,
)

IGNORE_LABEL = 255


# -- segmentation head ---------------------------------------------------------


@dataclass
class SegHead:
    projections: list  # one 1x1 conv per scale, C_i -> width
    classifier_w: Tensor
    classifier_b: Tensor
    width: int
    classes: int


def build_head(store: P.ParamStore, rng: RngState, cfg: Config) -> SegHead:
    width, k = cfg.head_width, cfg.head_classes

    def conv1x1(name, c_in, c_out):
        return backbone.Conv(
            w=P.weight(store, rng, f"{name}.w", (c_out, c_in, 1, 1), c_in),
            b=P.bias(store, f"{name}.b", c_out),
        )

    projections = [conv1x1(f"head.proj{i + 1}", c, width) for i, c in enumerate(cfg.widths())]
    classifier = conv1x1("head.classifier", width, k)
    return SegHead(
        projections=projections,
        classifier_w=classifier.w,
        classifier_b=classifier.b,
        width=width,
        classes=k,
    )


def seg_forward(feats: backbone.MultiScaleFeatures, head: SegHead) -> Tensor:
    """Per-pixel class logits at input resolution."""
    total = None
    for i, fused in enumerate(feats.fused):
        proj = conv2d(fused, head.projections[i].w, head.projections[i].b)
        if i > 0:
            proj = upsample_nearest(proj, 2**i)
        total = proj if total is None else total + proj
    logits = conv2d(relu(total), head.classifier_w, head.classifier_b)
    return upsample_nearest(logits, 4)


# -- loss ------------------------------------------------------------------------


def cross_entropy(logits: Tensor, mask: np.ndarray, ignore: int = IGNORE_LABEL) -> Tensor:
    """Mean over non-ignored pixels of -log softmax at the true class."""
    k = logits.shape[0]
    mask = np.asarray(mask)
    if logits.ndim != 3 or mask.shape != logits.shape[1:]:
        raise DimensionError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    valid = mask != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy undefined: every pixel carries the ignore label")
    targets = mask[valid]
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"mask ids must be in [0,{k}) or {ignore}, got {int(targets.max())}")

    cols = logits.data.reshape(k, -1)[:, valid.reshape(-1)]  # [K, n_valid]
    z = cols - cols.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    loss = -logp[targets, np.arange(n_valid)].mean()

    def back(g):
        scale = float(g.reshape(())) / n_valid
        grad_cols = np.exp(logp)
        grad_cols[targets, np.arange(n_valid)] -= 1.0
        grad = np.zeros_like(logits.data).reshape(k, -1)
        grad[:, valid.reshape(-1)] = grad_cols * scale
        return (grad.reshape(logits.shape),)

    return _node(np.asarray(loss), "cross_entropy", (logits,), back)


# -- metric ----------------------------------------------------------------------


class ConfusionMatrix:
    """K x K counts, rows = ground truth, cols = prediction."""

    def __init__(self, classes: int):
        self.classes = classes
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def update(self, truth: np.ndarray, pred: np.ndarray, ignore: int = IGNORE_LABEL):
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if truth.shape != pred.shape:
            raise DimensionError(f"truth/prediction sizes differ: {truth.shape} vs {pred.shape}")
        keep = truth != ignore
        kept_truth = truth[keep]
        for name, ids in (("truth", kept_truth), ("prediction", pred[keep])):
            if ids.size and (ids.min() < 0 or ids.max() >= self.classes):
                raise ValueError(f"{name} ids must lie in [0,{self.classes}), got {int(ids.max())}")
        idx = kept_truth * self.classes + pred[keep]
        self.counts += np.bincount(idx, minlength=self.classes**2).reshape(self.classes, self.classes)

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts


def miou(cm: ConfusionMatrix):
    """Mean IoU over classes with nonzero union; also the per-class list.

    Classes absent from both truth and prediction get IoU None and do not
    count toward the mean.
    """
    counts = cm.counts
    diag = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    per_class = []
    valid = []
    for k in range(cm.classes):
        if union[k] == 0:
            per_class.append(None)
        else:
            iou = diag[k] / union[k]
            per_class.append(iou)
            valid.append(iou)
    if not valid:
        raise ValueError("mIoU undefined: every class has an empty union")
    return float(np.mean(valid)), per_class


# -- synthetic paired scenes -------------------------------------------------------


@dataclass
class SyntheticScene:
    ir: Tensor  # [3,H,W] in [0,1]
    vis: Tensor
    mask: np.ndarray  # [H,W] class ids

    @property
    def images(self):
        return self.ir, self.vis


# class semantics: 0 background; 1 visible only in ir; 2 only in vis; 3 in both.
# Classes 1 and 3 look identical in the ir image, classes 2 and 3 look
# identical in the vis image, so separating them needs both modalities.
def make_scene(rng: RngState, size: int, classes: int = 4) -> SyntheticScene:
    ir = np.empty((3, size, size))
    vis = np.empty((3, size, size))
    ir[:] = rng.uniform_in(0.10, 0.22) + rng.fill_uniform((size, size), -0.03, 0.03)
    vis[:] = rng.fill_uniform((3, 1, 1), 0.10, 0.25) + rng.fill_uniform((size, size), -0.03, 0.03)
    mask = np.zeros((size, size), dtype=np.int64)

    lo, hi = max(size // 6, 4), max(size // 3, 6)
    for cls in range(1, classes):
        rh = lo + rng.randint(hi - lo)
        rw = lo + rng.randint(hi - lo)
        r0 = rng.randint(size - rh)
        c0 = rng.randint(size - rw)
        box = (slice(r0, r0 + rh), slice(c0, c0 + rw))
        mask[box] = cls
        hot = rng.uniform_in(0.70, 0.92)
        tint = rng.fill_uniform((3, 1, 1), 0.65, 0.95)
        if cls in (1, 3):  # warm in the ir image
            ir[(slice(None),) + box] = hot + rng.fill_uniform((rh, rw), -0.04, 0.04)
        if cls in (2, 3):  # bright in the vis image
            vis[(slice(None),) + box] = tint + rng.fill_uniform((rh, rw), -0.04, 0.04)
    np.clip(ir, 0.0, 1.0, out=ir)
    np.clip(vis, 0.0, 1.0, out=vis)
    return SyntheticScene(ir=Tensor(ir), vis=Tensor(vis), mask=mask)


def make_dataset(seed: int, split: str, count: int, size: int, classes: int = 4):
    root = RngState(seed)
    return [make_scene(root.derive("data", split, i), size, classes) for i in range(count)]


# -- optimizer ---------------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, store: P.ParamStore, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def step(self, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.store.items():
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * update - self.lr * self.weight_decay * p.data


# -- model wiring -------------------------------------------------------------------


@dataclass
class Model:
    config: Config
    store: P.ParamStore
    encoder: backbone.BackboneParams
    head: SegHead


def build_model(cfg: Config, seed: int) -> Model:
    store = P.ParamStore()
    rng = RngState(seed)
    enc = backbone.build_backbone(store, rng, cfg)
    head = build_head(store, rng, cfg)
    return Model(config=cfg, store=store, encoder=enc, head=head)


def model_forward(model: Model, ir: Tensor, vis: Tensor, missing: str = "none"):
    ir, vis = backbone.substitute_missing(ir, vis, missing)
    feats = backbone.encoder_forward(ir, vis, model.encoder)
    return feats, seg_forward(feats, model.head)


def _first_non_finite(loss: Tensor) -> str:
    for node in trace(loss).nodes:
        if not np.all(np.isfinite(node.data)):
            return f"{node.op} (node #{node._seq})"
    return "loss"


def train_step(model: Model, batch, optimizer: AdamW, aug_cfg, aug_rng: RngState) -> float:
    """One optimizer update over a batch of scenes; returns the batch loss."""
    losses = []
    for slot, scene in enumerate(batch):
        ir, vis = scene.images
        if aug_cfg is not None and aug_cfg.enabled:
            ir, vis, _ = augment.cma_apply(ir, vis, aug_cfg, aug_rng.derive(slot))
        _, logits = model_forward(model, ir, vis)
        losses.append(cross_entropy(logits, scene.mask))
    loss = losses[0] if len(losses) == 1 else sum(losses[1:], start=losses[0]) / len(losses)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"training loss went non-finite; first bad tensor: {_first_non_finite(loss)}")
    grads = named_gradients(loss, dict(model.store.items()))
    optimizer.step(grads)
    return value


def aug_config_from(cfg: Config) -> augment.AugConfig:
    return augment.AugConfig(
        grid=(cfg.aug_grid_rows, cfg.aug_grid_cols),
        p_cutmix=cfg.aug_p_cutmix,
        p_cutout=cfg.aug_p_cutout,
        cutout_cells=cfg.aug_cutout_cells,
        fill_value=cfg.aug_fill_value,
        enabled=cfg.aug_enabled,
    )


def train_toy(cfg: Config, steps: int, seed: int):
    """Train on the fixed synthetic task; returns (model, per-step losses)."""
    model = build_model(cfg, seed)
    scenes = make_dataset(seed, "train", cfg.data_train_scenes, cfg.data_image_size, cfg.head_classes)
    optimizer = AdamW(model.store, lr=cfg.train_lr, weight_decay=cfg.train_weight_decay)
    root = RngState(seed)
    order_rng = root.derive("data", "order")
    aug_cfg = aug_config_from(cfg)
    losses = []
    for step in range(steps):
        batch = [scenes[order_rng.randint(len(scenes))] for _ in range(cfg.train_batch_size)]
        aug_rng = root.derive("augment", step)
        losses.append(train_step(model, batch, optimizer, aug_cfg, aug_rng))
    return model, losses


# -- evaluation ---------------------------------------------------------------------


def predict(model: Model, ir: Tensor, vis: Tensor, missing: str = "none") -> np.ndarray:
    _, logits = model_forward(model, ir, vis, missing)
    # argmax over classes; ties resolve to the lowest class id
    return logits.data.argmax(axis=0)


def evaluate(dataset, model: Model, missing: str = "none"):
    """Accumulate a confusion matrix over the dataset and report IoU."""
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    cm = ConfusionMatrix(model.head.classes)
    for scene in dataset:
        pred = predict(model, scene.ir, scene.vis, missing)
        cm.update(scene.mask, pred)
    overall, per_class = miou(cm)
    return {"miou": overall, "per_class": per_class, "confusion": cm}


def report_csv(report) -> str:
    lines = ["class_id,iou"]
    for k, iou in enumerate(report["per_class"]):
        lines.append(f"{k},{'nan' if iou is None else repr(iou)}")
    lines.append(f"miou,{report['miou']!r}")
    return "\n".join(lines) + "\n"


def report_text(report) -> str:
    lines = ["class   iou", "-----   ---"]
    for k, iou in enumerate(report["per_class"]):
        lines.append(f"{k:<7} {'undefined' if iou is None else format(iou, '.6f')}")
    lines.append(f"mIoU    {report['miou']:.6f}")
    return "\n".join(lines) + "\n"
