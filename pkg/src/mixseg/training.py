"""Joint training from pixel-level masks and image-level labels.

Each batch holds some segmentation items (image + mask) and some
classification items (image + label). The segmentation items go through
encoder and decoder and are scored pixel-wise against their masks. The
classification items take the same route and then through the
classification head, whose loss therefore reaches the decoder and encoder
too. The two mean cross-entropies are added and a single Adam step is
taken on the sum.
"""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .metrics import aggregate_scores, class_prf1, confusion_matrix
from .model import build_model
from .optim import AdamState, adam_step
from .tensor import no_grad, take_rows

log = logging.getLogger(__name__)

WEIGHT_MODES = ("inverse_frequency", "proportional", "uniform")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 20
    epochs: int = 100
    seed: int = 0
    class_weight_mode: str = "inverse_frequency"
    weight_cls_loss: bool = True
    loss_reduction: str = "mean"
    flips: bool = False
    eval_batch_size: int = 64
    joint_forward: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.class_weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"class_weight_mode must be one of {WEIGHT_MODES}")
        if self.loss_reduction != "mean":
            raise ConfigError("only loss_reduction='mean' is supported")


@dataclass
class MixedBatch:
    seg_items: list
    cls_items: list

    def __len__(self):
        return len(self.seg_items) + len(self.cls_items)


@dataclass
class LossPair:
    L_seg: float = 0.0
    L_cls: float = 0.0

    @property
    def total(self):
        return self.L_seg + self.L_cls


@dataclass
class EpochRecord:
    epoch: int
    L_seg: float
    L_cls: float
    val_f1_micro: float = float("nan")
    val_f1_macro: float = float("nan")

    @property
    def total(self):
        return self.L_seg + self.L_cls


HISTORY_FIELDS = ("epoch", "L_seg", "L_cls", "val_f1_micro", "val_f1_macro")


def compute_class_weights(seg_samples, num_classes, mode="inverse_frequency"):
    """Per-class loss weights from the pixel counts of the segmentation masks.

    ``inverse_frequency`` gives ``w_c ~ 1 / freq_c``; classes that never
    occur get the largest observed weight. Weights are scaled to mean 1.
    """
    if mode not in WEIGHT_MODES:
        raise ConfigError(f"unknown class weight mode {mode!r}")
    counts = np.zeros(num_classes, dtype=np.float64)
    for s in seg_samples:
        counts += np.bincount(np.asarray(s.mask).ravel(), minlength=num_classes)[:num_classes]
    if counts.sum() == 0:
        raise DataError("no labelled pixels to derive class weights from")
    if mode == "uniform":
        return np.ones(num_classes)
    seen = counts > 0
    freq = counts / counts.sum()
    w = np.zeros(num_classes)
    if mode == "inverse_frequency":
        w[seen] = 1.0 / freq[seen]
        w[~seen] = w[seen].max()
    else:
        w[seen] = freq[seen]
        w[~seen] = w[seen].min()
    return w / w.mean()


def make_mixed_batches(seg_pool, cls_pool, batch_size, seed, epoch):
    """Shuffle both pools and deal them into batches.

    Each batch takes segmentation and classification items in proportion to
    what is left of each pool, so every item is used exactly once per epoch.
    """
    ns, nc = len(seg_pool), len(cls_pool)
    if ns + nc == 0:
        raise DataError("both the segmentation and the classification pool are empty")
    rng = np.random.default_rng([int(seed), int(epoch)])
    seg_order = rng.permutation(ns)
    cls_order = rng.permutation(nc)
    batches = []
    i = j = 0
    while i < ns or j < nc:
        rs, rc = ns - i, nc - j
        size = min(batch_size, rs + rc)
        k_seg = int(math.floor(size * rs / (rs + rc) + 0.5))
        k_seg = min(max(k_seg, size - rc), rs)
        k_cls = size - k_seg
        batches.append(MixedBatch([seg_pool[t] for t in seg_order[i : i + k_seg]],
                                  [cls_pool[t] for t in cls_order[j : j + k_cls]]))
        i += k_seg
        j += k_cls
    return batches


def images_to_input(images, dtype=np.float32):
    """uint8 ``(N, H, W, 3)`` -> centred float ``(N, 3, H, W)``."""
    x = np.asarray(images, dtype=dtype)
    return np.ascontiguousarray(((x - 127.5) / 64.0).transpose(0, 3, 1, 2))


def _flip(image, mask, rng):
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], (None if mask is None else mask[:, ::-1])
    if rng.random() < 0.5:
        image, mask = image[::-1], (None if mask is None else mask[::-1])
    return image, mask


def _stack(items, rng=None):
    imgs, masks, labels = [], [], []
    for s in items:
        img, m = s.image, s.mask
        if rng is not None:
            img, m = _flip(img, m, rng)
        imgs.append(img)
        masks.append(m)
        labels.append(s.label)
    return images_to_input(np.stack(imgs)), masks, labels


def _seg_loss(seg_logits, masks, weights):
    return F.softmax_cross_entropy(seg_logits, np.stack(masks).astype(np.int64), weights)


def _cls_loss(cls_logits, labels, weights, weight_cls_loss):
    return F.softmax_cross_entropy(cls_logits, np.asarray(labels, dtype=np.int64),
                                   weights if weight_cls_loss else None)


def _losses_joint(model, batch, weights, weight_cls_loss, rng):
    """Both sub-batches share one encoder/decoder pass (and its BN statistics)."""
    xs, masks, _ = _stack(batch.seg_items, rng)
    xc, _, labels = _stack(batch.cls_items, rng)
    ns, n = len(xs), len(xs) + len(xc)
    feats = model.encode(np.concatenate([xs, xc]), train=True)
    _, pre = model.decode(feats, train=True, full_resolution=False)
    s = model.config.input_size
    seg = F.upsample_nearest(take_rows(pre, 0, ns), (s, s))
    cls = model.classify(take_rows(pre, ns, n), train=True)
    return _seg_loss(seg, masks, weights), _cls_loss(cls, labels, weights, weight_cls_loss)


def _losses_separate(model, batch, weights, weight_cls_loss, rng):
    l_seg = l_cls = None
    if batch.seg_items:
        x, masks, _ = _stack(batch.seg_items, rng)
        out = model.forward(x, train=True, with_head=False)
        l_seg = _seg_loss(out.seg_logits, masks, weights)
    if batch.cls_items:
        x, _, labels = _stack(batch.cls_items, rng)
        out = model.forward(x, train=True, with_head=True, full_resolution=False)
        l_cls = _cls_loss(out.cls_logits, labels, weights, weight_cls_loss)
    return l_seg, l_cls


def train_step(model, batch, weights, state, weight_cls_loss=True, rng=None, joint_forward=True):
    """One forward/backward pass over ``batch`` and one Adam update.

    With ``joint_forward`` a batch holding both kinds of items is run through
    encoder and decoder as one array, so batch-norm statistics cover the
    whole batch; otherwise each kind gets its own pass.
    """
    if not len(batch):
        raise DataError("empty batch")
    model.zero_grad()
    if joint_forward and batch.seg_items and batch.cls_items:
        l_seg, l_cls = _losses_joint(model, batch, weights, weight_cls_loss, rng)
    else:
        l_seg, l_cls = _losses_separate(model, batch, weights, weight_cls_loss, rng)
    pair = LossPair(0.0 if l_seg is None else float(l_seg.data), 0.0 if l_cls is None else float(l_cls.data))
    if not np.isfinite(pair.total):
        raise NumericError(
            f"non-finite loss (L_seg={pair.L_seg}, L_cls={pair.L_cls}) at optimizer step "
            f"{state.step_count + 1} with {len(batch.seg_items)} seg / {len(batch.cls_items)} cls items")
    total = l_cls if l_seg is None else (l_seg if l_cls is None else l_seg + l_cls)
    total.backward()
    adam_step(model.params, state)
    return pair


def predict_segmentation(model, images, batch_size=64):
    """Arg-max label maps ``(N, H, W)`` in eval mode."""
    out = []
    with no_grad():
        for k in range(0, len(images), batch_size):
            x = images_to_input(np.stack(images[k : k + batch_size]))
            seg = model.forward(x, train=False, with_head=False).seg_logits.data
            out.append(seg.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def predict_classes(model, images, batch_size=64):
    out = []
    with no_grad():
        for k in range(0, len(images), batch_size):
            x = images_to_input(np.stack(images[k : k + batch_size]))
            cls = model.forward(x, train=False, with_head=True, full_resolution=False).cls_logits.data
            out.append(cls.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def evaluate_segmentation(model, samples, batch_size=64, micro="support"):
    """Pixel-level ``(confusion matrix, class scores, aggregate)`` over ``samples``."""
    c = model.config.num_classes
    pred = predict_segmentation(model, [s.image for s in samples], batch_size)
    gt = np.stack([s.mask for s in samples])
    cm = confusion_matrix(pred, gt, c)
    scores = class_prf1(cm)
    return cm, scores, aggregate_scores(scores, cm, micro=micro)


def evaluate_classification(model, samples, batch_size=64):
    c = model.config.num_classes
    pred = predict_classes(model, [s.image for s in samples], batch_size)
    cm = confusion_matrix(pred, [s.label for s in samples], c)
    scores = class_prf1(cm)
    return cm, scores, aggregate_scores(scores, cm)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec.epoch, repr(rec.L_seg), repr(rec.L_cls), repr(rec.val_f1_micro), repr(rec.val_f1_macro)])


def train(seg_pool, cls_pool, model_config, train_config, val_samples=None,
          history_path=None, checkpoint_path=None):
    """Train a fresh model; returns ``(model, history)``.

    When ``val_samples`` (patches with masks) are given, validation micro-F1
    is tracked per epoch and the returned model holds the best epoch's
    weights. With both pools empty the untrained network is returned.
    """
    tc = train_config
    model = build_model(model_config)
    c = model_config.num_classes
    state = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2)
    if seg_pool:
        weights = compute_class_weights(seg_pool, c, tc.class_weight_mode).astype(np.float32)
    else:
        weights = np.ones(c, dtype=np.float32)
    log.info("training: %d seg / %d cls items, %d epochs, weights=%s",
             len(seg_pool), len(cls_pool), tc.epochs, np.round(weights, 3).tolist())
    aug_rng = np.random.default_rng([tc.seed, 7]) if tc.flips else None
    history = []
    best = (-np.inf, None)
    trainable = len(seg_pool) + len(cls_pool) > 0
    for epoch in range(1, tc.epochs + 1):
        seg_losses, cls_losses = [], []
        if trainable:
            for batch in make_mixed_batches(seg_pool, cls_pool, tc.batch_size, tc.seed, epoch):
                pair = train_step(model, batch, weights, state, tc.weight_cls_loss, aug_rng, tc.joint_forward)
                if batch.seg_items:
                    seg_losses.append(pair.L_seg)
                if batch.cls_items:
                    cls_losses.append(pair.L_cls)
        rec = EpochRecord(epoch, float(np.mean(seg_losses)) if seg_losses else 0.0,
                          float(np.mean(cls_losses)) if cls_losses else 0.0)
        if val_samples:
            _, _, agg = evaluate_segmentation(model, val_samples, tc.eval_batch_size)
            rec.val_f1_micro, rec.val_f1_macro = agg.f1_micro, agg.f1_macro
            if agg.f1_micro > best[0]:
                best = (agg.f1_micro, model.state_dict())
        history.append(rec)
        log.debug("epoch %d: L_seg=%.4f L_cls=%.4f val_f1_micro=%.4f",
                  epoch, rec.L_seg, rec.L_cls, rec.val_f1_micro)
        if not trainable and val_samples:
            # nothing changes between epochs; replicate the first record
            for e in range(epoch + 1, tc.epochs + 1):
                history.append(EpochRecord(e, 0.0, 0.0, rec.val_f1_micro, rec.val_f1_macro))
            break
    if best[1] is not None:
        model.load_state_dict(best[1])
    if history_path is not None:
        write_history(history, history_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, state)
    return model, history
