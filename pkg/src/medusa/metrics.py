"""Confusion-matrix metrics, attention mass, and evaluation reports."""
import csv
import io
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .data import apply_seg_ablation
from .tensor import ConfigError, MedusaError, ShapeError, Tensor, no_grad
from .training import predict


class MetricError(MedusaError, ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Binary counts; class 1 is the positive (disease) class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise MetricError("%s must be a non-negative integer, got %r" % (name, v))
            setattr(self, name, int(v))

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, labels, preds):
        labels = np.asarray(labels)
        preds = np.asarray(preds)
        if labels.shape != preds.shape:
            raise ShapeError("labels %s and predictions %s differ in shape" % (labels.shape, preds.shape))
        return cls(
            tp=int(np.sum((preds == 1) & (labels == 1))),
            fp=int(np.sum((preds == 1) & (labels == 0))),
            tn=int(np.sum((preds == 0) & (labels == 0))),
            fn=int(np.sum((preds == 0) & (labels == 1))),
        )


@dataclass
class Metrics:
    """Percentages; a ratio with a zero denominator is NaN and named in ``undefined``."""

    sensitivity: float
    ppv: float
    accuracy: float
    undefined: tuple = ()

    def rounded(self):
        return tuple(round_half_up(v) for v in (self.sensitivity, self.ppv, self.accuracy))

    def __iter__(self):
        return iter((self.sensitivity, self.ppv, self.accuracy))


def round_half_up(value, places=1):
    """Round like the published tables do (0.25 -> 0.3), not banker's rounding."""
    if math.isnan(value):
        return value
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def _ratio(num, den):
    return math.nan if den == 0 else 100.0 * num / den


def classification_metrics(cm):
    if cm.total == 0:
        raise MetricError("confusion matrix is empty")
    undefined = []
    if cm.tp + cm.fn == 0:
        undefined.append("sensitivity")
    if cm.tp + cm.fp == 0:
        undefined.append("ppv")
    return Metrics(
        sensitivity=_ratio(cm.tp, cm.tp + cm.fn),
        ppv=_ratio(cm.tp, cm.tp + cm.fp),
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
        undefined=tuple(undefined),
    )


def attention_mass(sigma_a_g, mask):
    """Share of the attention map's total weight that falls inside ``mask``."""
    att = np.asarray(sigma_a_g.data if isinstance(sigma_a_g, Tensor) else sigma_a_g, dtype=np.float64)
    mask = np.asarray(mask)
    if att.shape != mask.shape:
        raise ShapeError("attention map %s and mask %s differ in shape" % (att.shape, mask.shape))
    total = att.sum()
    if not total > 0:
        raise MetricError("attention map has no positive mass")
    return float(att[mask > 0.5].sum() / total)


@dataclass
class EvalReport:
    variant: str
    attention_enabled: bool
    seg_ablation: str
    confusion: ConfusionMatrix
    metrics: Metrics
    attention_mass: float = math.nan
    mask_fraction: float = math.nan
    predictions: list = field(default_factory=list)  # (index, path, label, prediction, p_positive)

    @property
    def attention_active(self):
        return self.variant in ("medusa", "se") and self.attention_enabled

    def summary_rows(self):
        sens, ppv, acc = self.metrics.rounded()
        cm = self.confusion
        return [
            ("variant", self.variant),
            ("attention", "enabled" if self.attention_active else ("disabled" if self.variant in ("medusa", "se") else "absent")),
            ("seg_ablation", self.seg_ablation or "none"),
            ("samples", cm.total),
            ("tp", cm.tp), ("fn", cm.fn), ("fp", cm.fp), ("tn", cm.tn),
            ("sensitivity", _fmt(sens, "sensitivity" in self.metrics.undefined)),
            ("ppv", _fmt(ppv, "ppv" in self.metrics.undefined)),
            ("accuracy", _fmt(acc, False)),
            ("attention_mass", _fmt4(self.attention_mass)),
            ("mask_fraction", _fmt4(self.mask_fraction)),
        ]

    def to_text(self):
        rows = self.summary_rows()
        width = max(len(k) for k, _ in rows)
        lines = ["%-*s  %s" % (width, k, v) for k, v in rows]
        cm = self.confusion
        lines += ["", "            pred +  pred -", "actual +  %7d %7d" % (cm.tp, cm.fn), "actual -  %7d %7d" % (cm.fp, cm.tn)]
        return "\n".join(lines) + "\n"

    def summary_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(self.summary_rows())
        return buf.getvalue()

    def predictions_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "image", "label", "prediction", "p_positive"])
        for i, path, label, pred, p in self.predictions:
            w.writerow([i, path, label, pred, "%.6f" % p])
        return buf.getvalue()


def _fmt(v, undefined):
    return "undefined" if undefined or math.isnan(v) else "%.1f" % v


def _fmt4(v):
    return "n/a" if math.isnan(v) else "%.4f" % v


def evaluate(bundle, dataset, attention_enabled=True, seg_ablation=None, batch_size=64):
    """Eval-mode classification of ``dataset``; attention mass needs masks and a global map."""
    if len(dataset) == 0:
        raise ConfigError("evaluation dataset is empty")
    if seg_ablation is not None and not dataset.has_masks:
        raise ConfigError("--seg-ablation %s needs masks in the manifest" % seg_ablation)
    labels, preds, probs, idxs = [], [], [], []
    att_sum, mask_sum, n_att = 0.0, 0.0, 0
    with no_grad():
        for images, y, masks, idx in dataset.batches(batch_size):
            if seg_ablation is not None:
                images = apply_seg_ablation(images, masks, seg_ablation)
            logits, record = bundle.forward(Tensor._wrap(images.astype(bundle.dtype)), attention_enabled)
            z = logits.data.astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            labels.append(y)
            preds.append(predict(logits.data))
            probs.append(p[:, 1] if p.shape[1] > 1 else p[:, 0])
            idxs.append(idx)
            if record is not None and masks is not None:
                sigma = record.sigma_a_g.data
                for k in range(len(y)):
                    att_sum += attention_mass(sigma[k], masks[k])
                    mask_sum += float(np.mean(masks[k] > 0.5))
                    n_att += 1
    labels = np.concatenate(labels)
    preds = np.concatenate(preds)
    probs = np.concatenate(probs)
    idxs = np.concatenate(idxs)
    cm = ConfusionMatrix.from_predictions(labels, preds)
    paths = dataset.paths or [""] * len(dataset)
    table = [(int(i), paths[i], int(l), int(q), float(p)) for i, l, q, p in zip(idxs, labels, preds, probs)]
    return EvalReport(
        variant=bundle.kind,
        attention_enabled=bool(attention_enabled),
        seg_ablation=seg_ablation,
        confusion=cm,
        metrics=classification_metrics(cm),
        attention_mass=att_sum / n_att if n_att else math.nan,
        mask_fraction=mask_sum / n_att if n_att else math.nan,
        predictions=table,
    )
