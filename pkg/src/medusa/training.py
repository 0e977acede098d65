"""Adam, segmentation pretraining of the global module, and alternating training."""
import contextlib
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ConfigError, GradientError, Tensor, backward, fresh_tape, no_grad

log = logging.getLogger(__name__)

PAPER_LR = 0.00008


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    cadence: int = 1
    seed: int = 0
    attention_enabled: bool = True
    pretrain_epochs: int = 10
    pretrain_lr: float = None  # None: same as lr

    def __post_init__(self):
        if self.pretrain_lr is not None and self.pretrain_lr <= 0:
            raise ConfigError("pretrain_lr must be positive")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("lr, batch_size and epoch counts must be positive")
        if self.cadence < 1:
            raise ConfigError("cadence must be >= 1")


def paper_preset(**overrides):
    """Optimizer settings reported for the full-scale model."""
    values = dict(lr=PAPER_LR, batch_size=16)
    values.update(overrides)
    return TrainConfig(**values)


class Adam:
    """Bias-corrected Adam; frozen parameters are skipped entirely.

    Each parameter keeps its own step count, so a parameter that sat frozen
    for a while resumes with the right bias correction.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.steps = {p.name: 0 for p in self.params}
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        for p in self.params:
            if p.frozen:
                continue
            if p.grad is None:
                raise GradientError("parameter %r has no gradient; run backward before stepping" % p.name)
            g = p.grad.astype(p.dtype, copy=False)
            k = self.steps[p.name] + 1
            self.steps[p.name] = k
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** k)
            v_hat = v / (1 - self.beta2 ** k)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def adam_step(state, params=None, grads=None):
    """Functional wrapper: optionally install ``grads`` onto ``params``, then step."""
    if grads is not None:
        for p, g in zip(params, grads):
            p.grad = None if g is None else np.asarray(g)
    state.step()


def set_frozen(params, frozen):
    for p in params:
        p.frozen = frozen


@contextlib.contextmanager
def preserved_bn(states):
    """Restore the given batch-norm states on exit."""
    saved = {k: s.copy() for k, s in states.items()}
    try:
        yield
    finally:
        for k, s in states.items():
            src = saved[k]
            s.running_mean, s.running_var, s.num_batches = src.running_mean, src.running_var, src.num_batches


def _bn_ready(states):
    return all(s.initialized for s in states.values())


def _check_nonempty(ds, what):
    if ds is None or len(ds) == 0:
        raise ConfigError("%s dataset is empty" % what)


# ---------------------------------------------------------------------------
# segmentation pretraining


def segmentation_scores(module, ds, batch_size=32):
    """Mean pixel BCE and pixel accuracy (threshold 0.5) of ``sigmoid(A_G)`` against the masks."""
    states = module.bn_states()
    mode = "eval" if _bn_ready(states) else "train"
    total_bce, correct, count = 0.0, 0, 0
    with no_grad(), preserved_bn(states):
        for images, _, masks, _ in ds.batches(batch_size):
            x = Tensor._wrap(images.astype(module.dtype))
            logits = module.forward(x, mode)
            total_bce += float(ops.loss(logits, masks, "bce").data) * masks.size
            correct += int(np.sum((logits.data > 0) == (masks > 0.5)))
            count += masks.size
    return total_bce / count, correct / count


def pretrain_global(module, train_ds, val_ds, config, on_epoch=None):
    """Fit the global module to the region masks by pixel-wise BCE.

    Returns the per-epoch history; epoch 0 holds the scores at
    initialisation.  The module is updated in place.
    """
    _check_nonempty(train_ds, "segmentation")
    if not train_ds.has_masks:
        raise ConfigError("segmentation pretraining needs masks")
    history = []
    if config.pretrain_epochs == 0:
        return history
    val = val_ds if val_ds is not None and len(val_ds) else train_ds
    bce, acc = segmentation_scores(module, val)
    history.append({"epoch": 0, "phase": "pretrain", "loss": float("nan"), "val_bce": bce, "val_pixel_accuracy": acc})
    params = module.parameters()
    set_frozen(params, False)
    opt = Adam(params, lr=config.lr if config.pretrain_lr is None else config.pretrain_lr)
    for epoch in range(1, config.pretrain_epochs + 1):
        total, seen = 0.0, 0
        for images, _, masks, _ in train_ds.batches(config.batch_size, shuffle=True, seed=_epoch_seed(config.seed, epoch, 1)):
            x = Tensor._wrap(images.astype(module.dtype))
            with fresh_tape():
                loss = ops.loss(module.forward(x, "train"), masks, "bce")
                backward(loss)
            opt.step()
            opt.zero_grad()
            total += float(loss.data) * len(images)
            seen += len(images)
        bce, acc = segmentation_scores(module, val)
        row = {"epoch": epoch, "phase": "pretrain", "loss": total / seen, "val_bce": bce, "val_pixel_accuracy": acc}
        history.append(row)
        log.info("pretrain epoch %d: loss %.4f val bce %.4f pixel acc %.4f", epoch, total / seen, bce, acc)
        if on_epoch is not None:
            on_epoch(epoch, module, row, opt)
    return history


# ---------------------------------------------------------------------------
# classification training


def _epoch_seed(seed, epoch, stream=0):
    return [int(seed), int(stream), int(epoch)]


def phase_for_epoch(epoch, cadence):
    """'A' trains the backbone, 'B' the attention; epochs are 1-based and start in A."""
    return "A" if ((epoch - 1) // cadence) % 2 == 0 else "B"


def warm_bn_stats(bundle, ds, batch_size, attention_enabled=True):
    """Populate never-used batch-norm statistics with one no-grad train-mode pass."""
    if _bn_ready(bundle.bn_states()):
        return
    images = next(ds.batches(batch_size))[0]
    with no_grad():
        bundle.forward(Tensor._wrap(images.astype(bundle.dtype)), attention_enabled, "train", "train")


def classification_accuracy(bundle, ds, attention_enabled=True, batch_size=64):
    correct = 0
    with no_grad():
        for images, labels, _, _ in ds.batches(batch_size):
            logits, _ = bundle.forward(Tensor._wrap(images.astype(bundle.dtype)), attention_enabled)
            correct += int(np.sum(predict(logits.data) == labels))
    return correct / len(ds)


def predict(logits):
    """Argmax over classes; ``np.argmax`` keeps the first maximum, so ties go to class 0."""
    return np.argmax(logits, axis=1)


def train_epoch(bundle, ds, opt, config, epoch, backbone_mode, attention_mode):
    total, seen = 0.0, 0
    for images, labels, _, _ in ds.batches(config.batch_size, shuffle=True, seed=_epoch_seed(config.seed, epoch)):
        x = Tensor._wrap(images.astype(bundle.dtype))
        with fresh_tape():
            logits, _ = bundle.forward(x, config.attention_enabled, backbone_mode, attention_mode)
            loss = ops.loss(logits, labels, "softmax_ce")
            backward(loss)
        opt.step()
        opt.zero_grad()
        total += float(loss.data) * len(labels)
        seen += len(labels)
    return total / seen


def alternating_train(bundle, train_ds, val_ds, config, on_epoch=None, optimizer=None):
    """Train a bundle for ``config.epochs`` epochs and return ``(optimizer, log)``.

    MEDUSA bundles alternate: phase A freezes the global module and heads
    while the backbone learns, phase B freezes the backbone while the
    attention learns.  Gradients flow through frozen parts in both phases;
    frozen parameters just do not move, and their batch-norm layers run on
    running statistics.  Plain and SE bundles train every parameter.
    """
    _check_nonempty(train_ds, "training")
    groups = bundle.groups()
    alternate = bundle.kind == "medusa" and config.attention_enabled
    if alternate and config.cadence >= config.epochs:
        warnings.warn("cadence %d >= %d epochs: training degenerates to a single phase" % (config.cadence, config.epochs))
    opt = optimizer or Adam(list(bundle.parameters().values()), lr=config.lr)
    warm_bn_stats(bundle, train_ds, config.batch_size, config.attention_enabled)
    history = []
    try:
        for epoch in range(1, config.epochs + 1):
            if alternate:
                phase = phase_for_epoch(epoch, config.cadence)
                set_frozen(groups["backbone"], phase == "B")
                set_frozen(groups["attention"], phase == "A")
            else:
                phase = "joint"
                set_frozen(groups["backbone"], False)
                # without attention in the loop the heads would see no gradient
                set_frozen(groups["attention"], not config.attention_enabled)
            bmode = "eval" if phase == "B" else "train"
            amode = "train" if phase == "B" else "eval"
            if bundle.kind != "medusa":
                amode = "eval"
            loss = train_epoch(bundle, train_ds, opt, config, epoch, bmode, amode)
            val_acc = classification_accuracy(bundle, val_ds, config.attention_enabled) if val_ds is not None and len(val_ds) else float("nan")
            row = {"epoch": epoch, "phase": phase, "loss": loss, "val_accuracy": val_acc}
            history.append(row)
            log.info("epoch %d phase %s: loss %.4f val acc %.4f", epoch, phase, loss, val_acc)
            if on_epoch is not None:
                on_epoch(epoch, bundle, row, opt)
    finally:
        set_frozen(list(bundle.parameters().values()), False)
    return opt, history
