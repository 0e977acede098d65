"""Central finite-difference checks of tape gradients."""
import numpy as np

from .tensor import GradientError, backward, branch_log, fresh_tape, no_grad

# If a probe at x +/- h flips a ReLU mask or a max-pool winner, the central
# difference straddles a kink and says nothing about the gradient at x.  The
# probe is then repeated with h shrunk by 10x, at most this many times.
MAX_REFINEMENTS = 3


def _relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


def _scalar(out):
    if out.data.size != 1:
        raise GradientError("grad_check needs a scalar-valued function, got shape %s" % (out.shape,))
    return float(out.data.reshape(()))


def _probe(f):
    with branch_log() as log:
        value = _scalar(f())
    return value, log


def grad_check(f, x, step=1e-4):
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    ``f`` maps a tensor to a scalar tensor; ``x`` should hold 64-bit values.
    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    return grad_check_params(lambda: f(x), [x], step=step)[0]


def grad_check_params(f, params, step=1e-4, max_coords=None, seed=0, stats=None):
    """Check the gradient of the closure ``f()`` with respect to each tensor in ``params``.

    Returns one max relative error per tensor.  With ``max_coords``, only a
    seeded random subset of that many coordinates is probed per tensor.
    ``stats``, if a dict, receives probe and kink-refinement counts.
    """
    saved = [(p, p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    counts = {"probes": 0, "refined": 0}
    try:
        with fresh_tape():
            with branch_log() as reference:
                out = f()
            _scalar(out)
            backward(out)
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        rng = np.random.default_rng(seed)
        errors = []
        with no_grad():
            for p, a in zip(params, analytic):
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                worst = 0.0
                for i in idx:
                    orig = flat[i]
                    h = step
                    for attempt in range(MAX_REFINEMENTS + 1):
                        flat[i] = orig + h
                        up, up_log = _probe(f)
                        flat[i] = orig - h
                        down, down_log = _probe(f)
                        flat[i] = orig
                        if up_log == reference and down_log == reference:
                            break
                        if attempt < MAX_REFINEMENTS:
                            counts["refined"] += 1
                            h /= 10
                    counts["probes"] += 1
                    numeric = (up - down) / (2 * h)
                    worst = max(worst, float(_relative_error(a.reshape(-1)[i], numeric)))
                errors.append(worst)
        if stats is not None:
            stats.update(counts)
        return errors
    finally:
        for p, rg, g in saved:
            p.requires_grad = rg
            p.grad = g
