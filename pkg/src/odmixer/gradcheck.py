"""Finite-difference oracle for analytic gradients.

Central differences at double precision are the independent check for
every backward implementation: (f(x+h) - f(x-h)) / 2h per coordinate, with
a per-coordinate step h_i = step * max(1, |x_i|).
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .errors import NumericError, ShapeError

ABS_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    coords: int
    worst_input: int = -1
    worst_index: tuple = ()

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {verdict}: max_rel_err={self.max_rel_err:.3e} "
            f"over {self.coords} coordinates"
        )


def _scalar_value(fn, inputs):
    out = fn(*inputs)
    if out.shape != ():
        raise ShapeError(f"grad_check: fn must be scalar-valued, got shape {out.shape}")
    value = float(out.data)
    if not np.isfinite(value):
        raise NumericError("grad_check: fn returned a non-finite value")
    return value


def grad_check(fn, inputs, step=1e-5, tol=1e-4):
    """Compare analytic gradients of ``fn`` against central differences.

    ``inputs`` is a sequence of tensors; gradients are checked for every
    input with ``requires_grad``.  Inputs should be float64: at float32
    the difference quotient itself is too noisy to certify anything.

    A coordinate passes when the absolute difference is below
    ``ABS_FLOOR`` or the relative difference is within ``tol``.
    """
    inputs = list(inputs)
    checked = [t for t in inputs if t.requires_grad]
    if not checked:
        raise ShapeError("grad_check: no input requires a gradient")

    for t in checked:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    if out.shape != ():
        raise ShapeError(f"grad_check: fn must be scalar-valued, got shape {out.shape}")
    tape.backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros(t.shape, dtype=t.dtype)
        for t in checked
    ]

    max_rel = 0.0
    worst_input, worst_index = -1, ()
    coords = 0
    for which, t in enumerate(checked):
        flat = t.data.reshape(-1)
        ana = analytic[which].reshape(-1)
        for i in range(flat.size):
            coords += 1
            orig = flat[i]
            h = step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            f_plus = _scalar_value(fn, inputs)
            flat[i] = orig - h
            f_minus = _scalar_value(fn, inputs)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            if not np.isfinite(numeric):
                raise NumericError("grad_check: non-finite finite-difference quotient")
            diff = abs(float(ana[i]) - numeric)
            if diff <= ABS_FLOOR:
                continue
            rel = diff / max(abs(float(ana[i])), abs(numeric))
            if rel > max_rel:
                max_rel = rel
                worst_input = which
                worst_index = np.unravel_index(i, t.shape) if t.ndim else ()

    return GradCheckReport(
        max_rel_err=max_rel,
        passed=max_rel <= tol,
        coords=coords,
        worst_input=worst_input,
        worst_index=worst_index,
    )
