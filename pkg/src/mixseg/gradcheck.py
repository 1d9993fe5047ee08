"""Finite-difference oracle for analytic gradients."""

from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .errors import OracleError
from .functional import record_decisions
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    @property
    def flagged(self):
        return [k for k, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def passed(self):
        return not self.flagged

    @property
    def skip_fraction(self):
        total = sum(self.checked.values()) + sum(self.skipped.values())
        return sum(self.skipped.values()) / total if total else 0.0

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self):
        lines = [f"grad_check tolerance={self.tolerance:g} passed={self.passed}"]
        for k, e in self.max_rel_error.items():
            mark = "FAIL" if k in self.flagged else "ok"
            skipped = f", {self.skipped[k]} kink-skipped" if self.skipped.get(k) else ""
            lines.append(f"  {k}: {e:.3e} {mark}{skipped}")
        return "\n".join(lines)


def relative_error(analytic, numeric, scale=0.0):
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``, reduced by max.

    ``floor`` is 1e-3 of the largest gradient magnitude in the tensor (or
    of ``scale`` when that is larger, for subsampled checks), so entries
    that are tiny compared with the rest are judged on an absolute scale
    instead of amplifying rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(scale, np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    floor = 1e-3 * scale + 1e-12
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max(initial=0.0))


def _named(inputs):
    if isinstance(inputs, dict):
        return list(inputs.items())
    return [(f"input{i}", t) for i, t in enumerate(inputs)]


def _same_pieces(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn, inputs, tolerance=1e-5, h=1e-4, dtype=np.float64, entries=None, seed=0, screen_kinks=False):
    """Compare analytic gradients of ``fn()`` with central differences.

    ``fn`` takes no arguments and closes over the tensors in ``inputs``
    (a sequence or a name->Tensor dict); it must return a scalar tensor.
    The inputs are converted to ``dtype`` in place and perturbed one entry
    at a time. With ``entries`` set, only that many seeded random entries
    per input are perturbed (all of them if the input is smaller); the
    relative-error floor still uses the whole analytic gradient.

    With ``screen_kinks`` the ReLU and max-pool selections are recorded at
    ``x - h`` and ``x + h``; an entry where they differ lies within ``h``
    of a point where ``fn`` is not differentiable, so central differences
    say nothing about the gradient there and the entry is counted in
    ``report.skipped`` instead of being compared. Raises
    :class:`OracleError` if two evaluations at the same point disagree.
    """
    named = _named(inputs)
    for _, t in named:
        if not isinstance(t, Tensor):
            raise TypeError("grad_check inputs must be Tensors")
        t.data = np.array(t.data, dtype=dtype)
        t.requires_grad = True
        t.grad = None

    with no_grad():
        f0 = float(fn().data)
        f1 = float(fn().data)
    if f0 != f1 or not np.isfinite(f0):
        raise OracleError(f"closure is not deterministic or not finite: {f0!r} vs {f1!r}")

    loss = fn()
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in named}

    recorder = record_decisions if screen_kinks else nullcontext
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    with no_grad():
        for name, t in named:
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if entries is not None and entries < flat.size:
                idx = np.sort(rng.choice(flat.size, size=entries, replace=False))
            numeric = np.empty(idx.size)
            smooth = np.ones(idx.size, dtype=bool)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                with recorder() as plus:
                    fp = float(fn().data)
                flat[i] = orig - h
                with recorder() as minus:
                    fm = float(fn().data)
                flat[i] = orig
                numeric[j] = (fp - fm) / (2.0 * h)
                if screen_kinks:
                    smooth[j] = _same_pieces(plus, minus)
            a = analytic[name].reshape(-1)
            report.checked[name] = int(smooth.sum())
            report.skipped[name] = int(idx.size - smooth.sum())
            report.max_rel_error[name] = relative_error(a[idx][smooth], numeric[smooth],
                                                        scale=np.abs(a).max(initial=0.0))
    return report
