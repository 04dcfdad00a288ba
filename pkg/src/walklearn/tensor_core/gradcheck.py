"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward


@dataclass
class ParamCheck:
    name: str
    rel_error: float
    max_elem_error: float
    checked: int
    skipped: int


@dataclass
class GradCheckReport:
    tolerance: float
    params: list = field(default_factory=list)

    @property
    def passed(self):
        return all(p.rel_error < self.tolerance for p in self.params)

    @property
    def failures(self):
        return [p.name for p in self.params if p.rel_error >= self.tolerance]

    @property
    def worst(self):
        return max((p.rel_error for p in self.params), default=0.0)

    def __str__(self):
        lines = [f"grad_check tol={self.tolerance:g} {'PASS' if self.passed else 'FAIL'}"]
        for p in self.params:
            flag = "ok " if p.rel_error < self.tolerance else "BAD"
            lines.append(f"  {flag} {p.name:<16} rel={p.rel_error:.2e} "
                         f"elem={p.max_elem_error:.2e} n={p.checked} skipped={p.skipped}")
        return "\n".join(lines)


def _evaluate(fn, params):
    tape = Tape(track_kinks=True)
    tensors = {k: tape.param(k, v) for k, v in params.items()}
    loss = fn(tape, tensors)
    return tape, loss


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(fn, params, tolerance=1e-4, h=1e-4, max_elements=None, seed=0):
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn(tape, tensors)`` builds a scalar loss from the parameter tensors.
    The error of a parameter tensor is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``
    taken over the vector of its checked elements. An element is skipped when its
    +h / -h evaluations fall on a different side of a relu, pooling or
    zero-distance kink than the unperturbed pass, or land within 1e-6 of one.
    ``max_elements`` caps the number of elements probed per tensor, chosen with
    a seeded generator.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape, loss = _evaluate(fn, params)
    analytic = {k: g.copy() for k, g in backward(tape, loss).items()}
    base_pattern = tape.pattern
    base_near = tape.near_kink
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)

    for name, value in params.items():
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        g_ad, g_fd = [], []
        skipped = 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            tp, lp = _evaluate(fn, params)
            flat[i] = orig - h
            tm, lm = _evaluate(fn, params)
            flat[i] = orig
            crossed = tp.pattern != base_pattern or tm.pattern != base_pattern
            if crossed or ((tp.near_kink or tm.near_kink) and not base_near):
                skipped += 1
                continue
            g_fd.append((float(lp.data) - float(lm.data)) / (2 * h))
            g_ad.append(float(analytic[name].reshape(-1)[i]))
        g_ad, g_fd = np.array(g_ad), np.array(g_fd)
        if g_ad.size:
            rel = float(np.linalg.norm(g_ad - g_fd)
                        / max(np.linalg.norm(g_ad), np.linalg.norm(g_fd), 1e-8))
            elem = max(_rel(a, b) for a, b in zip(g_ad, g_fd))
        else:
            rel = elem = 0.0
        report.params.append(ParamCheck(name, rel, elem, int(g_ad.size), skipped))
    return report
