"""Central-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from allconv_emg.nn.rng import RngStream


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    errors: dict = field(default_factory=dict)  # parameter name -> relative error
    frozen_grad_norms: dict = field(default_factory=dict)  # frozen name -> |analytic grad|_max

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and all(v == 0.0 for v in self.frozen_grad_norms.values())

    def summary(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} (worst: {worst}, tol {self.tolerance:g})"


# gradients below this magnitude are roundoff-level, e.g. a conv bias feeding
# train-mode batch norm, so they are compared on an absolute scale
ZERO_FLOOR = 1e-6


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), ZERO_FLOOR)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def finite_difference_check(
    fragment,
    x: np.ndarray,
    tolerance: float = 1e-3,
    h: float = 1e-4,
    max_coords: int = 24,
    seed: int = 0,
    check_input: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients of ``fragment`` against central differences.

    ``fragment`` must expose ``parameters()``, ``forward(x, mode)`` and
    ``backward(dout)`` (returning the input gradient), work in channels-last
    layout, and be deterministic across calls. Everything is promoted to
    64-bit first. The scalar probed is ``sum(out * R)`` for a fixed random
    ``R``. Relative error per tensor is ``max|a - n| / max(|a|, |n|)`` over a
    random sample of at most ``max_coords`` coordinates, with the
    denominator floored at ``ZERO_FLOOR``.
    """
    if hasattr(fragment, "to_dtype"):
        fragment.to_dtype(np.float64)
    x = np.asarray(x, dtype=np.float64).copy()
    rng = RngStream(seed, "gradcheck")
    out = fragment.forward(x, "train")
    proj = rng.normal(0.0, 1.0, out.shape)

    def objective():
        return float(np.sum(fragment.forward(x, "train") * proj))

    for p in fragment.parameters():
        p.zero_grad()
    fragment.forward(x, "train")
    dx = fragment.backward(proj.copy())

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    targets = [(p.name, p.value, p.grad.copy(), p.trainable) for p in fragment.parameters()]
    if check_input and dx is not None:
        targets.append(("input", x, dx, True))
    for name, value, analytic, trainable in targets:
        if not trainable:
            report.frozen_grad_norms[name] = float(np.max(np.abs(analytic))) if analytic.size else 0.0
            continue
        flat = value.reshape(-1)
        idx = rng.permutation(flat.size)[:max_coords]
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = objective()
            flat[i] = orig - h
            down = objective()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        err = _rel_error(analytic.reshape(-1)[idx], numeric)
        report.errors[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report
