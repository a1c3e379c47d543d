"""Central finite-difference check of analytic gradients.

Both sides run in float64: parameters are promoted for the duration of the
check and restored afterwards, so the comparison measures the backward
formulas rather than float32 rounding.

ReLU and max-pool are piecewise; a step of h can cross a switch point and
the central difference then measures a chord, not the derivative. With
``freeze_kinks`` (default) the switch choices of the unperturbed forward pass
are replayed during the perturbed passes, so the finite difference is taken
on the smooth piece that contains the base point.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import KinkRecorder, backward, recording_kinks


@dataclass
class GradcheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-3
    checked: int = 0

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self):
        return self.worst < self.tolerance

    def lines(self):
        out = [f"{name}: max_rel_error={err:.3e}" for name, err in sorted(self.max_rel_error.items())]
        out.append(f"overall: max_rel_error={self.worst:.3e} tol={self.tolerance:g} "
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(loss_fn, params, tolerance=1e-3, h=1e-3, group_of=None, max_entries=None, seed=0,
              freeze_kinks=True):
    """Compare backward() against central differences for every entry of ``params``.

    ``loss_fn`` is a zero-argument closure returning a scalar Tensor; it must be
    deterministic. ``params`` is a list of tensors with ``requires_grad``.
    ``group_of(param)`` names the report bucket (default: the Parameter group).
    ``max_entries`` optionally subsamples entries per tensor.
    """
    if group_of is None:
        group_of = lambda p: getattr(p, "group", "input")  # noqa: E731
    originals = [p.data for p in params]
    report = GradcheckReport(tolerance=tolerance)
    rng = np.random.default_rng(seed)
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = np.zeros_like(p.data)
        recorder = KinkRecorder() if freeze_kinks else None
        with recording_kinks(recorder):
            loss = loss_fn()
        backward(loss)
        analytic = [np.array(p.grad, dtype=np.float64) for p in params]
        if recorder is not None:
            recorder.replay()

        def evaluate():
            if recorder is not None:
                recorder.cursor = 0
            with recording_kinks(recorder):
                return float(loss_fn().data)

        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            worst = 0.0
            for i in entries:
                saved = flat[i]
                flat[i] = saved + h
                up = evaluate()
                flat[i] = saved - h
                down = evaluate()
                flat[i] = saved
                numeric = (up - down) / (2 * h)
                worst = max(worst, float(relative_error(grad.reshape(-1)[i], numeric)))
                report.checked += 1
            name = group_of(p)
            report.max_rel_error[name] = max(report.max_rel_error.get(name, 0.0), worst)
    finally:
        for p, data in zip(params, originals):
            p.data = data
            p.grad = np.zeros_like(data) if hasattr(p, "group") else None
    return report


def model_gradcheck(run_cfg, tolerance=1e-3, h=1e-3, batch=4):
    """Check the joint loss of a small two-branch model against finite differences.

    Uses the first ``batch`` training samples of the configured data as the
    batch and one prototype per class; every parameter entry is perturbed.
    """
    from .model import ReMarNet, loss_ce, loss_rm, loss_total
    from .train import load_data, split_for_seed
    from .data import one_hot, select_prototypes

    run_cfg.validate()
    seed = run_cfg.train.seed
    full = load_data(run_cfg.data)
    train, _ = split_for_seed(full, run_cfg.data, seed)
    protos = select_prototypes(train, seed)
    net = ReMarNet(run_cfg.model_for_mode("joint"), seed=seed)
    images = train.images[:batch]
    targets = one_hot(train.labels[:batch], train.num_classes)
    proto_images = protos.images(train)
    a, b = run_cfg.train.a, run_cfg.train.b

    def loss_fn():
        r, p = net.forward(images, proto_images, train=True)
        return loss_total(loss_rm(r, targets), loss_ce(p, targets), a, b)

    return gradcheck(loss_fn, net.parameters(), tolerance=tolerance, h=h)
