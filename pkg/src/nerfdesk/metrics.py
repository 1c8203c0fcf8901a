"""Image and geometry quality metrics plus their CSV report format.

All image metrics take float arrays of equal shape and a declared dynamic
range MAX (1.0 for float renders, 255.0 for 8-bit provenance).  SSIM uses
global whole-image statistics rather than a sliding window.
"""

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from . import backend


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty images")
    return a, b


def mse(a, b):
    """Mean squared difference over every pixel channel."""
    a, b = _pair(a, b)
    d = a - b
    return float((d * d).mean())


def psnr(a, b, max_val=1.0):
    """10 log10(MAX^2 / MSE) in dB; infinite for identical images."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / m)


def ssim(a, b, max_val=1.0, c1=None, c2=None):
    """Structural similarity from whole-image statistics.

    Population (not sample) moments; stabilizers default to
    (0.01 MAX)^2 and (0.03 MAX)^2.
    """
    a, b = _pair(a, b)
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    if c1 is None:
        c1 = (0.01 * max_val) ** 2
    if c2 is None:
        c2 = (0.03 * max_val) ** 2
    mu_a = float(a.mean())
    mu_b = float(b.mean())
    var_a = float(((a - mu_a) ** 2).mean())
    var_b = float(((b - mu_b) ** 2).mean())
    cov = float(((a - mu_a) * (b - mu_b)).mean())
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def chamfer(p, q):
    """Symmetric mean nearest-neighbor distance, unsquared Euclidean."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != 3 or q.shape[1] != 3:
        raise ValueError("point clouds must be (N, 3)")
    if len(p) == 0 or len(q) == 0:
        raise ValueError("point clouds must be nonempty")
    return float(backend.chamfer_nn(p, q).mean()
                 + backend.chamfer_nn(q, p).mean())


def fidelity(a, b, max_val=1.0):
    """(mean absolute difference, its higher-is-better rescaling).

    The second value is 1 - mae / MAX so that identical images score 1.
    """
    a, b = _pair(a, b)
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mae = float(np.abs(a - b).mean())
    return mae, 1.0 - mae / max_val


@dataclass
class MetricsReport:
    """One evaluated view's scores, tagged by run, variant, and view."""

    run: str
    variant: str
    view: str
    mse: float
    psnr_db: float
    ssim: float
    chamfer: float
    fidelity_mae: float
    fidelity_sim: float


CSV_HEADER = ("run", "variant", "view", "mse", "psnr_db", "ssim", "chamfer",
              "fidelity_mae", "fidelity_sim")

_VALUE_COLUMNS = CSV_HEADER[3:]


def image_report(run, variant, view, pred, gt, chamfer_value, max_val=1.0):
    """Score one view against its reference image and pre-computed Chamfer."""
    mae, sim = fidelity(pred, gt, max_val)
    return MetricsReport(
        run=str(run), variant=str(variant), view=str(view),
        mse=mse(pred, gt), psnr_db=psnr(pred, gt, max_val),
        ssim=ssim(pred, gt, max_val),
        chamfer=float(chamfer_value), fidelity_mae=mae, fidelity_sim=sim,
    )


def mean_report(reports):
    """Arithmetic mean over the value columns, tagged view=MEAN."""
    if not reports:
        raise ValueError("no reports to average")
    first = reports[0]
    n = len(reports)
    vals = {c: sum(getattr(r, c) for r in reports) / n for c in _VALUE_COLUMNS}
    return MetricsReport(run=first.run, variant=first.variant, view="MEAN",
                         **vals)


def _fmt(x):
    if math.isinf(x):
        return "inf"
    return repr(float(x))


def write_metrics_csv(path, reports):
    """One row per report plus a trailing MEAN row."""
    rows = list(reports) + [mean_report(list(reports))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.run, r.variant, r.view]
                       + [_fmt(getattr(r, c)) for c in _VALUE_COLUMNS])


def read_metrics_csv(path):
    """Parse a metrics CSV back into MetricsReport rows (MEAN included)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected metrics header in {path}")
        for row in reader:
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"malformed metrics row in {path}: {row!r}")
            vals = [float(v) for v in row[3:]]
            out.append(MetricsReport(row[0], row[1], row[2], *vals))
    return out
