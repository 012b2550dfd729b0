"""Restoration quality measures and the evaluation report."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

SUCCESS_THRESHOLD = 5.0


def psnr(x, ref, peak=1.0):
    mse = float(np.mean((np.asarray(x, float) - np.asarray(ref, float)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def error_ratio(x, x_khat, x_k, return_flag=False):
    """``||x - x_khat||^2 / ||x - x_k||^2``.

    ``x_khat`` and ``x_k`` must come from the same non-blind solver, run with
    the estimated and the true kernel. A zero denominator is floored at a
    scale-aware epsilon and flagged.
    """
    x = np.asarray(x, float)
    x_khat = np.asarray(x_khat, float)
    x_k = np.asarray(x_k, float)
    if not (x.shape == x_khat.shape == x_k.shape):
        raise ValueError("x, x_khat and x_k must have the same shape")
    num = float(((x - x_khat) ** 2).sum())
    den = float(((x - x_k) ** 2).sum())
    floor = np.finfo(float).eps * max(float((x * x).sum()), 1.0)
    flagged = den <= floor
    r = num / max(den, floor)
    return (r, flagged) if return_flag else r


def kernel_similarity(k1, k2):
    """Maximum normalized cross-correlation over integer shifts."""
    k1 = np.asarray(k1, float)
    k2 = np.asarray(k2, float)
    n1, n2 = np.linalg.norm(k1), np.linalg.norm(k2)
    if n1 == 0 or n2 == 0:
        return 0.0
    xc = signal.correlate(k1, k2, mode="full", method="direct")
    return float(xc.max() / (n1 * n2))


@dataclass
class EvalRecord:
    name: str
    error_ratio: float
    kernel_similarity: float
    psnr: float
    runtime: float
    flagged: bool = False


@dataclass
class EvalReport:
    records: list = field(default_factory=list)

    def add(self, rec):
        self.records.append(rec)

    @property
    def ratios(self):
        return np.array([r.error_ratio for r in self.records])

    def aggregate(self):
        r = self.ratios
        if len(r) == 0:
            return {"count": 0, "mean_r": math.nan, "worst_r": math.nan,
                    "median_r": math.nan, "success_rate": math.nan}
        return {
            "count": int(len(r)),
            "mean_r": float(r.mean()),
            "worst_r": float(r.max()),
            "median_r": float(np.median(r)),
            "success_rate": float(np.mean(r < SUCCESS_THRESHOLD)),
            "median_kernel_similarity": float(np.median(
                [x.kernel_similarity for x in self.records])),
        }

    FIELDS = ("name", "error_ratio", "kernel_similarity", "psnr", "runtime",
              "flagged")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            for rec in self.records:
                w.writerow([rec.name, repr(rec.error_ratio),
                            repr(rec.kernel_similarity), repr(rec.psnr),
                            repr(rec.runtime), int(rec.flagged)])

    @classmethod
    def read_csv(cls, path):
        rep = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rep.add(EvalRecord(row["name"], float(row["error_ratio"]),
                                   float(row["kernel_similarity"]),
                                   float(row["psnr"]), float(row["runtime"]),
                                   bool(int(row["flagged"]))))
        return rep
