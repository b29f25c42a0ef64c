"""Open-set accuracy (OS, OS*, UNK, H), ECE and reliability bins."""
import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics


@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    accuracy: float = None
    confidence: float = None


@dataclass
class MetricsReport:
    per_class: list = field(default_factory=list)
    OS: float = 0.0
    OS_star: float = 0.0
    UNK: float = 0.0
    H: float = 0.0
    ECE: float = None
    bins: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_text(self):
        """Flat ``key = value`` report; floats use repr so they parse back exactly."""
        lines = [f"OS = {self.OS!r}", f"OS_star = {self.OS_star!r}",
                 f"UNK = {self.UNK!r}", f"H = {self.H!r}"]
        if self.ECE is not None:
            lines.append(f"ECE = {self.ECE!r}")
        for i, a in enumerate(self.per_class):
            lines.append(f"class_{i}_acc = {a!r}")
        for k in sorted(self.extra):
            lines.append(f"{k} = {self.extra[k]!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_text(text):
        out = {}
        for line in text.splitlines():
            if "=" in line and not line.startswith("#"):
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
        return out


def harmonic(os_star, unk):
    return 2.0 * os_star * unk / (os_star + unk) if os_star + unk > 0 else 0.0


def open_set_metrics(predictions, truth, C):
    """Per-class recall over ``C`` known classes plus unknown (label ``C``)."""
    predictions = np.asarray(predictions, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if predictions.shape != truth.shape:
        raise ValueError("predictions and truth differ in length")
    per_class = []
    for c in range(C + 1):
        sel = truth == c
        if not sel.any():
            diagnostics.warn("metrics_empty_class", f"class {c} absent from truth")
            per_class.append(float("nan"))
        else:
            per_class.append(float(np.mean(predictions[sel] == c)))
    acc = np.array(per_class)
    known = acc[:C][~np.isnan(acc[:C])]
    os_star = float(known.mean()) if known.size else 0.0
    unk = 0.0 if np.isnan(acc[C]) else float(acc[C])
    present = acc[~np.isnan(acc)]
    os_all = float(present.mean()) if present.size else 0.0
    return MetricsReport(per_class=per_class, OS=os_all, OS_star=os_star, UNK=unk,
                         H=harmonic(os_star, unk))


def bin_index(confidences, n_bins):
    """Bin ``m`` (0-based) covers ``(m/M, (m+1)/M]``; confidence 0 joins bin 0."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.searchsorted(edges, np.asarray(confidences, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def ece(confidences, correct, n_bins=10):
    """Expected calibration error and the reliability bins."""
    conf = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if conf.size == 0:
        raise ValueError("ECE of an empty sample")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if conf.min() < 0 or conf.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_index(conf, n_bins)
    n = conf.size
    total, bins = 0.0, []
    for m in range(n_bins):
        sel = idx == m
        k = int(sel.sum())
        b = ReliabilityBin(m / n_bins, (m + 1) / n_bins, k)
        if k:
            b.accuracy = float(correct[sel].mean())
            b.confidence = float(conf[sel].mean())
            total += k / n * abs(b.accuracy - b.confidence)
        bins.append(b)
    return total, bins


CSV_HEADER = ["lower", "upper", "count", "accuracy", "confidence"]


def reliability_csv(bins):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for b in bins:
        w.writerow([repr(b.lower), repr(b.upper), b.count,
                    "" if b.accuracy is None else repr(b.accuracy),
                    "" if b.confidence is None else repr(b.confidence)])
    return buf.getvalue()


def parse_reliability_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [ReliabilityBin(float(r["lower"]), float(r["upper"]), int(r["count"]),
                           float(r["accuracy"]) if r["accuracy"] else None,
                           float(r["confidence"]) if r["confidence"] else None)
            for r in rows]


def full_report(predictions, truth, confidences, C, n_bins=10):
    """Accuracy metrics plus ECE, where a sample is correct iff its open-set
    prediction equals its open-set truth."""
    report = open_set_metrics(predictions, truth, C)
    report.ECE, report.bins = ece(confidences, np.asarray(predictions) == np.asarray(truth), n_bins)
    return report
