"""Ownership verification: trigger hit indicators, Welch's one-sided
two-sample t-test, and the final ownership decision report.

The t-distribution CDF is evaluated through the regularized incomplete beta
function (continued fraction, absolute error <= 1e-12) so p-values are
bit-stable across platforms. All statistics run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import InputError, VerificationError
from .models import ModelCheckpoint
from .trigger import TriggerSet

_BETA_TOL = 1e-15
_BETA_MAX_ITER = 500


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_TOL:
            return h
    raise VerificationError(f"incomplete beta continued fraction failed for "
                            f"a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise InputError("incomplete beta needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise InputError("incomplete beta needs x in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise InputError("degrees of freedom must be positive")
    if not math.isfinite(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x)
    return tail if t > 0 else 1.0 - tail


@dataclass(frozen=True)
class WelchResult:
    t: float
    p: float            # one-sided, alternative mean(a) > mean(b)
    df: float
    degenerate: bool


def welch_t_test(a, b) -> WelchResult:
    """Welch's unequal-variance t-test with Welch-Satterthwaite df.

    Zero-variance degeneracies are flagged: equal means give p = 0.5,
    unequal means give p = 0 or 1 depending on direction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise VerificationError("both samples need at least 2 observations")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = len(a), len(b)
    se2 = va / na + vb / nb
    if se2 == 0.0:
        if ma == mb:
            return WelchResult(t=float("nan"), p=0.5, df=float("nan"), degenerate=True)
        return WelchResult(t=math.copysign(float("inf"), ma - mb),
                           p=0.0 if ma > mb else 1.0, df=float("nan"), degenerate=True)
    t = (ma - mb) / math.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    return WelchResult(t=float(t), p=student_t_sf(t, df), df=float(df),
                       degenerate=False)


def hit_indicators(model: ModelCheckpoint, trigger: TriggerSet,
                   data: LabeledDataset) -> np.ndarray:
    """Binary vector: 1 where the model's argmax equals the assigned label."""
    rows = data.index_of(trigger.sample_ids)
    preds = model.predict(data.xs[rows])
    return (preds == trigger.assigned_labels).astype(np.int64)


@dataclass(frozen=True)
class VerificationReport:
    suspect_trigger_acc: float
    benign_trigger_acc: float
    suspect_hits: tuple
    benign_hits: tuple
    t_statistic: float
    p_value: float
    significance: float
    owned: bool
    degenerate: bool = False

    def to_text(self) -> str:
        """Stable key-value serialization, diffable across runs."""
        lines = [
            f"suspect_trigger_acc: {self.suspect_trigger_acc:.6f}",
            f"benign_trigger_acc: {self.benign_trigger_acc:.6f}",
            f"t_statistic: {self.t_statistic!r}",
            f"p_value: {self.p_value!r}",
            f"significance: {self.significance!r}",
            f"owned: {str(self.owned).lower()}",
            f"degenerate: {str(self.degenerate).lower()}",
            "suspect_hits: " + "".join(str(h) for h in self.suspect_hits),
            "benign_hits: " + "".join(str(h) for h in self.benign_hits),
        ]
        return "\n".join(lines) + "\n"


def verify_ownership(suspect: ModelCheckpoint, benign: ModelCheckpoint,
                     trigger: TriggerSet, data: LabeledDataset,
                     significance: float = 0.01) -> VerificationReport:
    """Ownership decision: suspect beats benign on the trigger set with
    statistical significance."""
    if len(trigger) < 2:
        raise VerificationError("ownership test needs at least 2 trigger samples")
    s_hits = hit_indicators(suspect, trigger, data)
    b_hits = hit_indicators(benign, trigger, data)
    res = welch_t_test(s_hits, b_hits)
    s_acc = float(s_hits.mean())
    b_acc = float(b_hits.mean())
    owned = bool(res.p < significance and s_acc > b_acc)
    return VerificationReport(
        suspect_trigger_acc=s_acc, benign_trigger_acc=b_acc,
        suspect_hits=tuple(int(h) for h in s_hits),
        benign_hits=tuple(int(h) for h in b_hits),
        t_statistic=res.t, p_value=res.p, significance=significance,
        owned=owned, degenerate=res.degenerate)
