"""Identifiability metrics (MCC, R^2) and table rendering."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

CSV_HEADER = ["task", "constraint", "mcc_mean", "mcc_std", "r2_mean", "r2_std", "seeds", "method"]
DEFAULT_RIDGE_ALPHA = 1e-3


class EvalError(ValueError):
    pass


def _as_2d(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise EvalError(f"{name} must be (n, dim), got shape {a.shape}")
    return a


def correlation_matrix(z_hat, z_true, method: str = "pearson", return_flags: bool = False):
    """Learned-by-true correlation matrix (Pearson or Spearman).

    Constant columns give 0 entries and are reported in the flags. Columns that
    are exactly equal (or exactly negated) after centring give exactly +-1.
    """
    a, b = _as_2d(z_hat, "z_hat"), _as_2d(z_true, "z_true")
    if a.shape[0] != b.shape[0]:
        raise EvalError(f"sample counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 3:
        raise EvalError("need at least 3 samples for correlations")
    if method == "spearman":
        a = np.apply_along_axis(rankdata, 0, a)
        b = np.apply_along_axis(rankdata, 0, b)
    elif method != "pearson":
        raise EvalError(f"unknown correlation method {method!r}")
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    na = np.sqrt((ac ** 2).sum(axis=0))
    nb = np.sqrt((bc ** 2).sum(axis=0))
    const_a = na == 0
    const_b = nb == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (ac.T @ bc) / np.outer(na, nb)
    corr[const_a, :] = 0.0
    corr[:, const_b] = 0.0
    corr = np.clip(corr, -1.0, 1.0)
    for i in range(corr.shape[0]):
        for j in range(corr.shape[1]):
            if abs(corr[i, j]) > 1 - 1e-9:
                if np.array_equal(ac[:, i], bc[:, j]):
                    corr[i, j] = 1.0
                elif np.array_equal(ac[:, i], -bc[:, j]):
                    corr[i, j] = -1.0
    if return_flags:
        return corr, {"constant_learned": np.nonzero(const_a)[0].tolist(),
                      "constant_true": np.nonzero(const_b)[0].tolist()}
    return corr


def assignment_from_corr(corr: np.ndarray) -> tuple[float, dict[int, int]]:
    """Injective learned->true map maximising mean |corr| (Hungarian algorithm)."""
    absc = np.abs(corr)
    rows, cols = linear_sum_assignment(absc, maximize=True)
    value = float(absc[rows, cols].sum() / len(rows))
    return value, {int(r): int(c) for r, c in zip(rows, cols)}


def mcc(z_hat, z_true, method: str = "pearson"):
    """Mean absolute correlation under the optimal one-to-one assignment."""
    corr = correlation_matrix(z_hat, z_true, method)
    return assignment_from_corr(corr)


def _ridge_fit(x: np.ndarray, y: np.ndarray, alpha: float):
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc + alpha * np.eye(x.shape[1])
    if alpha == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise EvalError("normal equations are singular at alpha=0; use a positive ridge alpha")
    w = np.linalg.solve(gram, xc.T @ yc)
    return w, ym - xm @ w


def r2_score(z_hat, z_true, regressor: str = "linear_ridge", alpha: float = DEFAULT_RIDGE_ALPHA):
    """Held-out R^2 of predicting true latents from learned ones.

    The map is fit on the first half and scored on the second. Returns
    ``(summary, raw)`` where ``summary`` averages per-dimension scores clamped
    at 0 and ``raw`` keeps the unclamped values.
    """
    a, b = _as_2d(z_hat, "z_hat"), _as_2d(z_true, "z_true")
    n = a.shape[0]
    if n < 20:
        raise EvalError("R^2 needs at least 20 samples")
    if a.shape[0] != b.shape[0]:
        raise EvalError("sample counts differ")
    half = n // 2
    if regressor == "linear_ridge":
        if alpha < 0:
            raise EvalError("ridge alpha must be nonnegative")
        w, c = _ridge_fit(a[:half], b[:half], alpha)
        pred = a[half:] @ w + c
    elif regressor == "none":
        _, assign = mcc(a, b)
        pred = np.zeros_like(b[half:])
        for i, j in assign.items():
            pred[:, j] = a[half:, i]
    else:
        raise EvalError(f"unknown regressor {regressor!r}")
    test = b[half:]
    ss_res = ((test - pred) ** 2).sum(axis=0)
    ss_tot = ((test - test.mean(axis=0)) ** 2).sum(axis=0)
    raw = np.where(ss_tot > 0, 1.0 - ss_res / np.where(ss_tot > 0, ss_tot, 1.0), 0.0)
    return float(np.clip(raw, 0.0, None).mean()), raw.tolist()


@dataclass
class EvalReport:
    mcc: float
    r2: float
    corr_matrix: list
    assignment: dict
    method: str = "pearson"
    regressor: str = "linear_ridge"
    r2_raw: list = field(default_factory=list)
    n_eval: int = 0
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["assignment"] = {str(k): v for k, v in self.assignment.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["assignment"] = {int(k): int(v) for k, v in d.get("assignment", {}).items()}
        return cls(**d)


def evaluate(z_hat, z_true, method: str = "pearson", regressor: str = "linear_ridge",
             alpha: float = DEFAULT_RIDGE_ALPHA) -> EvalReport:
    corr, flags = correlation_matrix(z_hat, z_true, method, return_flags=True)
    value, assign = assignment_from_corr(corr)
    r2, raw = r2_score(z_hat, z_true, regressor, alpha)
    meta = {
        "r2_split": "held-out second half",
        "ridge_alpha": alpha,
        "unassigned_learned_dims_ignored": bool(corr.shape[0] > corr.shape[1]),
        **flags,
    }
    return EvalReport(mcc=value, r2=r2, corr_matrix=corr.tolist(), assignment=assign, method=method,
                      regressor=regressor, r2_raw=raw, n_eval=int(np.asarray(z_hat).shape[0]), metadata=meta)


# ---------------------------------------------------------------- tables

@dataclass
class TableRow:
    task: str
    constraint: str
    mcc: list
    r2: list
    method: str = "pearson"
    failed: int = 0

    @staticmethod
    def _stats(vals):
        if not vals:
            return math.nan, math.nan
        arr = np.asarray(vals, dtype=float)
        return float(arr.mean()), float(arr.std())

    @property
    def mcc_mean(self): return self._stats(self.mcc)[0]
    @property
    def mcc_std(self): return self._stats(self.mcc)[1]
    @property
    def r2_mean(self): return self._stats(self.r2)[0]
    @property
    def r2_std(self): return self._stats(self.r2)[1]
    @property
    def seeds(self): return len(self.mcc)


def emit_report(rows, fmt: str = "csv") -> str:
    """Render one row per (task, constraint) in the given order."""
    rows = list(rows)
    if not rows:
        raise EvalError("nothing to report")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.task, r.constraint, repr(r.mcc_mean), repr(r.mcc_std), repr(r.r2_mean),
                        repr(r.r2_std), r.seeds, r.method])
        return buf.getvalue()
    if fmt in ("md", "markdown"):
        lines = ["| Task | Constraint | MCC | R² | Seeds | Method |", "|---|---|---|---|---|---|"]
        for r in rows:
            mcc_s = "failed" if r.seeds == 0 else f"{r.mcc_mean:.2f} ± {r.mcc_std:.2f}"
            r2_s = "failed" if r.seeds == 0 else f"{r.r2_mean:.2f} ± {r.r2_std:.2f}"
            lines.append(f"| {r.task} | {r.constraint} | {mcc_s} | {r2_s} | {r.seeds} | {r.method} |")
        return "\n".join(lines) + "\n"
    raise EvalError(f"unknown report format {fmt!r}")


def parse_csv_report(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise EvalError(f"unexpected CSV header {reader.fieldnames}")
    out = []
    for rec in reader:
        out.append({
            "task": rec["task"], "constraint": rec["constraint"],
            "mcc_mean": float(rec["mcc_mean"]), "mcc_std": float(rec["mcc_std"]),
            "r2_mean": float(rec["r2_mean"]), "r2_std": float(rec["r2_std"]),
            "seeds": int(rec["seeds"]), "method": rec["method"],
        })
    return out
