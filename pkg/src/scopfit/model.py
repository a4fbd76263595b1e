"""High-level fitting, summaries and JSON persistence."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .ar1 import acf, fit_ar1, gaussian_aic, select_rho
from .assembly import TermDesign, build
from .data import DataTable
from .family import get_family
from .fit import _derivative_factors, predict_from
from .formula import parse
from .splines import KnotVector, SmoothDesign, eval_basis
from .smoothsel import select
from .tensor import TensorDesign

__all__ = ["FORMAT_VERSION", "FittedModel", "fit_model", "load_model", "save_model"]

FORMAT_VERSION = 1


@dataclass
class FittedModel:
    formula: str
    family_name: str
    link: str
    terms: list[TermDesign]
    term_index: list[slice]
    exp_mask: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    penalty_terms: list[int]
    H_p_inv: np.ndarray
    scale: float
    edf: float
    edf_terms: np.ndarray
    deviance: float
    criterion: str
    gamma: float
    score: float
    converged: bool
    iterations: int
    y: np.ndarray
    fitted: np.ndarray
    schema: dict
    n_dropped: int = 0
    aic: float = float("nan")
    ar1: dict | None = None
    flags: list = field(default_factory=list)

    @property
    def family(self):
        return get_family(self.family_name, self.link)

    @property
    def beta_tilde(self) -> np.ndarray:
        return _derivative_factors(self.beta, self.exp_mask)[0]

    @property
    def cov(self) -> np.ndarray:
        return self.scale * self.H_p_inv

    @property
    def residuals(self) -> np.ndarray:
        return self.y - self.fitted

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]

    def term(self, label: str) -> int:
        labels = self.labels
        if label in labels:
            return labels.index(label)
        hits = [i for i, t in enumerate(self.terms) if label in t.covariates or
                label == t.label.split(".")[0]]
        if len(hits) == 1:
            return hits[0]
        raise KeyError(f"unknown term {label!r}; available: {', '.join(labels)}")

    def check_schema(self, data: DataTable) -> None:
        needed = {c for t in self.terms for c in t.covariates} | \
                 {t.by for t in self.terms if t.by}
        for name in sorted(needed):
            if name not in data:
                raise ValueError(f"schema mismatch: column {name!r} missing")
            kind, shape = self.schema[name]
            nk = data.kind(name)
            if nk != kind:
                raise ValueError(f"schema mismatch: column {name!r} is {nk}, expected {kind}")
            if kind == "matrix" and data[name].shape[1] != shape[1]:
                raise ValueError(f"schema mismatch: column {name!r} has {data[name].shape[1]} "
                                 f"sub-columns, expected {shape[1]}")

    def predict(self, data: DataTable | None = None, type: str = "response", se: bool = False,
                extrapolate: bool = False):
        if data is None:
            raise ValueError("newdata required")
        self.check_schema(data)
        return predict_from(self.terms, self.term_index, self.exp_mask, self.beta, self.cov,
                            self.family, data, type, se, extrapolate)

    # -- term curves ------------------------------------------------------

    def term_curve(self, label: str, n_grid: int = 100):
        """Grid evaluation of one term: ``(columns dict, kind)``.

        One-dimensional terms give ``x, fit, se, lower, upper``; tensor
        terms a lattice ``x1, x2, fit, se``; random effects one row per level.
        """
        i = self.term(label)
        t = self.terms[i]
        s = self.term_index[i]
        bt, m = _derivative_factors(self.beta, self.exp_mask)
        C = self.cov[s, s]
        if t.kind in ("intercept", "parametric"):
            raise ValueError(f"term {t.label!r} has no curve")
        if t.kind == "random_effect":
            fit = bt[s]
            se = np.sqrt(np.maximum(np.diag(C) * m[s] ** 2, 0.0))
            return {"level": list(t.levels), "fit": fit, "se": se}, "levels"
        d = t.design
        if t.kind == "tensor":
            g1 = np.linspace(*d.knots[0].domain, n_grid)
            g2 = np.linspace(*d.knots[1].domain, n_grid)
            x1, x2 = (a.ravel() for a in np.meshgrid(g1, g2, indexing="ij"))
            M = t.model_matrix(DataTable({t.covariates[0]: x1, t.covariates[1]: x2}))
            J = M * m[s]
            se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", J, C, J), 0.0))
            return {t.covariates[0]: x1, t.covariates[1]: x2, "fit": M @ bt[s], "se": se}, "surface"
        kv = d.knots[0]
        x = np.linspace(*kv.domain, n_grid)
        if t.kind == "functional":
            # coefficient function itself
            M = eval_basis(x, kv) @ d.transform - d.center
        else:
            M = t.model_matrix(DataTable({t.covariates[0]: x}))
        fit = M @ bt[s]
        J = M * m[s]
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", J, C, J), 0.0))
        name = t.covariates[0]
        return {name: x, "fit": fit, "se": se, "lower": fit - 2.0 * se,
                "upper": fit + 2.0 * se}, "curve"

    def residual_acf(self, max_lag: int = 20) -> dict:
        starts = None if self.ar1 is None else np.asarray(self.ar1["start_flags"], dtype=bool)
        out = {"lag": np.arange(max_lag + 1), "raw": acf(self.residuals, max_lag, starts)}
        if self.ar1 is not None:
            out["standardized"] = acf(np.asarray(self.ar1["std_residuals"]), max_lag, starts)
        return out

    # -- reporting ----------------------------------------------------------

    def term_tests(self) -> list[dict]:
        bt, m = _derivative_factors(self.beta, self.exp_mask)
        rows = []
        for i, (t, s) in enumerate(zip(self.terms, self.term_index)):
            V = self.cov[s, s] * np.outer(m[s], m[s])
            b = bt[s]
            lam = [float(self.lam[j]) for j, ti in enumerate(self.penalty_terms) if ti == i]
            if t.kind in ("intercept", "parametric"):
                for k, name in enumerate(t.raw_names or (t.label,)):
                    se = math.sqrt(max(V[k, k], 0.0))
                    z = b[k] / se if se > 0 else float("inf")
                    rows.append({"term": name if t.kind == "parametric" else t.label,
                                 "kind": "parametric", "estimate": float(b[k]), "se": se,
                                 "stat": z, "p": float(2 * stats.norm.sf(abs(z)))})
                continue
            edf = float(self.edf_terms[i])
            r = max(1, min(b.size, int(round(edf))))
            w, U = np.linalg.eigh(0.5 * (V + V.T))
            top = np.argsort(w)[::-1][:r]
            wt = w[top]
            keep = wt > wt.max() * 1e-12 if wt.size and wt.max() > 0 else np.zeros(r, bool)
            proj = U[:, top][:, keep].T @ b
            W = float(np.sum(proj**2 / wt[keep])) if np.any(keep) else 0.0
            rows.append({"term": t.label, "kind": "smooth", "edf": edf, "lambda": lam,
                         "stat": W, "df": r, "p": float(stats.chi2.sf(W, r))})
        return rows

    def summary(self) -> str:
        fam = self.family
        lines = [f"Formula: {self.formula}",
                 f"Family: {fam.name}  Link: {fam.link.name}",
                 f"n = {self.y.size}" + (f" ({self.n_dropped} rows dropped for missing values)"
                                         if self.n_dropped else ""),
                 ""]
        tests = self.term_tests()
        par = [r for r in tests if r["kind"] == "parametric"]
        smo = [r for r in tests if r["kind"] == "smooth"]
        if par:
            lines.append("Parametric coefficients:")
            lines.append(f"  {'term':<20}{'estimate':>12}{'se':>12}{'z':>10}{'p':>12}")
            for r in par:
                lines.append(f"  {r['term']:<20}{r['estimate']:>12.5g}{r['se']:>12.4g}"
                             f"{r['stat']:>10.3f}{r['p']:>12.3g}")
            lines.append("")
        if smo:
            lines.append("Smooth terms (Wald tests):")
            lines.append(f"  {'term':<28}{'edf':>8}{'chi2':>12}{'df':>5}{'p':>12}")
            for r in smo:
                lines.append(f"  {r['term']:<28}{r['edf']:>8.3f}{r['stat']:>12.4g}"
                             f"{r['df']:>5d}{r['p']:>12.3g}")
            lines.append("")
        lines.append(f"Deviance = {self.deviance:.6g}  edf = {self.edf:.4g}  scale = {self.scale:.6g}")
        lines.append(f"{self.criterion.upper()} = {self.score:.6g}  (gamma = {self.gamma:g})  "
                     f"AIC = {self.aic:.6g}")
        lines.append(f"Converged: {self.converged} after {self.iterations} outer iterations")
        if self.ar1 is not None:
            lines.append("")
            lines.append(f"AR1 rho = {self.ar1['rho']:g}"
                         + (" (fixed)" if self.ar1["fixed"] else " (AIC search)"))
            if not self.ar1["fixed"]:
                lines.append("  rho        AIC")
                for r, a in self.ar1["table"]:
                    lines.append(f"  {r:<9.3g}{a:.6g}")
        for f in self.flags:
            lines.append(f"note: {f}")
        return "\n".join(lines)


def _aic(family, y, mu, weights, edf: float) -> float:
    if family.name == "gaussian":
        return gaussian_aic(float(np.sum(weights * (y - mu) ** 2)), y.size, edf)
    return -2.0 * family.loglik(y, mu, weights) + 2.0 * edf


def fit_model(formula: str, data: DataTable, family: str = "gaussian", link: str | None = None,
              criterion: str = "auto", gamma: float = 1.0, optimizer: str = "efs",
              ar1_rho=None, ar_start: str | None = None, rho_grid=None, weights=None) -> FittedModel:
    """Parse, assemble and fit; ``ar1_rho`` is ``None``, a number, or ``"search"``."""
    if optimizer != "efs":
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    spec = parse(formula, family, link)
    am = build(spec, data, weights)
    fam = get_family(spec.family, spec.link)
    ar1 = None
    if ar1_rho is None:
        sel = select(am, family=fam, criterion=criterion, gamma=gamma)
        fit = sel.fit
        aic = None
    else:
        if ar_start is not None:
            if ar_start not in data:
                raise ValueError(f"unknown column {ar_start!r}")
            starts = np.asarray(data[ar_start], dtype=float)[am.rows] != 0
        else:
            starts = np.zeros(am.n, dtype=bool)
        starts[0] = True
        opts = dict(criterion=criterion, gamma=gamma)
        if isinstance(ar1_rho, str):
            if ar1_rho != "search":
                raise ValueError(f"--ar1-rho must be a number or 'search', got {ar1_rho!r}")
            res = select_rho(am, family=fam, rho_grid=rho_grid, start_flags=starts, **opts)
            fixed = False
        else:
            res = fit_ar1(am, rho=float(ar1_rho), start_flags=starts, family=fam, **opts)
            fixed = True
        sel = res.selection
        fit = sel.fit
        aic = res.aic
        ar1 = {"rho": res.rho, "fixed": fixed, "table": [list(map(float, r)) for r in res.table],
               "start_flags": starts.astype(int).tolist(),
               "std_residuals": res.std_residuals.tolist(), "n_whiten": res.n_whiten}
    mu = fam.link.inverse(am.X @ fit.beta_tilde)
    if aic is None:
        aic = _aic(fam, am.y, mu, am.weights, fit.edf)
    return FittedModel(str(spec), fam.name, fam.link.name, am.terms, am.term_index, am.exp_mask,
                       fit.beta, fit.lam, list(am.term_of_penalty), fit.H_p_inv, fit.scale,
                       fit.edf, fit.edf_terms, fit.deviance, sel.criterion, gamma, sel.score,
                       sel.converged and fit.converged, sel.iterations, am.y, mu,
                       {k: v for k, v in data.schema().items()}, am.n_dropped, aic, ar1,
                       list(sel.flags))


# -- serialization ------------------------------------------------------------

def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _design_to_json(d: SmoothDesign) -> dict:
    return {
        "type": "tensor" if isinstance(d, TensorDesign) else "smooth",
        "constraint": d.constraint,
        "sigma": _arr(d.sigma),
        "absorb": _arr(d.absorb),
        "center": _arr(d.center),
        "exp_mask": np.asarray(d.exp_mask, dtype=bool).tolist(),
        "penalties": [_arr(S) for S in d.penalties],
        "knots": [{"knots": _arr(kv.knots), "order": kv.order} for kv in d.knots],
        "grid": list(d.grid),
        "constraints": list(d.constraints),
    }


def _design_from_json(o: dict) -> SmoothDesign:
    p = o["absorb"]
    absorb = np.array(p, dtype=float).reshape(len(p), -1) if p else np.zeros((0, 0))
    args = (o["constraint"], np.array(o["sigma"], dtype=float), absorb,
            np.array(o["center"], dtype=float), np.array(o["exp_mask"], dtype=bool),
            tuple(np.array(S, dtype=float) for S in o["penalties"]),
            tuple(KnotVector(np.array(k["knots"]), k["order"]) for k in o["knots"]),
            tuple(o["grid"]), tuple(o["constraints"]))
    return TensorDesign(*args) if o["type"] == "tensor" else SmoothDesign(*args)


def to_dict(model: FittedModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "formula": model.formula,
        "family": model.family_name,
        "link": model.link,
        "terms": [{"label": t.label, "kind": t.kind, "covariates": list(t.covariates),
                   "bs": t.bs, "by": t.by, "levels": list(t.levels),
                   "raw_names": list(t.raw_names), "columns": [s.start, s.stop],
                   "design": _design_to_json(t.design)}
                  for t, s in zip(model.terms, model.term_index)],
        "exp_mask": np.asarray(model.exp_mask, dtype=bool).tolist(),
        "beta": _arr(model.beta),
        "beta_tilde": _arr(model.beta_tilde),
        "lambda": _arr(model.lam),
        "penalty_terms": list(model.penalty_terms),
        "H_p_inv": _arr(model.H_p_inv),
        "scale": model.scale,
        "edf": model.edf,
        "edf_terms": _arr(model.edf_terms),
        "deviance": model.deviance,
        "criterion": model.criterion,
        "gamma": model.gamma,
        "score": model.score,
        "converged": model.converged,
        "iterations": model.iterations,
        "y": _arr(model.y),
        "fitted": _arr(model.fitted),
        "schema": {k: [kind, list(shape)] for k, (kind, shape) in model.schema.items()},
        "n_dropped": model.n_dropped,
        "aic": model.aic,
        "ar1": model.ar1,
        "flags": list(model.flags),
    }


def from_dict(o: dict) -> FittedModel:
    version = o.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version!r}")
    terms, index = [], []
    for t in o["terms"]:
        terms.append(TermDesign(t["label"], t["kind"], tuple(t["covariates"]),
                                _design_from_json(t["design"]), t["bs"], t["by"],
                                tuple(t["levels"]), tuple(t["raw_names"])))
        index.append(slice(*t["columns"]))
    p = len(o["beta"])
    return FittedModel(
        o["formula"], o["family"], o["link"], terms, index, np.array(o["exp_mask"], dtype=bool),
        np.array(o["beta"], dtype=float), np.array(o["lambda"], dtype=float),
        list(o["penalty_terms"]), np.array(o["H_p_inv"], dtype=float).reshape(p, p),
        o["scale"], o["edf"], np.array(o["edf_terms"], dtype=float), o["deviance"],
        o["criterion"], o["gamma"], o["score"], o["converged"], o["iterations"],
        np.array(o["y"], dtype=float), np.array(o["fitted"], dtype=float),
        {k: (kind, tuple(shape)) for k, (kind, shape) in o["schema"].items()},
        o["n_dropped"], o["aic"], o["ar1"], list(o["flags"]))


def save_model(model: FittedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(model), fh, indent=1, allow_nan=True)
        fh.write("\n")


def load_model(path) -> FittedModel:
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))
