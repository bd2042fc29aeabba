import math

import numpy as np

from core.inference import (
    coef_table,
    deviance,
    ranef_estimate,
    residuals,
    sigma_report,
)
from core.model_core import GAUSSIAN, Dataset, FamilySpec, destandardize
from utils.models import SelectionScore


def _num(value):
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _named(names, values) -> dict:
    return {name: _num(v) for name, v in zip(names, values)}


def five_number_summary(values) -> dict:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return {"min": None, "q1": None, "median": None, "q3": None, "max": None}
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (_num(v) for v in q)))


def criteria_document(criteria) -> dict | None:
    if criteria is None:
        return None
    return {
        "BICq": _num(criteria.BICq),
        "BICh": _num(criteria.BICh),
        "BIC": _num(criteria.BIC),
        "BICNgrp": _num(criteria.BICNgrp),
        "d_lambda": criteria.d_lambda,
        "d_beta": criteria.d_beta,
        "d_gamma": criteria.d_gamma,
        "loglik": _num(criteria.loglik),
        "loglik_weighted": _num(criteria.loglik_weighted),
    }


def create_fit_report(fit, dataset: Dataset, family: FamilySpec, criteria=None) -> dict:
    """Creates the JSON document describing one fitted model."""
    sigma = sigma_report(fit, dataset, family)
    variances = np.diag(sigma.cov)
    resid_type = "pearson" if family.kind == GAUSSIAN else "deviance"
    resid = residuals(fit, dataset, family, resid_type)
    last = fit.trace[-1] if fit.trace else None

    report = {
        "family": family.kind,
        "link": family.link,
        "penalty": fit.penalty.penalty,
        "lambda": {"lambda0": _num(fit.penalty.lambda0), "lambda1": _num(fit.penalty.lambda1)},
        "covariance_structure": fit.struct.kind,
        "data": {
            "N": dataset.N,
            "K": dataset.K,
            "p": dataset.p,
            "q": dataset.q,
            "covariates": list(dataset.covariate_names),
            "random_effects": list(dataset.random_names),
        },
        "fixef": _named(dataset.fixed_names, fit.theta.beta),
        "fixef_raw": _named(dataset.fixed_names, destandardize(fit.theta.beta, dataset.centers, dataset.scales)),
        "ranef_variance": _named(sigma.names, variances),
        "ranef_sd": _named(sigma.names, np.sqrt(np.maximum(variances, 0.0))),
        "ranef_cov": {
            "names": list(sigma.names),
            "matrix": [[_num(v) for v in row] for row in sigma.cov],
        },
        "sigma": _num(sigma.residual_sd),
        "criteria": criteria_document(criteria),
        "convergence": {
            "converged": fit.converged,
            "reason": fit.reason,
            "iterations": fit.iterations,
            "final_distance": _num(last.distance) if last else None,
            "final_variance_shift": _num(last.variance_shift) if last else None,
            "final_n_mc": last.n_mc if last else None,
            "mstep_cap_hits": sum(1 for r in fit.trace if r.mstep_cap_hit),
        },
        "deviance": _num(deviance(fit, dataset, family)),
        "residuals": {"type": resid_type, "summary": five_number_summary(resid)},
    }
    if fit.draws is not None:
        ranef = ranef_estimate(fit, dataset)
        report["ranef"] = {
            str(level): _named(ranef.names, row) for level, row in zip(ranef.levels, ranef.values)
        }
        report["ranef_method"] = ranef.method
        coefs = coef_table(fit, dataset)
        report["coef"] = {str(level): _named(coefs.columns, row) for level, row in zip(coefs.index, coefs.values)}
    return report


def create_selection_report(result, family: FamilySpec) -> dict:
    """Creates the JSON document describing a tuning-parameter search."""
    dataset = result.dataset
    fits = []
    for entry in result.entries:
        fit = entry.fit
        beta = fit.theta.beta
        fits.append(
            {
                "lambda0": _num(entry.lambda0),
                "lambda1": _num(entry.lambda1),
                "stage": entry.stage,
                "grid": list(entry.grid),
                "parent": entry.parent,
                "converged": fit.converged,
                "iterations": fit.iterations,
                "criteria": criteria_document(entry.criteria),
                "fixef_nonzero": [n for n, b in zip(dataset.fixed_names, beta) if b != 0],
                "ranef_nonzero": [
                    n for n, keep in zip(dataset.random_names, fit.nonzero_random()) if keep
                ],
            }
        )
    best = result.best_entry
    minpen = None
    if result.minpen is not None:
        minpen = {
            "lambda0": _num(result.minpen.lambda0),
            "lambda1": _num(result.minpen.lambda1),
            "path": result.minpen.path,
            "reused": result.minpen.reused,
            "M": result.minpen.draws.M,
        }
    return {
        "family": family.kind,
        "criterion": result.criterion,
        "search": result.search,
        "lambda_max": _num(result.lambda_max),
        "lambda0_seq": [_num(v) for v in result.sequences.lambda0_seq],
        "lambda1_seq": [_num(v) for v in result.sequences.lambda1_seq],
        "random_effects_after_prescreen": list(dataset.random_names),
        "fits": fits,
        "best": dict(result.best),
        "best_lambda": {"lambda0": _num(best.lambda0), "lambda1": _num(best.lambda1)},
        "all_nonconverged": result.all_nonconverged,
        "minimal_penalty": minpen,
    }


def create_score_row(score: SelectionScore, replicate: int, seed: int) -> dict:
    """One JSON line per simulation replicate; wall time goes to the log."""
    return {
        "replicate": replicate,
        "seed": seed,
        "tp_fixef": score.tp_fixef,
        "fp_fixef": score.fp_fixef,
        "tp_ranef": score.tp_ranef,
        "fp_ranef": score.fp_ranef,
        "beta_hat": [_num(b) for b in score.beta_hat],
    }


def create_score_summary(scores: list[SelectionScore]) -> dict:
    if not scores:
        return {"replicates": 0}
    beta_hat = np.array([s.beta_hat for s in scores], dtype=float)
    return {
        "replicates": len(scores),
        "mean_tp_fixef": _num(np.mean([s.tp_fixef for s in scores])),
        "mean_fp_fixef": _num(np.mean([s.fp_fixef for s in scores])),
        "mean_tp_ranef": _num(np.mean([s.tp_ranef for s in scores])),
        "mean_fp_ranef": _num(np.mean([s.fp_ranef for s in scores])),
        "mean_beta_hat": [_num(v) for v in beta_hat.mean(axis=0)] if beta_hat.size else [],
    }
