# ai/gradcheck.py
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Dict, List

import numpy as np
import pandas as pd

from ai.neuralnet import (
    BranchMlpSpec,
    BranchSpec,
    NetParams,
    activation_pattern,
    forward,
    gradient_check,
    init_glorot,
)
from config.settings import EmConfig
from processors.mrfseg import classifier_loss_and_grad
from processors.partclust import SgdBatch, kink_pattern, pack, sgd_loss_and_grad, unpack

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
TERMS = ("E_c", "E_s", "E_d", "marginalized")

# small networks keep a run in seconds; the code paths are the full-size ones
_EMBED = BranchMlpSpec(
    branches=(BranchSpec("lfd", 8, (6, 6)), BranchSpec("pca", 4, (4,))),
    trunk=(6, 5),
)
_CLASSIFIER = BranchMlpSpec(
    branches=(BranchSpec("si", 6, (8,)), BranchSpec("pn", 3, (4,))),
    trunk=(8,),
    activate_output=True,
    head=4,
)


def _pairs(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    out = []
    while len(out) < count:
        a, b = rng.integers(n, size=2)
        if a != b:
            out.append((int(a), int(b)))
    return np.asarray(out, dtype=np.int64)


def _embedding_case(term: str, rng: np.random.Generator, seed: tuple[int, int]):
    n, d = 10, 3
    cfg = EmConfig(sigma_d=2.0)
    weights = {"E_c": (1.0, 0.0, 0.0), "E_s": (0.0, 1.0, 0.0), "E_d": (0.0, 0.0, 1.0)}[term]
    cfg = replace(cfg, lambda_c=weights[0], lambda_s=weights[1], lambda_d=weights[2])
    batch = SgdBatch(
        x=rng.standard_normal((n, _EMBED.input_dim)),
        p=rng.dirichlet(np.ones(d), size=n),
        similar=_pairs(rng, n, 6),
        dissimilar=_pairs(rng, n, 6),
    )
    params = init_glorot(_EMBED, seed=seed)
    for name in params.biases:
        params.biases[name] = 0.1 * rng.standard_normal(params.biases[name].shape)
    centers = rng.standard_normal((d, _EMBED.output_dim))
    x0 = pack(params, centers)

    def f(vec: np.ndarray) -> float:
        return sgd_loss_and_grad(*unpack(_EMBED, vec, d), batch, cfg)[0]

    def grad(vec: np.ndarray) -> np.ndarray:
        _, g_params, g_c = sgd_loss_and_grad(*unpack(_EMBED, vec, d), batch, cfg)
        return pack(g_params, g_c)

    def pattern(vec: np.ndarray) -> np.ndarray:
        return kink_pattern(*unpack(_EMBED, vec, d), batch, cfg)

    return f, grad, pattern, x0


def _marginalized_case(rng: np.random.Generator, seed: tuple[int, int]):
    n, leaves, labels = 12, _CLASSIFIER.output_dim, 6
    y = rng.standard_normal((n, _CLASSIFIER.input_dim))
    A = rng.random((leaves, labels)) + 0.05
    A[:, :leaves] = np.eye(leaves)
    A /= A.sum(axis=0, keepdims=True)
    cols = rng.integers(labels, size=n)
    x0 = init_glorot(_CLASSIFIER, seed=seed).vector()

    def f(vec: np.ndarray) -> float:
        return classifier_loss_and_grad(NetParams.from_vector(_CLASSIFIER, vec), y, A, cols)[0]

    def grad(vec: np.ndarray) -> np.ndarray:
        return classifier_loss_and_grad(NetParams.from_vector(_CLASSIFIER, vec), y, A, cols)[1].vector()

    def pattern(vec: np.ndarray) -> np.ndarray:
        return activation_pattern(forward(NetParams.from_vector(_CLASSIFIER, vec), y)[1])

    return f, grad, pattern, x0


def run_gradient_suite(points: int = 100, coords: int = 20, seed: int = 0, h: float = 1e-4) -> pd.DataFrame:
    """Max relative error of every analytic gradient against central differences, one row per point."""
    rows: List[Dict[str, object]] = []
    for term in TERMS:
        for k in range(points):
            rng = np.random.default_rng((seed, TERMS.index(term), k))
            if term == "marginalized":
                f, grad, pattern, x0 = _marginalized_case(rng, (seed, k))
            else:
                f, grad, pattern, x0 = _embedding_case(term, rng, (seed, k))
            err = gradient_check(f, grad, x0, n_coords=coords, h=h, seed=k, pattern=pattern)
            rows.append({"term": term, "point": k, "max_rel_error": err})
    table = pd.DataFrame(rows, columns=["term", "point", "max_rel_error"])
    logger.info("gradient suite: %d checks, worst %.3g", len(table), table["max_rel_error"].max() if len(table) else 0.0)
    return table


def summarize(table: pd.DataFrame, tolerance: float = TOLERANCE) -> pd.DataFrame:
    out = table.groupby("term", sort=False)["max_rel_error"].agg(["count", "max", "median"]).reset_index()
    out["ok"] = out["max"] < tolerance
    return out
