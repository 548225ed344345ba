"""Self-contained invariant suite behind the ``verify`` subcommand.

Each check returns its measured error next to the limit it must stay under,
so failures are diagnosable from the JSON report alone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import loss, vit_core
from .config import DEFAULT_CANDIDATES, DEFAULT_DIMS
from .gradcheck import gradient_check
from .patch_select import select_patch, target_edge, token_geometry
from .tokenizer import detokenize, extract_patches

BASE_PARAM_TARGET = 86_000_000
BASE_PARAM_RTOL = 0.05


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float | None
    limit: float | None
    detail: str

    def to_dict(self) -> dict:
        return asdict(self)


def check_tokenize_round_trip(seed: int = 0, cases: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        dims = tuple(int(d) for d in rng.integers(1, 33, size=3))
        m = int(rng.integers(1, 9))
        c = int(rng.integers(1, 4))
        vol = rng.normal(0.0, 1.0, (*dims, c))
        geo = token_geometry(dims, m)
        back = detokenize(extract_patches(vol, m), geo.grid, m, vol.shape)
        worst = max(worst, float(np.abs(back - vol).max()))
    return CheckResult(
        "tokenize-round-trip", worst == 0.0, worst, 0.0,
        f"{cases} randomized volumes, exact reassembly required",
    )


def check_layer_norm(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 3.0, (3, 8))
    y = vit_core.layer_norm(x, np.ones(8), np.zeros(8), eps=1e-12)
    mean_err = float(np.abs(y.mean(axis=1)).max())
    var_err = float(np.abs(y.var(axis=1) - 1.0).max())
    passed = mean_err < 1e-12 and var_err < 1e-6
    return CheckResult(
        "layer-norm-stats", passed, max(mean_err, var_err), 1e-6,
        f"row-mean err {mean_err:.2e}, row-var err {var_err:.2e}",
    )


def check_softmax_and_hull(seed: int = 0, trials: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_sum = 0.0
    worst_hull = 0.0
    for _ in range(trials):
        n, kh = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        q, k, v = (rng.normal(0.0, 1.0, (n, kh)) for _ in range(3))
        out, w = vit_core.attention_head(q, k, v, return_weights=True)
        worst_sum = max(worst_sum, float(np.abs(w.sum(axis=1) - 1.0).max()))
        if w.min() < 0.0 or w.max() > 1.0:
            worst_sum = max(worst_sum, 1.0)
        over = np.maximum(out - v.max(axis=0), 0.0).max()
        under = np.maximum(v.min(axis=0) - out, 0.0).max()
        worst_hull = max(worst_hull, float(over), float(under))
    passed = worst_sum <= 1e-12 and worst_hull <= 1e-12
    return CheckResult(
        "attention-softmax-hull", passed, max(worst_sum, worst_hull), 1e-12,
        "rows sum to 1, weights in [0,1], outputs inside the value-row box",
    )


def check_msa_permutation(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    config = vit_core.TINY
    params = vit_core.ViTParams.seeded(config, seed)
    z = rng.normal(0.0, 1.0, (6, config.hidden))
    perm = rng.permutation(6)
    lp = params.blocks[0]
    direct = vit_core.msa(z[perm], lp, config.heads)
    permuted = vit_core.msa(z, lp, config.heads)[perm]
    err = float(np.abs(direct - permuted).max())
    return CheckResult(
        "msa-permutation-equivariance", err <= 1e-12, err, 1e-12,
        "msa(Pz) == P msa(z) on a random permutation",
    )


def check_vit_gradients(seed: int = 0, tolerance: float = 1e-4, perturb: float = 0.0) -> CheckResult:
    result = gradient_check(vit_core.TINY, seed=seed, perturb=perturb)
    err = result["max_rel_err"]
    return CheckResult(
        "vit-gradcheck", err < tolerance, err, tolerance,
        "reverse-mode vs central differences (h=1e-4), all tensors and z0"
        + (" [fault injected]" if perturb else ""),
    )


def check_loss_oracle() -> CheckResult:
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    perfect = loss.dice_ce_loss(g, g, eps_smooth=0.0, eps_log=0.0)
    uniform = loss.dice_ce_loss(np.full((2, 2), 0.5), g, eps_smooth=0.0, eps_log=0.0)
    expected = 1.0 / 3.0 + math.log(2.0)
    err = max(abs(perfect), abs(uniform - expected))
    return CheckResult(
        "loss-oracle", err < 1e-9, err, 1e-9,
        f"perfect one-hot -> 0, uniform 2x2 -> 1/3 + ln 2 = {expected:.6f}",
    )


def check_loss_gradients(seed: int = 0, tolerance: float = 1e-5) -> CheckResult:
    res = loss.loss_gradient_check(voxels=16, classes=3, seed=seed)
    err = res["max_rel_grad_err"]
    return CheckResult(
        "loss-gradcheck", err < tolerance, err, tolerance,
        "analytic logits gradient vs central differences (h=1e-5)",
    )


def check_token_geometry() -> CheckResult:
    geo16 = token_geometry(DEFAULT_DIMS, 16)
    geo8 = token_geometry(DEFAULT_DIMS, 8)
    geo12 = token_geometry(DEFAULT_DIMS, 12)
    ok = (
        geo16.token_count == 1536
        and geo16.pad_voxels == 0
        and geo8.token_count == 12288
        and geo8.pad_voxels == 0
        and geo12.divides_exactly == (False, False, True)
    )
    return CheckResult(
        "token-geometry", ok, None, None,
        f"M=16 -> N={geo16.token_count}, M=8 -> N={geo8.token_count}, "
        f"M=12 pads H and W",
    )


def check_param_count() -> CheckResult:
    count = vit_core.param_count(vit_core.BASE)
    rel = abs(count - BASE_PARAM_TARGET) / BASE_PARAM_TARGET
    return CheckResult(
        "base-param-count", rel < BASE_PARAM_RTOL, rel, BASE_PARAM_RTOL,
        f"base encoder stack has {count:,} parameters",
    )


def check_selection_outcomes() -> CheckResult:
    # Published means in mm^3; the scale interval that makes the literal-mode
    # cube root land between the right candidate midpoints for both datasets.
    lits, mcrc = 17560.0, 10420.0
    lo, hi = 2744.0 / lits, 2744.0 / mcrc
    ok = True
    for s in np.linspace(lo + 1e-6, hi - 1e-6, 101):
        edge_l = target_edge(lits, mode="paper-literal", scale=float(s))
        edge_m = target_edge(mcrc, mode="paper-literal", scale=float(s))
        got_l = select_patch(edge_l, DEFAULT_CANDIDATES, DEFAULT_DIMS).selected
        got_m = select_patch(edge_m, DEFAULT_CANDIDATES, DEFAULT_DIMS).selected
        if (got_l, got_m) != (16, 12):
            ok = False
            break
    return CheckResult(
        "selection-reference-outcomes", ok, None, None,
        f"literal mode selects (16, 12) for every s in ({lo:.5f}, {hi:.5f})",
    )


def run_checks(
    seed: int = 0,
    tolerance: float = 1e-4,
    perturb_grad: bool = False,
    geometry_only: bool = False,
) -> list[CheckResult]:
    if geometry_only:
        return [check_token_geometry(), check_param_count()]
    return [
        check_tokenize_round_trip(seed),
        check_layer_norm(seed),
        check_softmax_and_hull(seed),
        check_msa_permutation(seed),
        check_vit_gradients(seed, tolerance, perturb=1e-3 if perturb_grad else 0.0),
        check_loss_oracle(),
        check_loss_gradients(seed),
        check_token_geometry(),
        check_param_count(),
        check_selection_outcomes(),
    ]
