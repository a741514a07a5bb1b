"""Overlap and deformation metrics, the Wilcoxon signed-rank test and the
rank x noise ablation grid."""

import hashlib
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, replace

import numpy as np

from ._validation import ShapeMismatchError, as_array, check_ddf
from .deform import warp_labels_nn
from .registration import RegConfig, register
from .volume import NoiseSpec, PhantomSpec, add_noise, generate_phantom

EXACT_MAX_N = 12


def dice(a, b, label):
    """Dice overlap of the voxels carrying ``label`` in two label maps.

    Two empty sets count as perfect agreement (1.0).
    """
    A = as_array(a, dtype=None) == label
    B = as_array(b, dtype=None) == label
    if A.shape != B.shape:
        raise ShapeMismatchError(f"label maps differ in shape: {A.shape} vs {B.shape}")
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / total


def endpoint_error(est, gt):
    """(mean, max) Euclidean distance between two displacement fields, in voxels."""
    e = check_ddf(est, name="est")
    g = check_ddf(gt, name="gt")
    if e.shape != g.shape:
        raise ShapeMismatchError(f"DDF shapes differ: {e.shape} vs {g.shape}")
    err = np.sqrt(((e - g) ** 2).sum(axis=-1))
    return float(err.mean()), float(err.max())


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    w_plus: float
    w_minus: float
    n: int
    method: str


def _average_ranks(x):
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_p(ranks, w):
    n = len(ranks)
    signs = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    w_plus = signs @ ranks
    w_minus = ranks.sum() - w_plus
    stat = np.minimum(w_plus, w_minus)
    return float(np.count_nonzero(stat <= w + 1e-9) / 2**n)


def _normal_p(ranks, w):
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((counts**3) - counts).sum()) / 48.0
    if var <= 0:
        return 1.0
    # continuity correction towards the mean; w <= mean by construction
    z = (w - mean + 0.5) / math.sqrt(var)
    return float(min(1.0, math.erfc(-z / math.sqrt(2.0))))


def wilcoxon_signed_rank(a, b=None, method="auto"):
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Parameters
    ----------
    a, b : array_like
        Paired scores; if ``b`` is None, ``a`` holds the differences.
    method : {'auto', 'exact', 'normal'}
        'auto' enumerates all sign patterns for n <= 12 and otherwise uses
        the normal approximation with tie and continuity corrections.

    Zero differences are dropped before ranking.
    """
    a = np.asarray(a, dtype=np.float64)
    d = a if b is None else a - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("expected two equal-length 1-D samples")
    if not np.all(np.isfinite(d)):
        raise ValueError("samples must be finite")
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all paired differences are zero")
    if d.size < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {d.size}")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if method == "auto":
        method = "exact" if d.size <= EXACT_MAX_N else "normal"
    if method == "exact":
        if d.size > 20:
            raise ValueError("exact enumeration is limited to n <= 20")
        p = _exact_p(ranks, w)
    elif method == "normal":
        p = _normal_p(ranks, w)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w, p, w_plus, w_minus, int(d.size), method)


# ---------------------------------------------------------------------------
# noisy phantom pairs and the ablation grid

def derive_seed(*parts):
    """Stable 63-bit seed from arbitrary printable parts."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def noisy_pair(phantom_seed, sigma, kind="awgn", dims=(96, 96, 96),
               phantom_kind="cardiac", noise_seed=None, magnitude=3.0):
    """A phantom pair with independent noise on moving and fixed images.

    Returns ``(moving, fixed, phantom)`` where ``moving``/``fixed`` are
    arrays; noise seeds derive from ``noise_seed`` (default: the phantom seed
    and sigma).
    """
    spec = PhantomSpec(dims=tuple(dims), kind=phantom_kind, seed=phantom_seed, magnitude=magnitude)
    ph = generate_phantom(spec)
    base = derive_seed("noise", phantom_seed, kind, sigma) if noise_seed is None else noise_seed
    mv = add_noise(ph.moving.data, NoiseSpec(kind, sigma, derive_seed(base, "moving")))
    fx = add_noise(ph.fixed.data, NoiseSpec(kind, sigma, derive_seed(base, "fixed")))
    return mv, fx, ph


def registration_dice(moving, fixed, phantom, cfg):
    """Register and score: Dice per structure name between warped and fixed labels."""
    res = register(moving, fixed, cfg)
    warped = warp_labels_nn(phantom.moving_labels.data, res.ddf)
    return {
        name: dice(warped, phantom.fixed_labels.data, label)
        for label, name in phantom.structures.items()
    }, res


def pair_seed(base_seed, pair):
    return derive_seed("pair", base_seed, pair)


def cell_seed(base_seed, rank, sigma):
    return derive_seed("cell", base_seed, int(rank), float(sigma))


def run_cell(rank, sigma, n_pairs, base_cfg, base_seed=0, dims=(96, 96, 96),
             phantom_kind="cardiac"):
    """Dice per structure for every pair of one grid cell.

    Phantom pairs depend only on ``(base_seed, pair)`` and noise only on
    ``(base_seed, sigma, pair)``, so every rank sees identical inputs.
    """
    cfg = replace(base_cfg, loss="lrr", rank=int(rank))
    scores = {}
    for p in range(n_pairs):
        ps = pair_seed(base_seed, p)
        noise = derive_seed("grid-noise", base_seed, float(sigma), p)
        mv, fx, ph = noisy_pair(ps, sigma, "awgn", dims, phantom_kind, noise_seed=noise)
        d, _ = registration_dice(mv, fx, ph, cfg)
        for name, v in d.items():
            scores.setdefault(name, []).append(v)
    return scores


def _cell_rows(args):
    rank, sigma, n_pairs, base_cfg, base_seed, dims, phantom_kind = args
    scores = run_cell(rank, sigma, n_pairs, base_cfg, base_seed, dims, phantom_kind)
    seed = cell_seed(base_seed, rank, sigma)
    rows = []
    for name, vals in scores.items():
        v = np.asarray(vals)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        rows.append({
            "structure": name, "rank": int(rank), "sigma": float(sigma), "seed": seed,
            "n_pairs": int(n_pairs), "mean_dice": float(v.mean()), "std_dice": std,
        })
    return rows


ABLATION_COLUMNS = ("structure", "rank", "sigma", "seed", "n_pairs", "mean_dice", "std_dice")
DEFAULT_RANKS = (12, 24, 48, 72, 96)
DEFAULT_SIGMAS = (0.0, 0.05, 0.1, 0.15, 0.2)


def row_key(row):
    return (row["structure"], int(row["rank"]), float(row["sigma"]), int(row["seed"]))


def sort_rows(rows):
    return sorted(rows, key=lambda r: (r["structure"], int(r["rank"]), float(r["sigma"])))


def ablation_grid(ranks=DEFAULT_RANKS, sigmas=DEFAULT_SIGMAS, n_pairs=1, base_cfg=None,
                  base_seed=0, dims=(96, 96, 96), phantom_kind="cardiac", jobs=1,
                  skip=(), on_cell=None):
    """Mean/std Dice per structure for every (rank, sigma) cell.

    Cells whose ``(rank, sigma)`` appear in ``skip`` are not run.
    ``on_cell(rows)`` is called as each cell finishes (in completion order);
    the returned rows are sorted by (structure, rank, sigma).
    """
    if not ranks or not sigmas:
        raise ValueError("ranks and sigmas must be non-empty")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    base_cfg = base_cfg or RegConfig()
    skip = {(int(r), float(s)) for r, s in skip}
    cells = [
        (int(r), float(s), n_pairs, base_cfg, base_seed, tuple(dims), phantom_kind)
        for r in ranks for s in sigmas if (int(r), float(s)) not in skip
    ]
    rows = []
    if jobs > 1 and len(cells) > 1:
        # fork is unsafe once the compiled kernels have started OpenMP threads
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            futures = [pool.submit(_cell_rows, c) for c in cells]
            for fut in as_completed(futures):
                cell_rows = fut.result()
                rows.extend(cell_rows)
                if on_cell:
                    on_cell(cell_rows)
    else:
        for c in cells:
            cell_rows = _cell_rows(c)
            rows.extend(cell_rows)
            if on_cell:
                on_cell(cell_rows)
    return sort_rows(rows)


def sigma_spread(rows):
    """{(structure, rank): max - min mean Dice across sigma}."""
    out = {}
    for r in rows:
        out.setdefault((r["structure"], int(r["rank"])), []).append(r["mean_dice"])
    return {k: max(v) - min(v) for k, v in out.items()}
