"""``lowreg`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical abort.
Values in a ``--config`` YAML file use the long flag names (dashes or
underscores); flags given on the command line take precedence.
"""

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from ._validation import NumericalAbort
from .deform import warp_labels_nn, warp_trilinear
from .evaluation import (
    ABLATION_COLUMNS,
    DEFAULT_RANKS,
    DEFAULT_SIGMAS,
    ablation_grid,
    cell_seed,
    dice,
    endpoint_error,
    row_key,
    sort_rows,
    wilcoxon_signed_rank,
)
from .io import (
    VolFormatError,
    read_csv,
    read_ddf,
    read_labels,
    read_volume,
    write_csv,
    write_trace_csv,
    write_vol,
)
from .lowrank import LowRankProjector
from .registration import RegConfig, register
from .volume import STRUCTURES, NoiseSpec, PhantomSpec, Volume, add_noise, generate_phantom, normalize_intensity

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _ints(text):
    return [int(v) for v in str(text).replace(",", " ").split()]


def _floats(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


def _dims(text):
    d = _ints(text)
    if len(d) == 1:
        d = d * 3
    if len(d) != 3:
        raise argparse.ArgumentTypeError("dims takes 1 or 3 integers")
    return tuple(d)


def _shared(p):
    p.add_argument("--config", type=Path, help="YAML file with default flag values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")


def _phantom_flags(p):
    p.add_argument("--dims", type=_dims, default=(96, 96, 96))
    p.add_argument("--phantom", choices=sorted(STRUCTURES), default="cardiac")
    p.add_argument("--magnitude", type=float, default=3.0, help="peak ground-truth displacement (voxels)")


def _reg_flags(p):
    d = RegConfig()
    p.add_argument("--loss", choices=["lrr", "mse", "ncc"], default=d.loss)
    p.add_argument("--rank", type=int, default=d.rank)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--levels", type=int, default=d.levels)
    p.add_argument("--steps", type=int, default=d.max_steps, help="max steps per pyramid level")
    p.add_argument("--axis", choices=["x", "y", "z"], default=d.axis)
    p.add_argument("--lr-min", type=float, default=d.lr_min)
    p.add_argument("--lr-max", type=float, default=d.lr_max)
    p.add_argument("--cycle-length", type=int, default=d.cycle_length)


def build_parser():
    parser = _Parser(prog="lowreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a phantom pair, label maps and the ground-truth DDF")
    _shared(p)
    _phantom_flags(p)

    p = sub.add_parser("noise", help="add AWGN or Rician noise to a volume")
    _shared(p)
    p.add_argument("input", type=Path)
    p.add_argument("--kind", choices=["awgn", "rician"], default="awgn")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--normalize", action="store_true", help="min-max normalize before adding noise")
    p.add_argument("--name", help="output file name (default <stem>_<kind>.vol)")

    p = sub.add_parser("project", help="low-rank reconstruction and per-slice singular spectra")
    _shared(p)
    p.add_argument("fixed", type=Path, help="volume whose slice SVDs define the projector")
    p.add_argument("--apply", type=Path, help="volume to reconstruct (default: the fixed volume)")
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--axis", choices=["x", "y", "z"], default="z")

    p = sub.add_parser("register", help="register a moving volume onto a fixed volume")
    _shared(p)
    p.add_argument("moving", type=Path)
    p.add_argument("fixed", type=Path)
    p.add_argument("--moving-labels", type=Path)
    p.add_argument("--normalize", action="store_true", help="min-max normalize both inputs first")
    _reg_flags(p)

    p = sub.add_parser("evaluate", help="Dice, endpoint error, or a paired Wilcoxon test")
    _shared(p)
    p.add_argument("--warped-labels", type=Path)
    p.add_argument("--fixed-labels", type=Path)
    p.add_argument("--phantom", choices=sorted(STRUCTURES), default="cardiac",
                   help="names the label ids in the output")
    p.add_argument("--ddf", type=Path)
    p.add_argument("--gt-ddf", type=Path)
    p.add_argument("--scores", type=Path, help="CSV with paired per-case scores")
    p.add_argument("--a", help="first score column of --scores")
    p.add_argument("--b", help="second score column of --scores")

    p = sub.add_parser("ablate", help="rank x noise grid of LRR registrations (resumable)")
    _shared(p)
    _phantom_flags(p)
    _reg_flags(p)
    p.add_argument("--ranks", type=_ints, default=list(DEFAULT_RANKS))
    p.add_argument("--sigmas", type=_floats, default=list(DEFAULT_SIGMAS))
    p.add_argument("--n-pairs", type=int, default=1)
    p.add_argument("--name", default="ablation.csv")

    p = sub.add_parser("selftest", help="run the fast invariant checks")
    _shared(p)
    return parser


def _apply_config(parser, argv):
    """Parse twice: once to find --config, then with its values as defaults."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            values = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise IOError(f"cannot read config {args.config}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"invalid YAML in {args.config}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError(f"{args.config} must hold a mapping of flag names to values")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = str(key).replace("-", "_")
        dest = "lam" if dest == "lambda" else dest
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"unknown key {key!r} in {args.config} for '{args.command}'")
        action = known[dest]
        if action.type is not None and not isinstance(value, (list, dict)):
            value = action.type(str(value))
        elif action.type in (_ints, _floats) and isinstance(value, list):
            value = action.type(" ".join(map(str, value)))
        elif action.type is _dims and isinstance(value, list):
            value = _dims(" ".join(map(str, value)))
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _set_threads():
    value = os.environ.get("LOWREG_THREADS")
    if not value:
        return
    import numba

    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"LOWREG_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError("LOWREG_THREADS must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _require(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _reg_config(args, **overrides):
    cfg = RegConfig(
        loss=args.loss, rank=args.rank, lam=args.lam, axis=args.axis, max_steps=args.steps,
        lr_min=args.lr_min, lr_max=args.lr_max, cycle_length=args.cycle_length,
        levels=args.levels, seed=args.seed,
    )
    return replace(cfg, **overrides)


def _report(path, text):
    print(f"{path}: {text}")


def cmd_synth(args):
    spec = PhantomSpec(dims=args.dims, kind=args.phantom, magnitude=args.magnitude, seed=args.seed)
    ph = generate_phantom(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    outputs = {
        "moving.vol": ph.moving, "fixed.vol": ph.fixed,
        "moving_labels.vol": ph.moving_labels, "fixed_labels.vol": ph.fixed_labels,
        "gt_ddf.vol": ph.gt_ddf,
    }
    for name, obj in outputs.items():
        path = args.out / name
        write_vol(path, obj)
        if name.endswith("labels.vol"):
            counts = ", ".join(f"{ph.structures[k]}={int((obj.data == k).sum())}" for k in sorted(ph.structures))
            _report(path, f"labels {counts}")
        elif name == "gt_ddf.vol":
            mag = np.sqrt((obj.data ** 2).sum(-1))
            _report(path, f"displacement max {mag.max():.4f} mean {mag.mean():.4f} voxels")
        else:
            _report(path, f"volume {'x'.join(map(str, obj.dims))} range [{obj.data.min():.4f}, {obj.data.max():.4f}]")
    return EXIT_OK


def cmd_noise(args):
    vol = read_volume(_require(args.input, "input volume"))
    if args.normalize:
        vol = normalize_intensity(vol)
    noisy = add_noise(vol, NoiseSpec(args.kind, args.sigma, args.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / (args.name or f"{args.input.stem}_{args.kind}.vol")
    write_vol(path, noisy)
    _report(path, f"{args.kind} sigma={args.sigma} seed={args.seed}")
    return EXIT_OK


def cmd_project(args):
    fixed = read_volume(_require(args.fixed, "fixed volume"))
    target = read_volume(_require(args.apply, "volume to reconstruct")) if args.apply else fixed
    proj = LowRankProjector(rank=args.rank, axis=args.axis).fit(fixed.data)
    recon = Volume(proj.reconstruct(target.data), target.spacing)
    args.out.mkdir(parents=True, exist_ok=True)
    write_vol(args.out / "reconstruction.vol", recon)
    spectra = proj.singular_values_
    columns = ["slice"] + [f"s{i}" for i in range(spectra.shape[1])]
    write_csv(args.out / "spectra.csv", columns, ([i] + list(row) for i, row in enumerate(spectra)))
    _report(args.out / "reconstruction.vol", f"rank {args.rank} along {args.axis}")
    _report(args.out / "spectra.csv", f"{spectra.shape[0]} slices")
    return EXIT_OK


def cmd_register(args):
    moving = read_volume(_require(args.moving, "moving volume"))
    fixed = read_volume(_require(args.fixed, "fixed volume"))
    labels = read_labels(_require(args.moving_labels, "moving labels")) if args.moving_labels else None
    if args.normalize:
        moving, fixed = normalize_intensity(moving), normalize_intensity(fixed)
    cfg = _reg_config(args)
    res = register(moving.data, fixed.data, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    write_vol(args.out / "ddf.vol", res.ddf)
    write_vol(args.out / "warped.vol", Volume(warp_trilinear(moving.data, res.ddf), moving.spacing))
    if labels is not None:
        write_vol(args.out / "warped_labels.vol", warp_labels_nn(labels, res.ddf))
    write_trace_csv(args.out / "trace.csv", res.trace)
    _report(
        args.out,
        f"steps {res.steps_per_level} final loss {res.final_loss[0]:.6g} "
        f"min Jacobian {res.min_jacobian:.4f} in {res.duration:.1f} s",
    )
    return EXIT_OK


def cmd_evaluate(args):
    rows = []
    if args.warped_labels or args.fixed_labels:
        warped = read_labels(_require(args.warped_labels, "--warped-labels")).data
        fixed = read_labels(_require(args.fixed_labels, "--fixed-labels")).data
        names = STRUCTURES[args.phantom]
        present = sorted((set(np.unique(warped)) | set(np.unique(fixed))) - {0})
        for label in present:
            name = names.get(int(label), f"label{int(label)}")
            rows.append(("dice", name, dice(warped, fixed, label)))
    if args.ddf or args.gt_ddf:
        est = read_ddf(_require(args.ddf, "--ddf")).data
        gt = read_ddf(_require(args.gt_ddf, "--gt-ddf")).data
        mean, mx = endpoint_error(est, gt)
        rows += [("epe_mean", "", mean), ("epe_max", "", mx)]
    if args.scores:
        if not (args.a and args.b):
            raise UsageError("--scores needs --a and --b column names")
        table = read_csv(_require(args.scores, "--scores"))
        try:
            a = [float(r[args.a]) for r in table]
            b = [float(r[args.b]) for r in table]
        except KeyError as exc:
            raise UsageError(f"column {exc} not in {args.scores}") from None
        res = wilcoxon_signed_rank(a, b)
        rows += [("wilcoxon_w", f"{args.a}-{args.b}", res.statistic),
                 ("wilcoxon_p", f"{args.a}-{args.b}", res.pvalue)]
    if not rows:
        raise UsageError("nothing to evaluate: give label maps, DDFs or --scores")
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "metrics.csv", ("metric", "target", "value"), rows)
    for metric, target, value in rows:
        print(f"{metric}\t{target}\t{value!r}")
    return EXIT_OK


def cmd_ablate(args):
    if not args.ranks or not args.sigmas:
        raise UsageError("--ranks and --sigmas must be non-empty")
    if args.n_pairs < 1:
        raise UsageError("--n-pairs must be >= 1")
    cfg = _reg_config(args, loss="lrr")
    path = args.out / args.name
    args.out.mkdir(parents=True, exist_ok=True)
    structures = set(STRUCTURES[args.phantom].values())
    done = {}
    if path.exists():
        for row in read_csv(path):
            done[row_key(row)] = {
                "structure": row["structure"], "rank": int(row["rank"]), "sigma": float(row["sigma"]),
                "seed": int(row["seed"]), "n_pairs": int(row["n_pairs"]),
                "mean_dice": float(row["mean_dice"]), "std_dice": float(row["std_dice"]),
            }
    skip = []
    for r in args.ranks:
        for s in args.sigmas:
            seed = cell_seed(args.seed, r, s)
            if all((name, int(r), float(s), seed) in done for name in structures):
                skip.append((r, s))
    total = len(args.ranks) * len(args.sigmas)
    print(f"{len(skip)}/{total} cells already in {path}", flush=True)
    rows = dict(done)

    def on_cell(cell_rows):
        for row in cell_rows:
            rows[row_key(row)] = row
        write_csv(path, ABLATION_COLUMNS, sort_rows(rows.values()))
        r0 = cell_rows[0]
        summary = " ".join(f"{r['structure']}={r['mean_dice']:.4f}" for r in cell_rows)
        print(f"rank {r0['rank']} sigma {r0['sigma']}: {summary}", flush=True)

    ablation_grid(
        ranks=args.ranks, sigmas=args.sigmas, n_pairs=args.n_pairs, base_cfg=cfg,
        base_seed=args.seed, dims=args.dims, phantom_kind=args.phantom, jobs=args.jobs,
        skip=skip, on_cell=on_cell,
    )
    write_csv(path, ABLATION_COLUMNS, sort_rows(rows.values()))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    return EXIT_OK if not run_selftest(seed=args.seed) else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth, "noise": cmd_noise, "project": cmd_project, "register": cmd_register,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate, "selftest": cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    try:
        try:
            args = _apply_config(parser, argv)
        except SystemExit as exc:  # argparse usage errors and --help
            return exc.code if isinstance(exc.code, int) else EXIT_USAGE
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        _set_threads()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lowreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"lowreg: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, VolFormatError) as exc:
        print(f"lowreg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"lowreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
