"""Command-line interface: ``fibertrack <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/configuration error,
3 numerical failure. Errors print a single ``error: ...`` line on stderr.
A ``--config`` JSON file supplies defaults for any option; explicit flags
win over it.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import DataError, FibertrackError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, stochastic=False):
    p.add_argument("--config", help="JSON file with option defaults")
    if stochastic:
        p.add_argument("--seed", type=int, default=0, help="random seed")


def build_parser():
    parser = _Parser(prog="fibertrack", description="Diffusion MRI fiber tracking")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="synthesise a phantom volume and its ground truth")
    _common(p, stochastic=True)
    p.add_argument("--geometry", default="straight", help="straight | arc | crossing")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.0, help="log-domain noise sigma")
    p.add_argument("--table", default="six", help="six | dense")
    p.add_argument("--voxel-size", type=float, default=1.5)
    p.add_argument("--out", required=True, help="output base path")

    p = sub.add_parser("fit", help="fit tensors; write FA, MD and tensor maps")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("track", help="track streamlines into a .trk file")
    _common(p, stochastic=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("deterministic", "probabilistic", "learned"),
                   default="probabilistic")
    p.add_argument("--seeds", help="seed voxels 'x,y,z;x,y,z;...'")
    p.add_argument("--seed-fa", type=float, help="seed every voxel with FA >= value")
    p.add_argument("--samples", type=int, default=1, help="streamlines per seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--sphere-level", type=int, default=4)
    p.add_argument("--fa-stop", type=float, default=0.15)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--sigma-floor", type=float, default=0.02, help="log-domain noise floor")
    p.add_argument("--sigma", type=float, help="log-domain noise for every voxel")
    p.add_argument("--checkpoint", help="network checkpoint (learned mode)")
    p.add_argument("--out", required=True, help=".trk output path")
    p.add_argument("--counts", help="base path for the connectivity map")

    p = sub.add_parser("train", help="train the orientation network on synthetic patches")
    _common(p, stochastic=True)
    p.add_argument("--table", default="six")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--val", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--learning-rate", type=float, default=6e-5)
    p.add_argument("--l2", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=40)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--time-limit", type=float, help="seconds")
    p.add_argument("--dtype", default="float32")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="CSV path for the loss history")

    p = sub.add_parser("eval", help="angular error of orientations against ground truth")
    _common(p, stochastic=True)
    p.add_argument("--input", help="volume base path (with --truth)")
    p.add_argument("--truth", help="ground-truth base path")
    p.add_argument("--source", choices=("network", "tensor"), default="network")
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=int, default=1000,
                   help="synthetic held-out samples when no volume is given")
    p.add_argument("--table", default="six")
    p.add_argument("--noise", type=float, default=0.02)

    p = sub.add_parser("bench", help="timing table (CSV + text)")
    _common(p, stochastic=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--table", default="six")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--voxels", type=int, default=64)
    p.add_argument("--fibers", type=int, default=50)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--sphere-level", type=int, default=4)
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="CSV output path")
    return parser


def _load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise DataError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def parse_args(argv):
    """Parse ``argv``; a ``--config`` file is applied as subcommand defaults."""
    parser = build_parser()
    choices = parser._subparsers._group_actions[0].choices
    if argv and argv[0] in choices:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv[1:])
        if known.config:
            cfg = _load_config(known.config)
            sub = choices[argv[0]]
            dests = {a.dest for a in sub._actions}
            unknown = set(cfg) - dests
            if unknown:
                raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
            sub.set_defaults(**cfg)
            for a in sub._actions:
                if a.dest in cfg:
                    a.required = False
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("fibertrack: a command is required")
    return args


# -- commands ----------------------------------------------------------------

def cmd_phantom(args, out):
    from .dwi import PhantomSpec, default_table, generate_phantom
    from .io import write_ground_truth, write_volume
    spec = PhantomSpec(args.geometry, args.noise, rng_seed=args.seed)
    volume, truth = generate_phantom(spec, (args.size,) * 3, default_table(args.table),
                                     (args.voxel_size,) * 3)
    base = write_volume(args.out, volume)
    write_ground_truth(base + "_truth", truth, volume.voxel_size)
    print(f"wrote {base}.raw/.json ({volume.dims}) and ground truth", file=out)


def cmd_fit(args, out):
    from .dti import fit_volume
    from .io import ScalarMap, write_volume
    volume = _read_dwi(args.input)
    field = fit_volume(volume)
    vs = volume.voxel_size
    write_volume(args.out + "_fa", ScalarMap(field.fa, vs))
    write_volume(args.out + "_md", ScalarMap(field.md, vs))
    write_volume(args.out + "_tensor", ScalarMap(field.comps, vs))
    write_volume(args.out + "_s0", ScalarMap(field.S0, vs))
    print(f"fitted {np.prod(volume.shape3)} voxels; mean FA {float(field.fa.mean()):.4f}",
          file=out)


def _read_dwi(path):
    from .dwi import DwiVolume
    from .io import read_volume
    vol = read_volume(path)
    if not isinstance(vol, DwiVolume):
        raise DataError(f"{path} is not a DWI volume (no gradient table)")
    return vol


def _parse_seeds(text):
    try:
        seeds = [tuple(int(c) for c in s.split(",")) for s in text.split(";") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --seeds value {text!r}") from None
    if not seeds or any(len(s) != 3 for s in seeds):
        raise UsageError("--seeds needs 'x,y,z' triples separated by ';'")
    return seeds


def _select_seeds(args, field):
    if args.seeds:
        return _parse_seeds(args.seeds)
    if args.seed_fa is not None:
        return [tuple(int(c) for c in v) for v in np.argwhere(field.fa >= args.seed_fa)]
    return [tuple(int(c) for c in np.unravel_index(np.argmax(field.fa), field.fa.shape))]


def cmd_track(args, out):
    from .dti import fit_volume
    from .io import ScalarMap, write_trk, write_volume
    from .tracking import (TrackerConfig, TrackingSession, accumulate_counts,
                           run_probabilistic)
    from .errors import SeedRejectedError
    volume = _read_dwi(args.input)
    cfg = TrackerConfig(fa_stop=args.fa_stop, max_steps=args.max_steps,
                        samples_per_seed=args.samples, rng_seed=args.seed,
                        sphere_level=args.sphere_level, threads=args.threads,
                        sigma_floor=args.sigma_floor, sigma=args.sigma)
    field = fit_volume(volume)
    session = TrackingSession(volume, cfg, field=field)
    seeds = _select_seeds(args, field)
    if args.mode == "probabilistic":
        lines = run_probabilistic(session, seeds)
    else:
        if args.mode == "learned":
            from .estimator.checkpoint import load
            from .estimator.learned import LearnedOrientation, track_learned
            if not args.checkpoint:
                raise UsageError("--mode learned needs --checkpoint")
            params, net_cfg = load(args.checkpoint)
            oracle = LearnedOrientation(volume, params, net_cfg)

            def one(s):
                return track_learned(s, volume, params, net_cfg, session=session, oracle=oracle)
        else:
            one = session.track_deterministic
        lines = []
        for s in seeds:
            try:
                lines.append(one(s))
            except SeedRejectedError:
                lines.append(None)
    kept = [s for s in lines if s is not None]
    if not kept:
        raise DataError("every seed was rejected (outside the volume or FA below fa_stop)")
    write_trk(args.out, kept, volume.shape3, volume.voxel_size)
    if args.counts:
        write_volume(args.counts, ScalarMap(accumulate_counts(kept, volume.shape3).counts,
                                            volume.voxel_size))
    print(f"wrote {len(kept)} streamlines to {args.out} "
          f"({len(lines) - len(kept)} rejected)", file=out)


def cmd_train(args, out):
    from .dwi import default_table
    from .estimator.checkpoint import save
    from .estimator.data import synthetic_dataset
    from .estimator.network import NetworkConfig
    from .estimator.training import TrainConfig, train
    table = default_table(args.table)
    rng = np.random.default_rng(args.seed)
    ds = synthetic_dataset(args.samples + args.val, table, rng, noise_sigma=args.noise)
    tr, va = ds.split(args.val)
    tc = TrainConfig(learning_rate=args.learning_rate, l2=args.l2, dropout=args.dropout,
                     batch_size=args.batch_size, early_stop_patience=args.patience,
                     rng_seed=args.seed, worker_count=args.workers, max_epochs=args.epochs,
                     max_steps=args.max_steps, time_limit=args.time_limit, dtype=args.dtype)
    cfg = NetworkConfig.table1(len(table))
    result = train(tr, va, cfg, tc, log=lambda r: print(
        f"epoch {r.epoch}: train {r.train_error_rad:.4f} rad, val {r.val_error_rad:.4f} rad",
        file=out))
    save(args.out, result.params, cfg)
    if args.history:
        result.write_csv(args.history)
    best = result.history[result.best_epoch].val_error_rad
    print(f"best epoch {result.best_epoch}: val {best:.4f} rad; stopped by {result.stopped}",
          file=out)


def cmd_eval(args, out):
    from .dwi import default_table
    from .losses import axial_angle
    if args.input:
        from .io import read_ground_truth
        if not args.truth:
            raise UsageError("--input needs --truth")
        volume = _read_dwi(args.input)
        dirs, mask = read_ground_truth(args.truth)
        voxels = np.argwhere(mask)
        truth = dirs[tuple(voxels.T)]
        if args.source == "tensor":
            from .dti import fit_volume
            pred = fit_volume(volume).v1[tuple(voxels.T)]
        else:
            from .estimator.checkpoint import load
            from .estimator.learned import LearnedOrientation
            params, cfg = _need_checkpoint(args, load)
            pred = LearnedOrientation(volume, params, cfg).predict(voxels)
    else:
        from .estimator.checkpoint import load
        from .estimator.data import synthetic_dataset
        from .estimator.network import predict
        params, cfg = _need_checkpoint(args, load)
        ds = synthetic_dataset(args.samples, default_table(args.table),
                               np.random.default_rng(args.seed), noise_sigma=args.noise)
        dtype = next(iter(params.values())).dtype
        truth, pred = ds.targets, predict(params, cfg, ds.views.astype(dtype))
    err = axial_angle(truth, np.asarray(pred, dtype=np.float64))
    mean, med = float(np.mean(err)), float(np.median(err))
    print(f"n={len(err)} mean {mean:.6f} rad ({np.degrees(mean):.4f} deg) "
          f"median {med:.6f} rad ({np.degrees(med):.4f} deg)", file=out)


def _need_checkpoint(args, load):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required for network evaluation")
    return load(args.checkpoint)


def cmd_bench(args, out):
    from .bench import run_bench, to_csv, to_text
    params = cfg = None
    if args.checkpoint:
        from .estimator.checkpoint import load
        params, cfg = load(args.checkpoint)
    rows = run_bench(size=args.size, table=args.table, reps=args.reps, n_voxels=args.voxels,
                     n_fibers=args.fibers, threads=args.threads, params=params,
                     net_config=cfg, seed=args.seed, sphere_level=args.sphere_level)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(to_csv(rows))
    out.write(to_text(rows))


COMMANDS = {"phantom": cmd_phantom, "fit": cmd_fit, "track": cmd_track,
            "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE
    except FibertrackError as exc:
        print(f"error: {exc}", file=err)
        return exc.exit_code
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=err)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
