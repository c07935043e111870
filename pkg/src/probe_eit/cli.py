"""``probe-eit`` command line.

Every subcommand reads one config file and writes into ``--out`` (which
must exist).  Exit codes: 0 success, 2 usage or config error, 3 numerical
failure, 4 file-system error.  Errors are reported as one line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ExperimentConfig, format_config, load_config
from .errors import ConfigError, EITError, ScenarioError
from .forward import read_frames
from .linear import write_image
from .mesh import write_mesh
from .metrics import summarize, write_reports
from .network import read_network, write_network, write_training_log
from .render import render_image
from .scenario import NoiseModel, generate_dataset_dir, read_dataset_dir

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
DATASET_FILES = ("manifest", "targets.csv", "frames_clean.csv", "frames_noisy.csv",
                 "gn_images.csv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out_dir)
    if not p.is_dir():
        raise FileNotFoundError(f"output directory {p} does not exist")
    return p


def _say(msg: str) -> None:
    print(msg, flush=True)


def _csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _net_name(mode: str, noisy: bool) -> str:
    return f"net_{mode}{'_noisy' if noisy else ''}"


def _load_networks(out: Path, noisy: bool = False) -> dict:
    nets = {}
    for mode in ("direct", "post"):
        p = out / (_net_name(mode, noisy) + ".eitnet")
        if p.exists():
            nets[mode] = read_network(p)
    return nets


def _available(nets: dict) -> list:
    return [m for m in ex.METHODS if ex.NETWORK_FOR.get(m) is None or ex.NETWORK_FOR[m] in nets]


# -- subcommands ----------------------------------------------------------------

def cmd_mesh(cfg, args):
    out = _out(cfg)
    mesh = ex.experiment_mesh(cfg)
    write_mesh(mesh, out / "mesh.eitmesh")
    red = ex.reduce_mesh(mesh, cfg.mesh.reduce_factor)
    _say(f"nodes {mesh.n_nodes} elements {mesh.n_elements} reduced {len(red)} "
         f"outer_radius {mesh.outer_radius!r} mesh_id {mesh.mesh_id}")


def cmd_gen_data(cfg, args):
    out = _out(cfg)
    n = cfg.dataset.count if args.n is None else args.n
    if n < 1:
        raise UsageError("gen-data needs n >= 1")
    setup = ex.build_setup(cfg)
    variants = [("dataset", None)]
    if cfg.noise.train_snr_db is not None:
        variants.append(("dataset_noisy", NoiseModel.from_snr(setup.v_ref, cfg.noise.train_snr_db)))
    for name, noise in variants:
        d = out / name
        if not args.resume:
            for f in DATASET_FILES:
                (d / f).unlink(missing_ok=True)
        made = generate_dataset_dir(d, n, setup.mesh, setup.probe, setup.pattern, setup.R,
                                    setup.reduced, noise, cfg.dataset.seed, cfg.placement)
        _say(f"{name}: {n} scenarios ({made} generated, {n - made} kept)")


def cmd_train(cfg, args):
    out = _out(cfg)
    src = Path(args.dataset) if args.dataset else out / ("dataset_noisy" if args.noisy else "dataset")
    ds = read_dataset_dir(src)
    setup = ex.build_setup(cfg)
    t0 = time.perf_counter()
    res = ex.train_network(setup, ds, args.mode, cfg)
    name = _net_name(args.mode, args.noisy)
    write_network(res.params, out / f"{name}.eitnet")
    write_training_log(res.log, out / f"{name}_log.csv")
    _say(f"{name}: layers {res.params.layer_sizes} best_mse {res.log[-1][1]!r} "
         f"iterations {res.log[-1][0]} seconds {time.perf_counter() - t0:.1f}")


def _frames_for(cfg, setup, args):
    if args.frames:
        frames = read_frames(args.frames)
        return frames, [None] * len(frames), [f"frame{i:03d}" for i in range(len(frames))]
    targets = ex.sweep_targets(cfg.sweep, setup.probe, cfg.placement.background)
    idx = range(len(targets)) if args.index is None else [args.index]
    if args.index is not None and not 0 <= args.index < len(targets):
        raise UsageError(f"--index must lie in [0, {len(targets) - 1}]")
    sel = [targets[i] for i in idx]
    return ex.simulate_frames(setup, sel), sel, [f"sweep{i:03d}" for i in idx]


def cmd_reconstruct(cfg, args):
    out = _out(cfg)
    setup = ex.build_setup(cfg)
    nets = _load_networks(out, args.noisy)
    methods = _available(nets) if args.method == "all" else [args.method]
    frames, targets, names = _frames_for(cfg, setup, args)
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    rows = []
    for m in methods:
        for f, t, name in zip(frames, targets, names):
            t0 = time.perf_counter()
            img = ex.reconstruct(m, setup, f, cfg, nets)
            ms = 1e3 * (time.perf_counter() - t0)
            stem = f"{m.replace('+', '_')}_{name}"
            write_image(img, img_dir / f"{stem}.csv")
            if not args.no_render:
                render_image(img, setup.mesh, img_dir / f"{stem}.ppm", t, setup.probe)
            rows.append((m, name, ms))
            _say(f"{m} {name} {ms:.2f} ms")
    _csv(out / "reconstruct_times.csv", ["method", "frame", "time_ms"], rows)


def cmd_evaluate(cfg, args):
    out = _out(cfg)
    setup = ex.build_setup(cfg)
    targets = ex.sweep_targets(cfg.sweep, setup.probe, cfg.placement.background)
    clean = ex.simulate_frames(setup, targets)
    nets = _load_networks(out)
    reports = ex.evaluate_methods(setup, targets, clean, _available(nets), cfg, nets)
    if cfg.noise.eval_snr_db is not None:
        snr = cfg.noise.eval_snr_db
        tag = f"@{snr:g}dB"
        noisy = ex.noisy_frames(setup, clean, snr, cfg.noise.seed)
        reports += ex.evaluate_methods(setup, targets, noisy, _available(nets), cfg, nets, tag)
        nets_nt = _load_networks(out, noisy=True)
        nt = [m for m in _available(nets_nt) if m in ex.NETWORK_FOR]
        reports += ex.evaluate_methods(setup, targets, noisy, nt, cfg, nets_nt, "/nt" + tag)
    write_reports(reports, out / "evaluation.csv")
    summary = summarize(reports)
    _csv(out / "evaluation_summary.csv",
         ["method", "mean_delta_res_pct", "mean_sd_pct", "mean_nade", "median_time_ms", "count"],
         [(m, s["delta_res"], s["sd"], s["nade"], s["time_ms"], s["count"])
          for m, s in summary.items()])
    for m, s in summary.items():
        _say(f"{m}: |dRES| {s['delta_res']:.2f}% SD {s['sd']:.2f}% NADE {s['nade']:.3f}")


def cmd_scale_study(cfg, args):
    out = _out(cfg)
    nets = _load_networks(out)
    methods = [m for m in _available(nets) if m != "pdipm+ann"] if args.method == "all" \
        else [args.method]
    rows, spreads = ex.scale_study(cfg, methods, nets)
    table = [r for r in rows]
    table += [(m, "spread") + spreads[m] for m in methods]
    _csv(out / "scale_study.csv", ex.SCALE_COLUMNS, table)
    for m in methods:
        d, s, n = spreads[m]
        _say(f"{m}: spread |dRES| {d:.3f} pp SD {s:.3f} pp NADE {n:.4f}")


def cmd_bench(cfg, args):
    out = _out(cfg)
    setup = ex.build_setup(cfg)
    nets = _load_networks(out)
    methods = _available(nets)
    targets = ex.sweep_targets(cfg.sweep, setup.probe, cfg.placement.background)
    frame = ex.simulate_frames(setup, [targets[len(targets) // 4]])[0]
    rows = ex.bench(setup, frame, cfg, methods, nets, args.repeats)
    pre = [(f"precompute:{k}", 1e3 * v, 1e3 * v, 1e3 * v, 1, 0)
           for k, v in setup.precompute_s.items()]
    _csv(out / "bench.csv", ex.BENCH_COLUMNS, rows + pre)
    for r in rows:
        _say(f"{r[0]}: median {r[1]:.3f} ms over {r[4]} runs")


def cmd_config(cfg, args):
    sys.stdout.write(format_config(cfg))


COMMANDS = {
    "mesh": cmd_mesh,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "scale-study": cmd_scale_study,
    "bench": cmd_bench,
    "show-config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="probe-eit", description="Open-domain EIT reconstruction experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config file (defaults if omitted)")
    common.add_argument("--out", help="existing output directory (overrides [run] out_dir)")
    common.add_argument("--seed", type=int, help="override every seed in the config")

    sub.add_parser("mesh", parents=[common], help="build and write the experiment mesh")
    g = sub.add_parser("gen-data", parents=[common], help="simulate training datasets")
    g.add_argument("--n", type=int, help="scenario count (default from config)")
    g.add_argument("--resume", action="store_true", help="keep completed scenarios")
    t = sub.add_parser("train", parents=[common], help="train a network by PSO")
    t.add_argument("--mode", choices=["direct", "post"], required=True)
    t.add_argument("--noisy", action="store_true", help="train on the noisy dataset")
    t.add_argument("--dataset", help="dataset directory (default inside --out)")
    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct frames")
    r.add_argument("--method", choices=list(ex.METHODS) + ["all"], default="all")
    r.add_argument("--frames", help="frames CSV (default: simulated sweep targets)")
    r.add_argument("--index", type=int, help="single sweep target index")
    r.add_argument("--noisy", action="store_true", help="use the noise-trained networks")
    r.add_argument("--no-render", action="store_true", help="skip PPM output")
    sub.add_parser("evaluate", parents=[common], help="score all methods on the sweep")
    s = sub.add_parser("scale-study", parents=[common], help="compare probe diameters")
    s.add_argument("--method", choices=list(ex.METHODS) + ["all"], default="all")
    b = sub.add_parser("bench", parents=[common], help="time per-frame reconstruction")
    b.add_argument("--repeats", type=int, help="runs per method (default from config)")
    sub.add_parser("show-config", parents=[common], help="print the effective config")
    return p


def _line(exc) -> str:
    text = str(exc).strip()
    return text.splitlines()[0] if text else type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand; run with --help")
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = cfg.with_overrides(args.seed, args.out)
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        code, msg = EXIT_CONFIG, _line(exc)
    except (OSError, UnicodeDecodeError) as exc:
        code, msg = EXIT_IO, _line(exc)
    except ScenarioError as exc:
        code = EXIT_NUMERIC if isinstance(exc.cause, ArithmeticError) else EXIT_CONFIG
        msg = _line(exc)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        code, msg = EXIT_NUMERIC, _line(exc)
    except (EITError, ValueError) as exc:
        code, msg = EXIT_CONFIG, _line(exc)
    print(f"probe-eit: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
