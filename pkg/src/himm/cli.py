"""Command-line front end.

Every command is a pure function of the config file and seed, so repeated
runs write byte-identical tables.  Tables are comma-separated with a header
row, LF line endings and floats printed to 12 significant digits.

Exit status: 0 success, 1 I/O failure, 2 config error, 3 model/data
mismatch, 4 numerical degeneracy.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as ex
from .config import RunConfig
from .em import MODES, em_fit
from .errors import ConfigError, DegenerateEvidenceError, FormatError, ParamValidationError, ShapeError
from .filter import dump_decisions, detect_with_threshold, sense_1d, sense_2d
from .model import HimmParams, read_params, write_params
from .simgen import HiddenTrajectory, ObservationSequence, load_table

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_MISMATCH, EXIT_DEGENERATE = 0, 1, 2, 3, 4


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return path


def _write_params(params: HimmParams, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_params(params, path)
    return path


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects FIELD=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw  # bare strings such as --set em_mode=joint
    return out


def load_config(args) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied."""
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except FormatError as exc:
        raise ConfigError(str(exc)) from exc
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    for key, value in getattr(args, "extra_overrides", {}).items():
        if value is not None:
            overrides[key] = value
    doc = cfg.to_dict()
    unknown = set(overrides) - set(doc)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    doc.update(overrides)
    return RunConfig.from_dict(doc)


def _params_or_truth(cfg: RunConfig, path: str | None) -> HimmParams:
    if path is None:
        return cfg.true_params()
    params = read_params(path)
    if params.shape != cfg.shape():
        raise ShapeError(f"parameter file {path} does not match the configured alphabet")
    return params


def _read_obs(path: str, params: HimmParams) -> tuple[HiddenTrajectory | None, ObservationSequence]:
    return load_table(Path(path).read_text(), params.shape)


def _obs_table(shape, obs: ObservationSequence) -> str:
    rows = ["t,U,Y"]
    rows += [f"{t},{shape.level(int(u))},{y:.12g}" for t, (u, y) in enumerate(zip(obs.U, obs.Y), start=1)]
    return "\n".join(rows) + "\n"


def _traj_table(shape, traj: HiddenTrajectory) -> str:
    rows = ["t,E,C"]
    rows += [f"{t},{shape.level(int(e))},{int(c)}" for t, (e, c) in enumerate(zip(traj.E, traj.C), start=1)]
    return "\n".join(rows) + "\n"


# ----------------------------------------------------------------------------
# commands; each returns the list of files written


def cmd_config(cfg: RunConfig, args) -> list[Path]:
    return [_write(Path(cfg.output_dir) / "config.json", cfg.dumps())]


def cmd_generate(cfg: RunConfig, args) -> list[Path]:
    params = _params_or_truth(cfg, args.params)
    params, traj, obs = ex.generate(cfg, params, args.T)
    out = Path(cfg.output_dir)
    return [
        _write_params(params, out / "true_params.json"),
        _write(out / "trajectory.csv", _traj_table(params.shape, traj)),
        _write(out / "observations.csv", _obs_table(params.shape, obs)),
    ]


def cmd_fit(cfg: RunConfig, args) -> list[Path]:
    shape = cfg.shape()
    _, obs = load_table(Path(args.obs).read_text(), shape)
    if args.init is not None:
        report = em_fit(obs, _params_or_truth(cfg, args.init), cfg.tol, cfg.max_iter, cfg.em_mode)
    else:
        report = ex.fit(cfg, obs)
    out = Path(cfg.output_dir)
    for msg in report.events:
        print(f"note: {msg}", file=sys.stderr)
    print(f"iterations={report.iterations} converged={report.converged} loglik={report.final_loglik:.12g}",
          file=sys.stderr)
    return [_write_params(report.params, out / "fit_params.json"), _write(out / "loglik.csv", report.loglik_table())]


def cmd_sense(cfg: RunConfig, args) -> list[Path]:
    params = read_params(args.params)
    _, obs = _read_obs(args.obs, params)
    decisions = sense_2d(params, obs.U, obs.Y) if args.mode == "2d" else sense_1d(params, obs.Y)
    text = dump_decisions(decisions, params.shape.base)
    if args.tau is not None:
        busy = detect_with_threshold(decisions, args.tau)
        lines = text.splitlines()
        lines[0] += ",busy"
        lines[1:] = [f"{line},{int(b)}" for line, b in zip(lines[1:], busy)]
        text = "\n".join(lines) + "\n"
    return [_write(Path(cfg.output_dir) / f"sense_{args.mode}.csv", text)]


def cmd_benchmark(cfg: RunConfig, args) -> list[Path]:
    def progress(pt):
        print(f"snr {pt.snr_db:g} dB done, forbidden outputs {pt.forbidden}", file=sys.stderr)

    result = ex.benchmark(cfg, progress)
    out = Path(cfg.output_dir)
    forbidden = "snr_db,forbidden,slots\n" + "".join(
        f"{pt.snr_db:.12g},{pt.forbidden},{pt.slots}\n" for pt in result.points)
    return [_write(out / "benchmark.csv", result.table()), _write(out / "forbidden.csv", forbidden)]


def cmd_track(cfg: RunConfig, args) -> list[Path]:
    params = _params_or_truth(cfg, args.params)
    traj, e_hat, report = ex.track(cfg, params)
    out = Path(cfg.output_dir)
    base = params.shape.base
    print(f"accuracy={report.accuracy:.12g} mae={report.mae:.12g}", file=sys.stderr)
    return [
        _write(out / "tracking.csv", ex.tracking_table(traj, e_hat, base)),
        _write(out / "tracking_summary.csv", report.summary(base)),
    ]


def cmd_mi(cfg: RunConfig, args) -> list[Path]:
    params = _params_or_truth(cfg, args.params)
    est, se = ex.mutual_information(cfg, params, args.horizon, args.trials)
    print(f"mi_gain = {est:.12g} +/- {se:.12g} nats")
    text = f"estimate,standard_error\n{est:.12g},{se:.12g}\n"
    return [_write(Path(cfg.output_dir) / "mi.csv", text)]


COMMANDS = {
    "config": cmd_config, "generate": cmd_generate, "fit": cmd_fit, "sense": cmd_sense,
    "benchmark": cmd_benchmark, "track": cmd_track, "mi": cmd_mi,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults to the built-in demo config)")
    common.add_argument("--seed", type=int, help="master seed; all sub-seeds derive from it")
    common.add_argument("--out", help="output directory (config field output_dir)")
    common.add_argument("--set", action="append", metavar="FIELD=VALUE",
                        help="override any config field; VALUE is parsed as JSON when possible")

    p = argparse.ArgumentParser(prog="himm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("config", parents=[common], help="write the effective config to OUT/config.json")

    g = sub.add_parser("generate", parents=[common],
                       help="simulate data: true_params.json, trajectory.csv (t,E,C), observations.csv (t,U,Y)")
    g.add_argument("--params", help="parameter file to generate from (default: built from the physical config)")
    g.add_argument("-T", type=int, help="number of slots (default: T_train)")

    f = sub.add_parser("fit", parents=[common], help="EM fit: fit_params.json and loglik.csv (iteration,loglik)")
    f.add_argument("--obs", required=True, help="observation table with columns U,Y")
    f.add_argument("--mode", choices=MODES, help="M-step weighting: split (per-stream statistics) or joint")
    f.add_argument("--init", help="single EM run from this parameter file instead of random starts")
    f.add_argument("--n-starts", type=int)
    f.add_argument("--max-iter", type=int)
    f.add_argument("--tol", type=float)

    s = sub.add_parser("sense", parents=[common],
                       help="filter and decide: sense_MODE.csv (t,c_hat,e_hat,busy_posterior,"
                            "log_evidence_increment[,busy])")
    s.add_argument("--params", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--mode", choices=("2d", "1d"), default="2d", help="2d uses U and Y, 1d uses Y only")
    s.add_argument("--tau", type=float, help="also declare busy where busy_posterior >= tau")

    sub.add_parser("benchmark", parents=[common],
                   help="detection comparison over snr_grid_db: benchmark.csv "
                        "(snr_db,pfa_target,pd_2d,pd_1d,pd_memoryless) and forbidden.csv")

    t = sub.add_parser("track", parents=[common],
                       help="energy tracking: tracking.csv (t,E_true,e_hat) and tracking_summary.csv")
    t.add_argument("--params", help="detector parameters (default: the true model)")

    m = sub.add_parser("mi", parents=[common], help="MI gain of the power observations: mi.csv")
    m.add_argument("--params", help="model parameters (default: the true model)")
    m.add_argument("--horizon", type=int)
    m.add_argument("--trials", type=int)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "fit":
        args.extra_overrides = {"em_mode": args.mode, "n_starts": args.n_starts,
                                "max_iter": args.max_iter, "tol": args.tol}
    try:
        cfg = load_config(args)
        for path in COMMANDS[args.command](cfg, args):
            print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError, ParamValidationError, FormatError) as exc:
        print(f"model/data mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except DegenerateEvidenceError as exc:
        print(f"numerical degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
