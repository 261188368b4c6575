"""Command-line entry point: one subcommand per pipeline stage.

    ssae synth      write a procedural texture dataset (MVTec layout)
    ssae train      train a model on one category
    ssae calibrate  store a detection threshold next to a trained model
    ssae infer      heatmaps and segmentations for individual images
    ssae eval       metrics table for one or more trained models
    ssae rerun      replay any command from its manifest.json

Every command that writes a directory leaves a ``manifest.json`` in it with
the fully resolved options, so ``ssae rerun`` reproduces the outputs.
Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import secrets
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

log = logging.getLogger("ssae")

MANIFEST = "manifest.json"
SIDECAR = "threshold.json"
MODEL_FILE = "model.ckpt"


class CliError(RuntimeError):
    """Runtime failure reported with exit code 1."""


class UsageError(ValueError):
    """Bad option values; exit code 2."""


# ---------------------------------------------------------------- manifest


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    artifacts: list[str]
    version: str = __version__
    started: str = ""
    finished: str = ""
    results: dict = dataclasses.field(default_factory=dict)

    def write(self, run_dir: Path) -> Path:
        path = run_dir / MANIFEST
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise CliError(f"no manifest at {path}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"{path} is not valid JSON: {exc}") from exc
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _prepare_out(out: str | None, force: bool) -> Path:
    if not out:
        raise UsageError("--out is required")
    path = Path(out)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CliError(f"{path} exists and is not empty; pass --force to overwrite")
        if not (path / MANIFEST).exists():
            # refuse to wipe directories this tool did not create
            raise CliError(f"{path} has no {MANIFEST}; refusing to overwrite it even with --force")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(opts: dict, key: str = "seed") -> int:
    if opts.get(key) is None:
        opts[key] = secrets.randbelow(2**31)
        print(f"{key}: {opts[key]} (generated)")
    return int(opts[key])


def _relative(paths, root: Path) -> list[str]:
    return sorted(str(Path(p).relative_to(root)) for p in paths)


def _configure_torch(threads: int) -> None:
    import torch

    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------------------------------- option types


def _schedule(text: str) -> tuple[tuple[int, int], ...]:
    try:
        stages = tuple(tuple(int(v) for v in part.split(":")) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"schedule must look like 64:500,128:500, got {text!r}") from None
    if not stages or any(len(s) != 2 for s in stages):
        raise argparse.ArgumentTypeError(f"schedule must look like 64:500,128:500, got {text!r}")
    return stages


def _schedule_text(stages) -> str:
    return ",".join(f"{s}:{n}" for s, n in stages)


def _unit_interval(text) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


# ---------------------------------------------------------------- commands


def cmd_synth(opts: dict) -> RunManifest:
    from .data import PRESETS, make_synthetic_texture_set

    if not opts.get("spec"):
        raise UsageError("--spec is required")
    if opts["spec"] not in PRESETS:
        raise UsageError(f"unknown spec {opts['spec']!r}; choose from {sorted(PRESETS)}")
    seed = _seed(opts)
    out = _prepare_out(opts.get("out"), opts.get("force", False))
    spec = PRESETS[opts["spec"]]
    if opts.get("side"):
        spec = dataclasses.replace(spec, side=int(opts["side"]))
    if opts.get("category"):
        spec = dataclasses.replace(spec, category=opts["category"])
    index = make_synthetic_texture_set(spec, opts["n_train"], opts["n_test"], out, seed=seed)
    files = [p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST]
    return RunManifest(
        "synth", opts, {"seed": seed}, _relative(files, out),
        results={"category": spec.category, "train": len(index.train) + len(index.validation), "test": len(index.test)},
    )


def _train_configs(opts: dict):
    from .distortion import DistortionConfig
    from .model import ModelConfig
    from .objectives import ObjectiveConfig
    from .trainer import TrainConfig

    schedule = opts["schedule"]
    if isinstance(schedule, str):
        schedule = _schedule(schedule)
    lam = opts["lam"]
    if not 0.0 <= float(lam) <= 1.0:
        raise UsageError(f"--lambda must lie in [0, 1], got {lam}")
    model_cfg = ModelConfig(side=int(schedule[-1][0]), width=opts["width"], seed=opts["seed"])
    train_cfg = TrainConfig(
        objective=ObjectiveConfig(opts["objective"], float(lam)),
        lr=opts["lr"],
        batch_size=opts["batch_size"],
        schedule=schedule,
        distortion=DistortionConfig(kind=opts["distortion"]),
        val_every=opts["val_every"],
        early_stopping=opts["early_stopping"],
        patience=opts["patience"],
        seed=opts["seed"],
    )
    return model_cfg, train_cfg


def cmd_train(opts: dict) -> RunManifest:
    from .data import scan_dataset
    from .model import save_weights
    from .trainer import train, write_loss_log

    for key in ("data", "category"):
        if not opts.get(key):
            raise UsageError(f"--{key} is required")
    seed = _seed(opts)
    if opts.get("split_seed") is None:
        opts["split_seed"] = seed
    if not isinstance(opts["schedule"], str):
        opts["schedule"] = _schedule_text(opts["schedule"])
    opts["data"] = str(Path(opts["data"]).resolve())
    model_cfg, train_cfg = _train_configs(opts)
    _configure_torch(opts["threads"])

    index = scan_dataset(opts["data"], opts["category"], opts["val_fraction"], seed=opts["split_seed"])
    out = _prepare_out(opts.get("out"), opts.get("force", False))
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir()
    net, state = train(index, model_cfg, train_cfg, checkpoint_dir=ckpt_dir)
    write_loss_log(out / "loss.csv", state.history)
    save_weights(net, out / MODEL_FILE, extra={"train_config": train_cfg.to_dict(), "best_step": state.best_step})

    files = [out / "loss.csv", out / MODEL_FILE, *ckpt_dir.iterdir()]
    results = {
        "steps": state.step,
        "stopped_early": state.stopped_early,
        "best_step": state.best_step,
        "best_value": state.best_value if state.best_step >= 0 else None,
        "final_train_loss": state.history[-1][2] if state.history else None,
        "images_seen": state.provenance,
    }
    print(f"trained {state.step} steps; weights at {out / MODEL_FILE}")
    return RunManifest("train", opts, {"seed": seed, "split_seed": opts["split_seed"]}, _relative(files, out),
                       results=results)


def _load_run(run: str):
    """Model and training manifest of a train run directory."""
    from .model import load_weights

    run_dir = Path(run)
    manifest = RunManifest.read(run_dir)
    if manifest.command != "train":
        raise CliError(f"{run_dir} is a {manifest.command!r} run, not a training run")
    ckpt = run_dir / MODEL_FILE
    if not ckpt.exists():
        raise CliError(f"missing checkpoint {ckpt}; run 'ssae train' first")
    return load_weights(ckpt), manifest


def _run_index(manifest: RunManifest, data: str | None = None):
    from .data import scan_dataset

    c = manifest.config
    return scan_dataset(data or c["data"], c["category"], c["val_fraction"], seed=c["split_seed"])


def _post(opts: dict, side: int, threshold: float | None = None):
    from .inference import PostprocessConfig

    sigma = opts.get("sigma")
    kw = {"min_area": opts["min_area"], "threshold": threshold}
    if sigma is None:
        return PostprocessConfig.for_side(side, **kw)
    return PostprocessConfig(sigma=sigma, **kw)


def cmd_calibrate(opts: dict) -> RunManifest | None:
    from .evaluation import calibrate_threshold, validation_heatmaps

    if not opts.get("run"):
        raise UsageError("--run is required")
    net, manifest = _load_run(opts["run"])
    post = _post(opts, net.config.side)
    index = _run_index(manifest, opts.get("data"))
    threshold = calibrate_threshold(validation_heatmaps(net, index, post), post.min_area, post.connectivity)
    sidecar = Path(opts["run"]) / SIDECAR
    sidecar.write_text(json.dumps({
        "threshold": threshold,
        "min_area": post.min_area,
        "sigma": post.sigma,
        "connectivity": post.connectivity,
        "validation_images": len(index.validation),
    }, indent=2) + "\n")
    print(f"threshold {threshold:.6g} written to {sidecar}")
    return None  # the sidecar lives in the training run; no new run directory


def _read_sidecar(run: str) -> dict | None:
    path = Path(run) / SIDECAR
    if not path.exists():
        return None
    return json.loads(path.read_text())


def _gather_inputs(inputs) -> list[Path]:
    from .data import IMAGE_SUFFIXES

    files = []
    for item in inputs or []:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(q for q in p.rglob("*") if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.exists():
            files.append(p)
        else:
            raise CliError(f"input not found: {p}")
    if not files:
        raise UsageError("no input images given (--input)")
    return files


def cmd_infer(opts: dict) -> RunManifest:
    from .data import load_image, resize_image
    from .inference import predict, write_outputs

    if not opts.get("run"):
        raise UsageError("--run is required")
    files = _gather_inputs(opts.get("input"))
    opts["input"] = [str(p.resolve()) for p in files]
    opts["run"] = str(Path(opts["run"]).resolve())
    net, _ = _load_run(opts["run"])
    threshold, min_area, sigma = opts.get("threshold"), opts["min_area"], opts.get("sigma")
    if threshold is None:
        side = _read_sidecar(opts["run"])
        if side is None:
            raise CliError(
                f"no detection threshold: run 'ssae calibrate --run {opts['run']}' first or pass --threshold"
            )
        threshold, min_area = side["threshold"], side["min_area"]
        sigma = side["sigma"] if sigma is None else sigma
    opts.update(threshold=threshold, min_area=min_area, sigma=sigma)
    post = _post(opts, net.config.side, threshold)

    out = _prepare_out(opts.get("out"), opts.get("force", False))
    written, summary = [], {}
    before = net.forward_calls
    used = set()
    for path in files:
        stem = path.stem
        n = 1
        while stem in used:  # same file name in different folders
            stem, n = f"{path.stem}_{n}", n + 1
        used.add(stem)
        img = resize_image(load_image(path), net.config.side)
        pred = predict(net, img, post, source=str(path))
        written.extend(write_outputs(pred, out, stem).values())
        summary[stem] = {"anomalous": pred.result.anomalous, "components": len(pred.result.components)}
    results = {"images": len(files), "forward_passes": net.forward_calls - before, "predictions": summary}
    flagged = sum(v["anomalous"] for v in summary.values())
    print(f"{flagged}/{len(files)} images flagged anomalous; outputs in {out}")
    return RunManifest("infer", opts, {}, _relative(written, out), results=results)


def cmd_eval(opts: dict) -> RunManifest:
    from .evaluation import MetricsReport, evaluate_category

    runs = opts.get("run") or []
    if not runs:
        raise UsageError("at least one --run is required")
    opts["run"] = [str(Path(r).resolve()) for r in runs]
    report = MetricsReport()
    sources = {}
    loaded = [(_load_run(r), r) for r in opts["run"]]  # fail before creating the output directory
    out = _prepare_out(opts.get("out"), opts.get("force", False))
    for (net, manifest), run in loaded:
        threshold, min_area = None, opts["min_area"]
        sidecar = _read_sidecar(run) if opts.get("use_sidecar") else None
        if sidecar is not None:
            threshold, min_area = sidecar["threshold"], sidecar["min_area"]
        post = _post(opts, net.config.side, threshold)
        ev = evaluate_category(net, _run_index(manifest), post, min_area=min_area)
        report.rows.append(ev.row)
        sources[ev.row.category] = "sidecar" if sidecar is not None else "validation"
    report.to_csv(out / "metrics.csv")
    (out / "metrics.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return RunManifest("eval", opts, {}, ["metrics.csv", "metrics.txt"], results={"threshold_source": sources})


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def cmd_rerun(opts: dict) -> RunManifest | None:
    if not opts.get("manifest"):
        raise UsageError("--manifest is required")
    manifest = RunManifest.read(opts["manifest"])
    if manifest.command not in COMMANDS:
        raise CliError(f"manifest records unknown command {manifest.command!r}")
    replay = dict(manifest.config)
    if opts.get("out"):
        replay["out"] = opts["out"]
    replay["force"] = opts.get("force", False)
    return _execute(manifest.command, replay)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssae", description="Self-supervised autoencoder anomaly detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="JSON file of option defaults; explicit flags take precedence")
        return p

    p = command("synth", "write a procedural texture dataset")
    p.add_argument("--spec", help="texture preset name")
    p.add_argument("--out", help="dataset root")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--side", type=int, help="image side (preset default if omitted)")
    p.add_argument("--category", help="category directory name (preset default if omitted)")
    p.add_argument("--force", action="store_true")

    p = command("train", "train a model on one category")
    p.add_argument("--data", help="dataset root")
    p.add_argument("--category")
    p.add_argument("--objective", choices=("v1", "v2", "v3"), default="v1")
    p.add_argument("--lambda", dest="lam", type=_unit_interval, default=0.5)
    p.add_argument("--schedule", type=_schedule, default="128:2000,256:2000,512:2000",
                   help="progressive stages side:steps,... (last side is the model input side)")
    p.add_argument("--width", type=int, default=32, help="base channel count (32 is the full-size network)")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--distortion", choices=("elastic", "black", "swap"), default="elastic")
    p.add_argument("--val-every", type=int, default=100)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--early-stopping", action=argparse.BooleanOptionalAction, default=None,
                   help="default: on for v2/v3, off for v1")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int, help="validation holdout seed (defaults to --seed)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="run directory")
    p.add_argument("--force", action="store_true")

    def post_options(p, sigma_help: str) -> None:
        p.add_argument("--min-area", type=int, default=16)
        p.add_argument("--sigma", type=float, help=sigma_help)

    p = command("calibrate", "store a detection threshold next to a trained model")
    p.add_argument("--run", help="training run directory")
    p.add_argument("--data", help="override the dataset root recorded at training time")
    post_options(p, "smoothing sigma (default 4 px at side 512, scaled)")

    p = command("infer", "heatmaps and segmentations for individual images")
    p.add_argument("--run", help="training run directory")
    p.add_argument("--input", nargs="+", help="image files or directories")
    p.add_argument("--threshold", type=float, help="overrides the calibrated threshold")
    post_options(p, "smoothing sigma (default: calibration value)")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")

    p = command("eval", "metrics table for trained models")
    p.add_argument("--run", nargs="+", help="training run directories, one per category")
    p.add_argument("--use-sidecar", action="store_true",
                   help="use stored thresholds instead of calibrating on the validation split")
    post_options(p, "smoothing sigma (default 4 px at side 512, scaled)")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")

    p = command("rerun", "replay a command from its manifest")
    p.add_argument("--manifest", help="manifest.json or the directory holding it")
    p.add_argument("--out", help="new output directory (default: the recorded one)")
    p.add_argument("--force", action="store_true")
    return parser


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a command is required")
    if getattr(args, "config", None):
        try:
            defaults = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        sub = next(a for a in parser._subparsers._group_actions if isinstance(a, argparse._SubParsersAction))
        subparser = sub.choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            parser.error(f"unknown keys in --config: {unknown}")
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _execute(command: str, opts: dict) -> RunManifest | None:
    started = _now()
    fn = cmd_rerun if command == "rerun" else COMMANDS[command]
    manifest = fn(opts)
    if manifest is not None and command != "rerun":
        manifest.config = {k: v for k, v in opts.items() if k not in ("force", "config", "log_level")}
        manifest.started, manifest.finished = started, _now()
        manifest.write(Path(opts["out"]))
    return manifest


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    opts = vars(args).copy()
    command = opts.pop("command")
    try:
        _execute(command, opts)
    except UsageError as exc:
        print(f"ssae {command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (CliError, OSError, ValueError, RuntimeError) as exc:
        print(f"ssae {command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
