"""Command line: ``specres {synth,train,eval,predict}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import baselines, data, metrics, network, training
from .errors import ConfigError, DataFormatError, NumericError, ShapeError, SingularDesignError, SpecresError

log = logging.getLogger("specres")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_SNAPSHOT = "config.json"


@dataclass
class RunConfig:
    """Flat union of network and training settings plus run paths."""

    # network
    scales: int = 4
    base_features: int = 64
    dropout_rate: float = 0.2
    lrelu_slope: float = 0.2
    # training
    epochs: int = 100
    lr0: float = 5e-5
    lr_gamma: float = 0.93
    lr_step: int = 10
    weight_decay: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    patch_size: int = 64
    patch_stride: int = 40
    seed: int = 0
    # paths
    data: str = ""
    test_data: str = ""
    split_ratio: float = 0.8
    out: str = ""

    def network_config(self) -> network.NetworkConfig:
        return network.NetworkConfig(
            scales=self.scales,
            base_features=self.base_features,
            dropout_rate=self.dropout_rate,
            lrelu_slope=self.lrelu_slope,
        )

    def train_config(self) -> training.TrainConfig:
        names = {f.name for f in fields(training.TrainConfig)}
        return training.TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls().merged(raw)

    def merged(self, overrides: dict) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        vals = asdict(self)
        for k, v in overrides.items():
            if v is None:
                continue
            if k not in known:
                raise ConfigError(f"unknown config field {k!r}")
            default = vals[k]
            try:
                vals[k] = type(default)(v) if not isinstance(default, float) else float(v)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return RunConfig(**vals)


def _limit_threads() -> None:
    n = os.environ.get("SSR_THREADS")
    if not n:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(int(n))


def _write_args(args, path: Path) -> None:
    """Persist the resolved command arguments so the output folder can be regenerated."""
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    path.write_text(json.dumps(resolved, indent=2) + "\n")


def _heat(err: np.ndarray) -> np.ndarray:
    """Map a 2-d error field to a black-red-yellow-white (3, H, W) image."""
    top = float(err.max())
    t = err / top if top > 0 else np.zeros_like(err)
    return np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--size must look like HxW, got {args.size!r}") from None
    _write_args(args, out / "synth_config.json")
    rng = np.random.default_rng(args.seed)
    response = data.default_response()
    entries = []
    for i in range(args.images):
        cube = data.synth_scene(rng, h, w, args.materials)
        cube_name, rgb_name = f"scene_{i:04d}.hsc", f"scene_{i:04d}.ppm"
        data.write_hscube(cube, out / cube_name)
        data.write_ppm(data.project_to_rgb(cube, response), out / rgb_name)
        entries.append((cube_name, rgb_name))
    data.write_manifest(entries, out / "manifest.json")
    log.info("wrote %d pairs to %s", len(entries), out)
    return EXIT_OK


def _resolve_train_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = cfg.merged({"data": args.data, "test_data": args.test_data, "out": args.out, "seed": args.seed,
                      "epochs": args.epochs})
    if not cfg.data:
        raise ConfigError("no training manifest (--data or 'data' in the config)")
    if not cfg.out:
        raise ConfigError("no output directory (--out or 'out' in the config)")
    cfg.network_config().validate()
    cfg.train_config().validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_SNAPSHOT).write_text(json.dumps(asdict(cfg), indent=2) + "\n")

    pairs = data.load_pairs(cfg.data)
    if cfg.test_data:
        train_set, test_set = pairs, data.load_pairs(cfg.test_data)
    elif len(pairs) > 1:
        train_set, test_set = data.split_dataset(pairs, cfg.split_ratio, cfg.seed)
    else:
        train_set, test_set = pairs, []
    if not train_set:
        raise DataFormatError("training split is empty")

    net = network.init_he_normal(network.build_network(cfg.network_config()), cfg.seed)
    net, tlog = training.train(net, train_set, cfg.train_config(), test_set=test_set)
    network.save_weights(net, out / "weights.ssrw")
    tlog.write_csv(out / "train_log.csv")
    log.info("final train_mse %.6g after %d steps", tlog.epochs[-1].train_mse, tlog.steps)
    return EXIT_OK


def _load_net(weights: str | Path, config: str | Path | None) -> network.Network:
    cfg_path = Path(config) if config else Path(weights).parent / CONFIG_SNAPSHOT
    if not cfg_path.exists():
        raise ConfigError(f"no config snapshot at {cfg_path}; pass --config")
    net = network.build_network(RunConfig.from_file(cfg_path).network_config())
    return network.load_weights(net, weights)


def cmd_eval(args) -> int:
    if not args.weights and not args.baseline:
        raise ConfigError("eval needs --weights or --baseline")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_args(args, out / "eval_config.json")
    pairs = data.load_pairs(args.data)
    names = [Path(c).stem for c, _ in data.read_manifest(args.data)]

    if args.weights:
        net = _load_net(args.weights, args.config)
        method = "cnn"
        predict = lambda rgb, _: data.HyperCube(network.predict_image(net, rgb.data))  # noqa: E731
    elif args.baseline == "spline":
        method, predict = "spline", lambda rgb, _: baselines.spline_baseline(rgb)  # noqa: E731
    elif args.baseline == "linreg":
        if not args.fit_data:
            raise ConfigError("--baseline linreg needs --fit-data MANIFEST to fit on")
        fit_pairs = data.load_pairs(args.fit_data)
        cubes, rgbs = [c for _, c in fit_pairs], [r for r, _ in fit_pairs]
        try:
            baselines.save_projection(baselines.fit_projection_matrix(cubes, rgbs), out / "projection.prj")
        except SingularDesignError as exc:
            log.warning("projection matrix not exported: %s", exc)
        linreg = baselines.fit_linear_reconstruction(cubes, rgbs)
        method, predict = "linreg", lambda rgb, _: linreg(rgb)  # noqa: E731
    else:  # groundtruth: self-evaluation, each cube predicts itself
        method, predict = "groundtruth", lambda _, cube: cube  # noqa: E731

    rows = []
    for name, (rgb, cube) in zip(names, pairs):
        # score exactly what is written to disk (HSC1 stores f32)
        est = data.HyperCube(predict(rgb, cube).data.astype(np.float32))
        data.write_hscube(est, out / f"{name}_{method}.hsc")
        err = np.abs(est.data.astype(np.float64) - cube.data).sum(axis=0)
        data.write_hscube(data.HyperCube(err[None], wavelengths=[0.0]), out / f"{name}_{method}_abserr.hsc")
        data.write_ppm(_heat(err), out / f"{name}_{method}_abserr.ppm")
        rows.append(metrics.evaluate_all(cube, est, image=name))
    avg = metrics.average_report(rows)
    metrics.write_report_csv(out / "metrics.csv", [(method, r) for r in [*rows, avg]])
    print(f"{method}: " + " ".join(f"{n}={getattr(avg, n):.6g}" for n in metrics.METRIC_NAMES))
    return EXIT_OK


def cmd_predict(args) -> int:
    net = _load_net(args.weights, args.config)
    rgb = data.read_ppm(args.rgb)
    cube = data.HyperCube(network.predict_image(net, rgb.data))
    data.write_hscube(cube, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specres", description="RGB to 31-band spectral reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cube/RGB corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--size", default="64x64", help="HxW")
    s.add_argument("--materials", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the network")
    t.add_argument("--config")
    t.add_argument("--data", help="training manifest")
    t.add_argument("--test-data", help="held-out manifest (default: split --data)")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-image metrics and absolute-error maps")
    e.add_argument("--weights")
    e.add_argument("--config", help="config snapshot (default: next to the weights)")
    e.add_argument("--baseline", choices=["spline", "linreg", "groundtruth"])
    e.add_argument("--fit-data", help="manifest the linreg baseline is fitted on")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="reconstruct one PPM into an HSC1 cube")
    r.add_argument("--weights", required=True)
    r.add_argument("--config")
    r.add_argument("--rgb", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_predict)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ShapeError, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SpecresError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
