"""Command-line entry point: ``aqfusion generate|train|evaluate|explain|predict``.

Run settings come from a ``key = value`` file (``--config``) with
``--set key=value`` overrides on top.  Keys are the fields of
:class:`~aqfusion.model.ModelConfig`, :class:`~aqfusion.train.TrainConfig`
and the run-level fields of :class:`RunConfig`.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (POLLUTANT_LABELS, POLLUTANT_UNITS, POLLUTANTS, AqiClass, Arrays, by_split, class_histogram,
                   classify_aqi, classify_many, destandardize_sensors, env_output_root, generate_synthetic,
                   load_manifest, normalize_image, read_image, standardize_sensors, stratified_split, to_arrays,
                   write_manifest)
from .errors import AQFusionError, DataError, DivergenceError, ParameterError
from .evaluation import evaluate, predict, robustness_sweep, write_robustness_csv, write_roc_csv
from .explain import export_heatmap, grad_cam
from .model import ModelConfig
from .train import Checkpoint, TrainConfig, train, write_history_csv

log = logging.getLogger("aqfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(AQFusionError):
    pass


# ---------------------------------------------------------------- run config
@dataclass(frozen=True)
class RunSettings:
    data: str = ""                # manifest path; empty means a generated synthetic corpus
    n_synthetic: int = 1200       # corpus size when ``data`` is empty
    out: str = ""                 # output directory; empty means $AQFUSION_OUTPUT_ROOT/run
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def fractions(self) -> tuple[float, float, float]:
        return self.run.train_frac, self.run.val_frac, self.run.test_frac

    @property
    def seed(self) -> int:
        return self.train.seed

    def output_dir(self) -> Path:
        return Path(self.run.out) if self.run.out else env_output_root() / "run"

    def items(self) -> list[tuple[str, object]]:
        out = []
        for part in (self.run, self.model, self.train):
            out += [(f.name, getattr(part, f.name)) for f in dataclasses.fields(part)]
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str]]) -> "RunConfig":
        sections = {"run": RunSettings, "model": ModelConfig, "train": TrainConfig}
        owner = {f.name: (sec, f) for sec, klass in sections.items() for f in dataclasses.fields(klass)}
        values: dict[str, dict] = {sec: {} for sec in sections}
        for key, raw in pairs:
            if key not in owner:
                raise UsageError(f"unknown config key {key!r}")
            sec, f = owner[key]
            values[sec][key] = _parse_value(key, raw, sections[sec].__dataclass_fields__[key].default)
        try:
            return cls(RunSettings(**values["run"]), ModelConfig(**values["model"]), TrainConfig(**values["train"]))
        except ParameterError as exc:
            raise UsageError(str(exc)) from exc


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TRUE, _FALSE = {"1", "true", "yes", "on"}, {"0", "false", "no", "off"}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in _TRUE:
                return True
            if raw.lower() in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(lines, source: str) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    pairs = []
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        pairs += parse_pairs(text.splitlines(), path)
    pairs += parse_pairs(overrides, "--set")
    return RunConfig.from_pairs(pairs)


# ------------------------------------------------------------------- helpers
def _setup_logging(out_dir: Path | None, verbose: bool) -> None:
    root = logging.getLogger("aqfusion")
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    root.setLevel(logging.INFO)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(console)
    if out_dir is not None:
        # the only artifact carrying timestamps
        fh = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(fh)


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _load_samples(cfg: RunConfig):
    if cfg.run.data:
        samples, report = load_manifest(cfg.run.data, cfg.model.image_size)
        for line, sid, reason in report.errors:
            print(f"skipped line {line} ({sid or '?'}): {reason}", file=sys.stderr)
        if not samples:
            raise DataError(f"{cfg.run.data}: no usable rows")
        return samples
    return generate_synthetic(cfg.run.n_synthetic, cfg.model.image_size, cfg.seed)


def _split(cfg: RunConfig, samples):
    return stratified_split(samples, cfg.fractions, cfg.seed)


def _histogram_text(samples) -> str:
    return "\n".join(f"  {c.label:<32}{n}" for c, n in zip(AqiClass, class_histogram(samples)))


# ------------------------------------------------------------------ commands
def cmd_generate(args) -> int:
    out = Path(args.out) if args.out else env_output_root() / "corpus"
    samples = generate_synthetic(args.n, args.size, args.seed)
    try:
        path = write_manifest(samples, _mkdir(out))
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from exc
    print(f"wrote {len(samples)} samples to {path}")
    print("class histogram:")
    print(_histogram_text(samples))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _mkdir(cfg.output_dir())
    _setup_logging(out, args.verbose)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    dataset = _split(cfg, _load_samples(cfg))
    ckpt = train(dataset, cfg.model, cfg.train)
    ckpt.save(out / "checkpoint.bin")
    write_history_csv(out / "history.csv", ckpt.history)
    kept = ckpt.history[ckpt.epoch - 1]
    early = ckpt.stop_epoch < cfg.train.max_epochs
    summary = (
        f"epochs_run = {ckpt.stop_epoch}\n"
        f"early_stopped = {_format(early)}\n"
        f"stop_epoch = {ckpt.stop_epoch}\n"
        f"checkpoint_epoch = {ckpt.epoch}\n"
        f"checkpoint_val_loss = {kept['val_loss']!r}\n"
        f"checkpoint_val_rmse = {kept['val_rmse']!r}\n"
        f"checkpoint_val_accuracy = {kept['val_acc']!r}\n"
        f"num_params = {ckpt.params.num_params()}\n"
        f"checkpoint_sha256 = {ckpt.sha256()}\n"
    )
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return EXIT_OK


def _checkpoint_split(args, cfg: RunConfig, ckpt: Checkpoint, split: str):
    cfg = dataclasses.replace(cfg, model=ckpt.model_config, train=ckpt.train_config)
    samples = _split(cfg, _load_samples(cfg))
    if split != "all":
        samples = by_split(samples, split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    return samples


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    out = _mkdir(Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}")
    _setup_logging(out, args.verbose)
    arrays = to_arrays(_checkpoint_split(args, cfg, ckpt, args.split), ckpt.scalers)
    report, scores = evaluate(ckpt.params, ckpt.model_config, arrays, ckpt.scalers,
                              bootstrap=args.bootstrap, seed=ckpt.train_config.seed)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "se_table.csv").write_text(report.se_table(), encoding="utf-8")
    with open(out / "confusion.csv", "w", encoding="utf-8") as fh:
        fh.write("true\\pred," + ",".join(c.name for c in AqiClass) + "\n")
        for c, row in zip(AqiClass, report.confusion):
            fh.write(c.name + "," + ",".join(str(v) for v in row) + "\n")
    write_roc_csv(out / "roc.csv", scores, classify_many(arrays.aqi))
    if args.robustness:
        rows = robustness_sweep(ckpt.params, ckpt.model_config, arrays, ckpt.scalers,
                                draws=args.draws, seed=ckpt.train_config.seed)
        write_robustness_csv(out / "robustness.csv", rows)
    print(f"split={args.split} n={report.n} rmse={report.rmse:.4f} accuracy={report.accuracy:.4f} "
          f"macro_auc={report.macro_auc:.4f}")
    if report.rmse_ci is not None:
        print(f"rmse 95% CI: [{report.rmse_ci[0]:.4f}, {report.rmse_ci[1]:.4f}]")
    return EXIT_OK


def cmd_explain(args, cfg: RunConfig) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    out = _mkdir(Path(args.out) if args.out else Path(args.checkpoint).parent / "heatmaps")
    _setup_logging(out, args.verbose)
    samples = _checkpoint_split(args, cfg, ckpt, "all")
    by_id = {s.id: s for s in samples}
    wanted = [s.strip() for s in args.ids.split(",") if s.strip()]
    missing = [sid for sid in wanted if sid not in by_id]
    if missing:
        for sid in missing:
            print(f"unknown sample id: {sid}", file=sys.stderr)
        raise DataError(f"{len(missing)} of {len(wanted)} sample ids not found")
    d = ckpt.model_config.sensor_dim
    targets = ["aqi"] + [f"sensor_{j}" for j in range(d)] if args.target == "all" else [args.target]
    chosen = [by_id[sid] for sid in wanted]
    arrays = to_arrays(chosen, ckpt.scalers)
    written = 0
    for i, s in enumerate(chosen):
        for t in targets:
            hm = grad_cam(ckpt.params, ckpt.model_config, normalize_image(arrays.images[i], ckpt.scalers),
                          arrays.sensors[i], t, sample_id=s.id)
            export_heatmap(hm, s.image, out)
            written += 2
    print(f"wrote {written} files to {out}")
    return EXIT_OK


def _parse_indices(text: str | None, d: int) -> list[int]:
    if not text:
        return []
    try:
        idx = sorted({int(v) for v in text.split(",") if v.strip()})
    except ValueError:
        raise UsageError(f"--missing expects comma-separated indices, got {text!r}") from None
    bad = [j for j in idx if not 0 <= j < d]
    if bad:
        raise UsageError(f"--missing indices out of range [0, {d}): {bad}")
    return idx


def predict_record(ckpt: Checkpoint, image: np.ndarray, readings: np.ndarray, missing: list[int]) -> dict:
    """Prediction for one sample; hidden readings are filled from the sensor head."""
    d = ckpt.model_config.sensor_dim
    mask = np.ones(d, dtype=bool)
    mask[missing] = False
    z = np.where(mask, standardize_sensors(np.where(mask, readings, 0.0), ckpt.scalers), 0.0)
    arrays = Arrays(image[None].astype(np.float32), z[None], mask[None], np.zeros(1), ["input"])
    y_hat, x_hat = predict(ckpt.params, ckpt.model_config, arrays, ckpt.scalers, fill="head")
    estimate = destandardize_sensors(x_hat[0], ckpt.scalers)
    used = np.where(mask, readings, estimate)
    aqi = float(y_hat[0])
    cls = classify_aqi(min(max(aqi, 0.0), 500.0))
    return {
        "aqi": aqi,
        "aqi_class": cls.label,
        "sensors": [
            {"pollutant": key, "label": lab, "unit": unit, "value": float(v), "imputed": not bool(m),
             "estimate": float(e)}
            for key, lab, unit, v, m, e in zip(POLLUTANTS, POLLUTANT_LABELS, POLLUTANT_UNITS, used, mask, estimate)
        ],
    }


def cmd_predict(args, cfg: RunConfig) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    d = ckpt.model_config.sensor_dim
    missing = _parse_indices(args.missing, d)
    readings = np.zeros(d)
    if args.sensors is None:
        missing = list(range(d))
    else:
        cells = args.sensors.split(",")
        if len(cells) != d:
            raise UsageError(f"--sensors expects {d} comma-separated values, got {len(cells)}")
        for j, cell in enumerate(cells):
            if j in missing:
                continue
            try:
                readings[j] = float(cell)
            except ValueError:
                raise UsageError(f"bad reading for {POLLUTANTS[j]}: {cell!r} (list it in --missing)") from None
            if not readings[j] >= 0:
                raise UsageError(f"reading for {POLLUTANTS[j]} must be non-negative")
    try:
        image = read_image(args.image, ckpt.model_config.image_size)
    except Exception as exc:
        raise DataError(f"cannot decode image {args.image}: {exc}") from exc
    print(json.dumps(predict_record(ckpt, image, readings, missing), indent=2))
    return EXIT_OK


# -------------------------------------------------------------------- parser
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aqfusion", description="Multimodal AQI estimation from images and sensor readings.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    g = sub.add_parser("generate", help="write a synthetic corpus (manifest + PNG images)")
    g.add_argument("--n", type=int, default=1200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--out", help="output directory (default $AQFUSION_OUTPUT_ROOT/corpus)")

    t = sub.add_parser("train", help="train a model; writes checkpoint, history.csv, summary.txt")
    common(t)

    e = sub.add_parser("evaluate", help="metrics, confusion matrix, ROC and SE tables for one split")
    e.add_argument("checkpoint")
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--robustness", action="store_true", help="also sweep k = 0..6 masked sensors")
    e.add_argument("--draws", type=int, default=10, help="mask draws per k in the robustness sweep")
    e.add_argument("--bootstrap", type=int, default=0, metavar="B", help="bootstrap resamples for the RMSE CI")
    e.add_argument("--out")
    common(e)

    x = sub.add_parser("explain", help="Grad-CAM heatmaps (PGM + PPM) for chosen samples")
    x.add_argument("checkpoint")
    x.add_argument("--ids", required=True, help="comma-separated sample ids")
    x.add_argument("--target", default="aqi", help="aqi, sensor_<j> or all")
    x.add_argument("--out")
    common(x)

    r = sub.add_parser("predict", help="predict AQI for one image and (partial) readings")
    r.add_argument("checkpoint")
    r.add_argument("--image", required=True)
    r.add_argument("--sensors", help=f"{len(POLLUTANTS)} comma-separated readings ({','.join(POLLUTANTS)})")
    r.add_argument("--missing", help="comma-separated indices of unavailable readings")
    common(r)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            if args.n <= 0 or args.size <= 0:
                raise UsageError("--n and --size must be positive")
            return cmd_generate(args)
        cfg = load_run_config(args.config, args.set)
        handler = {"train": cmd_train, "evaluate": cmd_evaluate, "explain": cmd_explain, "predict": cmd_predict}
        return handler[args.command](args, cfg)
    except (UsageError, ParameterError) as exc:
        print(f"aqfusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"aqfusion: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"aqfusion: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
