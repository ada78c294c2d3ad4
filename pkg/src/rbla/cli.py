"""Command-line entry point: ``rbla run`` and ``rbla compare``.

Config files are flat ``key = value`` text, one key per line, ``#`` starts a
comment. Command-line flags override file values. Exit codes: 0 success,
1 configuration error, 2 data or file error, 3 runtime defect.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import DEFAULT_FILES, DataError, default_data_dir, load_idx
from .federation import METHODS, PARTICIPATION, RoundConfig, run_experiment
from .report import ReportError, compare_table, emit_metrics, load_summary

log = logging.getLogger("rbla")

DATASETS = ("mnist", "fmnist")
DEFAULT_TARGETS = {"mnist": (0.95,), "fmnist": (0.83,)}
PATH_KEYS = tuple(DEFAULT_FILES)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    data_dir: str | None = None
    method: str = "rbla"
    rounds: int = 50
    participation: str = "full"
    fraction: float = 0.2
    seed: int = 42
    learning_rate: float = 0.01
    batch_size: int = 64
    local_epochs: int = 2
    n_clients: int = 10
    lora_scale: float = 1.0
    record_timing: bool = True
    target_accuracies: tuple[float, ...] = field(default=())
    out: str = "runs"

    def round_config(self) -> RoundConfig:
        return RoundConfig(
            method=self.method, rounds=self.rounds, local_epochs=self.local_epochs,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            participation=self.participation, fraction=self.fraction, seed=self.seed,
            n_clients=self.n_clients, lora_scale=self.lora_scale,
            record_timing=self.record_timing)

    def paths(self) -> dict[str, Path]:
        return {k: Path(getattr(self, k)) for k in PATH_KEYS}


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _targets(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(t) for t in text)
    return tuple(float(t) for t in str(text).replace(";", ",").split(",") if t.strip())


_CONVERTERS = {
    "rounds": int, "seed": int, "batch_size": int, "local_epochs": int, "n_clients": int,
    "fraction": float, "learning_rate": float, "lora_scale": float,
    "record_timing": _bool, "target_accuracies": _targets,
}
_CHOICES = {"dataset": DATASETS, "method": METHODS, "participation": PARTICIPATION}
KNOWN_KEYS = tuple(ExperimentConfig.__dataclass_fields__)


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def build_config(file_values: dict, overrides: dict) -> ExperimentConfig:
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    unknown = sorted(set(merged) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in merged.items():
        if key in _CHOICES and value not in _CHOICES[key]:
            raise ConfigError(f"{key}: {value!r} is not one of {', '.join(_CHOICES[key])}")
        conv = _CONVERTERS.get(key)
        try:
            kwargs[key] = conv(value) if conv else value
        except ValueError as exc:
            raise ConfigError(f"{key}: invalid value {value!r} ({exc})") from None
    cfg = ExperimentConfig(**kwargs)
    if not cfg.target_accuracies:
        cfg.target_accuracies = DEFAULT_TARGETS[cfg.dataset]
    for t in cfg.target_accuracies:
        if not 0 < t <= 1:
            raise ConfigError(f"target_accuracies: {t} is outside (0, 1]")
    data_dir = Path(cfg.data_dir) if cfg.data_dir else default_data_dir(cfg.dataset)
    for key in PATH_KEYS:
        if getattr(cfg, key) is None:
            if data_dir is None:
                raise ConfigError(f"{key} is required (or set data_dir / RBLA_DATA_DIR)")
            setattr(cfg, key, str(data_dir / DEFAULT_FILES[key]))
    try:
        cfg.round_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_config(config_path=None, **overrides) -> ExperimentConfig:
    file_values = read_config_file(config_path) if config_path else {}
    return build_config(file_values, overrides)


def run_command(args) -> int:
    overrides = {
        "method": args.method, "rounds": args.rounds, "participation": args.participation,
        "seed": args.seed, "out": args.out, "dataset": args.dataset,
        "local_epochs": args.local_epochs, "learning_rate": args.learning_rate,
        "batch_size": args.batch_size, "target_accuracies": args.targets,
        "record_timing": None if args.timing is None else str(args.timing),
    }
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    cfg = parse_config(args.config, **overrides)
    paths = cfg.paths()
    train = load_idx(paths["train_images"], paths["train_labels"])
    test = load_idx(paths["test_images"], paths["test_labels"])
    log.info("loaded %d train / %d test samples", len(train), len(test))

    def progress(m):
        print(f"round {m.round_index:3d}  acc {m.test_accuracy:.4f}  loss {m.test_loss:.4f}", flush=True)

    result = run_experiment(cfg.round_config(), train, test, cfg.target_accuracies,
                            progress=None if args.quiet else progress)
    summary = dict(result.summary, method=cfg.method, dataset=cfg.dataset, seed=cfg.seed,
                   participation=cfg.participation)
    csv_path, json_path = emit_metrics(result.metrics, cfg.out, summary, config=asdict(cfg))
    print(f"wrote {csv_path} and {json_path}")
    return 0


def compare_command(args) -> int:
    summaries = {}
    for path in args.summaries:
        s = load_summary(path)
        label = f"{s.get('method', '?')} [{path}]" if args.long else s.get("method", str(path))
        if label in summaries:
            label = f"{label} [{path}]"
        summaries[label] = s
    print(compare_table(summaries))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbla", description="Heterogeneous-rank LoRA federated learning simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federated experiment")
    run.add_argument("--config", type=Path)
    run.add_argument("--method", help="rbla | zp | fft")
    run.add_argument("--rounds", type=int)
    run.add_argument("--participation", help="full | random")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--dataset", help="mnist | fmnist")
    run.add_argument("--local-epochs", type=int)
    run.add_argument("--learning-rate", type=float)
    run.add_argument("--batch-size", type=int)
    run.add_argument("--targets", help="comma-separated target accuracies, e.g. 0.9,0.95")
    run.add_argument("--timing", dest="timing", action="store_true", default=None)
    run.add_argument("--no-timing", dest="timing", action="store_false",
                     help="write wall_ms as 0 so reruns produce byte-identical CSVs")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    run.add_argument("-q", "--quiet", action="store_true")
    run.set_defaults(func=run_command)

    cmp_ = sub.add_parser("compare", help="tabulate first-reach rounds of several runs")
    cmp_.add_argument("summaries", nargs="+")
    cmp_.add_argument("--long", action="store_true", help="label rows with their file paths")
    cmp_.set_defaults(func=compare_command)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ReportError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime defect")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
