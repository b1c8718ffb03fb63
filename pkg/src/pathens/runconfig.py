"""Run configuration: a line-oriented key = value file with sections.

Every knob of a pipeline run lives in one file so the run can be archived
and replayed. CLI flags mirror config keys and win over the file. Seeds
are mandatory; nothing here ever falls back to the clock.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path as FsPath

from .ensemble import AGREEMENT_MODES, STATS_BASES, PartitionScheme
from .network import NetworkConfig, TrainConfig
from .paths import KPolicy, ParamGrid


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSource:
    """Where one dataset comes from: a CSV file or an IDX image/label pair."""

    kind: str
    csv: str | None = None
    images: str | None = None
    labels: str | None = None


@dataclass(frozen=True)
class FeatureSettings:
    enabled: bool = False
    layer: int = 1
    method: str = "both"
    max_splits: int = 0
    steps: int = 150
    step_size: float = 0.05


@dataclass
class RunConfig:
    raw: dict
    train_source: DataSource
    test_source: DataSource
    limit_train: int
    limit_test: int
    net_cfg: NetworkConfig
    train_cfg: TrainConfig
    scheme: PartitionScheme
    agreement: str
    stats_basis: str
    copies: int
    cluster_policy: KPolicy
    grid: ParamGrid
    target_accuracy: float
    features: FeatureSettings
    z: float
    external_original: str | None
    external_bad: str | None
    out_dir: str
    overwrite: bool

    def fingerprint(self) -> str:
        return config_fingerprint(self.raw)


_DEFAULTS = {
    "network": {"activation": "sigmoid", "dropout_rates": ""},
    "training": {"step_size": "0.001", "beta1": "0.9", "beta2": "0.999",
                 "epsilon": "1e-8"},
    "ensemble": {"agreement": "plurality", "stats_basis": "train", "copies": "2"},
    "clustering": {"candidates": "", "restarts": "3", "overrides": ""},
    "features": {"enabled": "false", "layer": "1", "method": "both",
                 "max_splits": "0", "steps": "150", "step_size": "0.05"},
    "bounds": {"z": "2.0"},
    "data": {"limit_train": "0", "limit_test": "0"},
    "output": {"overwrite": "false"},
    "external": {},
}


def read_config_text(text: str) -> dict:
    """Raw section -> key -> string value mapping, case preserved."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return {section: dict(parser.items(section)) for section in parser.sections()}


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply "section.key=value" pairs on top of the parsed file."""
    out = {s: dict(kv) for s, kv in raw.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, value = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} needs a section prefix")
        section, key = dotted.split(".", 1)
        out.setdefault(section, {})[key.strip()] = value.strip()
    return out


def config_fingerprint(raw: dict) -> str:
    """sha256 over the canonical sorted section.key=value rendering."""
    buf = io.StringIO()
    for section in sorted(raw):
        for key in sorted(raw[section]):
            buf.write(f"{section}.{key}={raw[section][key]}\n")
    return hashlib.sha256(buf.getvalue().encode("utf-8")).hexdigest()


def _section(raw, name) -> dict:
    merged = dict(_DEFAULTS.get(name, {}))
    merged.update(raw.get(name, {}))
    return merged


def _require(sec: dict, section: str, key: str) -> str:
    if key not in sec or sec[key] == "":
        raise ConfigError(f"missing required config key {section}.{key}")
    return sec[key]


def _as_int(value: str, where: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{where} must be an integer, got {value!r}") from None


def _as_float(value: str, where: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{where} must be a number, got {value!r}") from None


def _as_bool(value: str, where: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{where} must be a boolean, got {value!r}")


def _as_float_list(value: str, where: str) -> tuple[float, ...]:
    items = [v.strip() for v in value.split(",") if v.strip()]
    return tuple(_as_float(v, where) for v in items)


def _as_int_list(value: str, where: str) -> tuple[int, ...]:
    items = [v.strip() for v in value.split(",") if v.strip()]
    return tuple(_as_int(v, where) for v in items)


def _data_source(sec: dict, role: str) -> DataSource:
    fmt = _require(sec, "data", "format")
    if fmt == "csv":
        return DataSource("csv", csv=_require(sec, "data", f"{role}_csv"))
    if fmt == "idx":
        return DataSource(
            "idx",
            images=_require(sec, "data", f"{role}_images"),
            labels=_require(sec, "data", f"{role}_labels"),
        )
    raise ConfigError(f"data.format must be csv or idx, got {fmt!r}")


def _check_exists(path: str | None):
    if path is not None and not FsPath(path).exists():
        raise ConfigError(f"referenced path does not exist: {path}")


def build_run_config(raw: dict) -> RunConfig:
    """Validate the raw mapping into typed configs. Raises ConfigError."""
    data = _section(raw, "data")
    network = _section(raw, "network")
    training = _section(raw, "training")
    ensemble = _section(raw, "ensemble")
    clustering = _section(raw, "clustering")
    filt = _section(raw, "filter")
    feats = _section(raw, "features")
    bounds_sec = _section(raw, "bounds")
    external = _section(raw, "external")
    output = _section(raw, "output")

    train_source = _data_source(data, "train")
    test_source = _data_source(data, "test")
    for src in (train_source, test_source):
        _check_exists(src.csv)
        _check_exists(src.images)
        _check_exists(src.labels)

    layer_sizes = _as_int_list(_require(network, "network", "layer_sizes"),
                               "network.layer_sizes")
    dropout = _as_float_list(network["dropout_rates"], "network.dropout_rates")
    try:
        net_cfg = NetworkConfig(layer_sizes, network["activation"], dropout)
    except ValueError as exc:
        raise ConfigError(f"network: {exc}") from exc

    try:
        train_cfg = TrainConfig(
            epochs=_as_int(_require(training, "training", "epochs"), "training.epochs"),
            batch_size=_as_int(_require(training, "training", "batch_size"),
                               "training.batch_size"),
            step_size=_as_float(training["step_size"], "training.step_size"),
            beta1=_as_float(training["beta1"], "training.beta1"),
            beta2=_as_float(training["beta2"], "training.beta2"),
            epsilon=_as_float(training["epsilon"], "training.epsilon"),
            rng_seed=_as_int(_require(training, "training", "seed"), "training.seed"),
        )
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from exc

    kind = _require(ensemble, "ensemble", "scheme")
    folds = _as_int(_require(ensemble, "ensemble", "folds"), "ensemble.folds")
    try:
        scheme = PartitionScheme(kind, folds)
    except ValueError as exc:
        raise ConfigError(f"ensemble: {exc}") from exc
    agreement = ensemble["agreement"]
    if agreement not in AGREEMENT_MODES:
        raise ConfigError(f"ensemble.agreement must be one of {AGREEMENT_MODES}")
    stats_basis = ensemble["stats_basis"]
    if stats_basis not in STATS_BASES:
        raise ConfigError(f"ensemble.stats_basis must be one of {STATS_BASES}")
    copies = _as_int(ensemble["copies"], "ensemble.copies")
    if copies < 1:
        raise ConfigError("ensemble.copies must be >= 1")

    overrides = {}
    if clustering["overrides"]:
        for pair in clustering["overrides"].split(","):
            if ":" not in pair:
                raise ConfigError("clustering.overrides entries look like layer:k")
            l, k = pair.split(":", 1)
            overrides[_as_int(l.strip(), "clustering.overrides layer")] = (
                _as_int(k.strip(), "clustering.overrides k"))
    candidates = _as_int_list(clustering["candidates"], "clustering.candidates") or None
    cluster_policy = KPolicy(
        seed=_as_int(_require(clustering, "clustering", "seed"), "clustering.seed"),
        candidates=candidates,
        overrides=overrides,
        restarts=_as_int(clustering["restarts"], "clustering.restarts"),
    )

    try:
        grid = ParamGrid(
            _as_float_list(_require(filt, "filter", "max_norm_distances"),
                           "filter.max_norm_distances"),
            _as_int_list(_require(filt, "filter", "min_split_counts"),
                         "filter.min_split_counts"),
            _as_float_list(_require(filt, "filter", "min_split_accuracies"),
                           "filter.min_split_accuracies"),
        )
    except ValueError as exc:
        raise ConfigError(f"filter: {exc}") from exc
    target_accuracy = _as_float(_require(filt, "filter", "target_accuracy"),
                                "filter.target_accuracy")
    if not 0.0 <= target_accuracy <= 1.0:
        raise ConfigError("filter.target_accuracy must lie in [0, 1]")

    method = feats["method"]
    if method not in ("average", "backprop", "both"):
        raise ConfigError("features.method must be average, backprop, or both")
    features = FeatureSettings(
        enabled=_as_bool(feats["enabled"], "features.enabled"),
        layer=_as_int(feats["layer"], "features.layer"),
        method=method,
        max_splits=_as_int(feats["max_splits"], "features.max_splits"),
        steps=_as_int(feats["steps"], "features.steps"),
        step_size=_as_float(feats["step_size"], "features.step_size"),
    )

    z = _as_float(bounds_sec["z"], "bounds.z")
    if z <= 0:
        raise ConfigError("bounds.z must be > 0")

    external_original = external.get("original_csv") or None
    external_bad = external.get("bad_csv") or None
    if (external_original is None) != (external_bad is None):
        raise ConfigError("external routing needs both original_csv and bad_csv")
    _check_exists(external_original)
    _check_exists(external_bad)

    out_dir = _require(output, "output", "dir")
    overwrite = _as_bool(output["overwrite"], "output.overwrite")

    return RunConfig(
        raw=raw,
        train_source=train_source,
        test_source=test_source,
        limit_train=_as_int(data["limit_train"], "data.limit_train"),
        limit_test=_as_int(data["limit_test"], "data.limit_test"),
        net_cfg=net_cfg,
        train_cfg=train_cfg,
        scheme=scheme,
        agreement=agreement,
        stats_basis=stats_basis,
        copies=copies,
        cluster_policy=cluster_policy,
        grid=grid,
        target_accuracy=target_accuracy,
        features=features,
        z=z,
        external_original=external_original,
        external_bad=external_bad,
        out_dir=out_dir,
        overwrite=overwrite,
    )


def load_run_config(path, overrides=()) -> RunConfig:
    try:
        text = FsPath(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    raw = apply_overrides(read_config_text(text), overrides)
    return build_run_config(raw)
