"""Run configuration: a flat key = value text format, fail-closed.

Every key has a recorded default (see DEFAULTS / default_config_text), but a
config file handed to a command must bind every key explicitly: unknown keys
and missing keys are both validation errors that name the offending field.
`config_hash` is a sha256 over the canonical sorted key=value lines and is
embedded in every artifact a command writes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .diffusion import CLOSED_FORM, ITERATIVE, DiffusionParams
from .metrics import COSINE, EUCLIDEAN
from .training import (
    DISTILL_NONE,
    DISTILL_OBDSD,
    DISTILL_PSD,
    SCOPE_BATCH,
    SCOPE_GLOBAL,
    SyntheticDatasetSpec,
    TrainerConfig,
)


class ConfigError(ValueError):
    """A config file failed validation; the message names the field."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    items = [piece.strip() for piece in raw.split(",") if piece.strip()]
    if not items:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(piece) for piece in items)


def _identity(raw: str) -> str:
    return raw.strip()


# key -> (parser, default, validator or None)
_SCHEMA: dict[str, tuple] = {
    "num_train_classes": (int, 8, lambda v: v >= 2 or "must be >= 2"),
    "num_test_classes": (int, 8, lambda v: v >= 2 or "must be >= 2"),
    "samples_per_class": (int, 12, lambda v: v >= 2 or "must be >= 2"),
    "input_dim": (int, 16, lambda v: v >= 1 or "must be >= 1"),
    "cluster_spread": (float, 0.15, lambda v: v >= 0 or "must be nonnegative"),
    "label_flip_ratio": (float, 0.0, lambda v: 0 <= v <= 0.5 or "must lie in [0, 0.5]"),
    "data_seed": (int, 7, None),
    "omega": (float, 0.5, lambda v: 0 < v < 1 or "must lie in (0, 1)"),
    "diffusion_mode": (
        _identity,
        CLOSED_FORM,
        lambda v: v in (CLOSED_FORM, ITERATIVE) or f"must be {CLOSED_FORM} or {ITERATIVE}",
    ),
    "max_iter": (int, 500, lambda v: v >= 1 or "must be >= 1"),
    "tol": (float, 1e-10, lambda v: v > 0 or "must be positive"),
    "degree_epsilon": (float, 1e-8, lambda v: v > 0 or "must be positive"),
    "knn_k": (int, 50, lambda v: v >= 1 or "must be >= 1"),
    "distill_mode": (
        _identity,
        DISTILL_OBDSD,
        lambda v: v in (DISTILL_NONE, DISTILL_PSD, DISTILL_OBDSD)
        or f"must be one of {DISTILL_NONE}, {DISTILL_PSD}, {DISTILL_OBDSD}",
    ),
    "tau": (float, 1.0, lambda v: v > 0 or "must be positive"),
    "lambda": (float, 40.0, lambda v: v >= 0 or "must be nonnegative"),
    "dynamic_weight": (_parse_bool, True, None),
    "diffusion_scope": (
        _identity,
        SCOPE_BATCH,
        lambda v: v in (SCOPE_BATCH, SCOPE_GLOBAL) or f"must be {SCOPE_BATCH} or {SCOPE_GLOBAL}",
    ),
    "epochs": (int, 60, lambda v: v >= 1 or "must be >= 1"),
    "batch_size": (int, 16, lambda v: v >= 2 and v % 2 == 0 or "must be even and >= 2"),
    "hidden_dim": (int, 32, lambda v: v >= 0 or "must be >= 0"),
    "embed_dim": (int, 16, lambda v: v >= 1 or "must be >= 1"),
    "learning_rate": (float, 0.2, lambda v: v >= 0 or "must be nonnegative"),
    "margin": (float, 0.5, None),
    "recall_ks": (_parse_int_list, (1, 2, 4, 8), lambda v: min(v) >= 1 or "Ks must be >= 1"),
    "kmeans_restarts": (int, 10, lambda v: v >= 1 or "must be >= 1"),
    "density_distance": (
        _identity,
        EUCLIDEAN,
        lambda v: v in (EUCLIDEAN, COSINE) or f"must be {EUCLIDEAN} or {COSINE}",
    ),
    "seeds": (_parse_int_list, (0, 1, 2, 3, 4), None),
    "out_dir": (_identity, "runs/latest", None),
}

DEFAULTS = {key: default for key, (_, default, _v) in _SCHEMA.items()}


def _canonical_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def default_config_text() -> str:
    lines = [
        "# full run configuration; every key must be present",
        "# desk-scale defaults; full-scale reference settings for fine-grained",
        "# retrieval benchmarks: batch_size 112, tau 1, lambda 75..1000, omega 0.3..0.99",
    ]
    lines += [f"{key} = {_canonical_value(DEFAULTS[key])}" for key in _SCHEMA]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def config_hash(self) -> str:
        canonical = "\n".join(
            f"{key}={_canonical_value(self.values[key])}" for key in sorted(self.values)
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def dataset_spec(self, run_seed: int) -> SyntheticDatasetSpec:
        v = self.values
        return SyntheticDatasetSpec(
            num_classes=v["num_train_classes"] + v["num_test_classes"],
            samples_per_class=v["samples_per_class"],
            input_dim=v["input_dim"],
            cluster_spread=v["cluster_spread"],
            seed=v["data_seed"] + run_seed,
            label_flip_ratio=v["label_flip_ratio"],
        )

    def diffusion_params(self) -> DiffusionParams:
        v = self.values
        return DiffusionParams(
            omega=v["omega"],
            mode=v["diffusion_mode"],
            max_iter=v["max_iter"],
            tol=v["tol"],
            degree_epsilon=v["degree_epsilon"],
        )

    def trainer_config(self, distill_mode: str | None = None) -> TrainerConfig:
        v = self.values
        return TrainerConfig(
            epochs=v["epochs"],
            batch_size=v["batch_size"],
            learning_rate=v["learning_rate"],
            margin=v["margin"],
            hidden_dim=v["hidden_dim"],
            embed_dim=v["embed_dim"],
            distill_mode=v["distill_mode"] if distill_mode is None else distill_mode,
            tau=v["tau"],
            distill_weight=v["lambda"],
            dynamic=v["dynamic_weight"],
            diffusion=self.diffusion_params(),
            diffusion_scope=v["diffusion_scope"],
            knn_k=v["knn_k"],
            metric_ks=v["recall_ks"],
            kmeans_restarts=v["kmeans_restarts"],
            density_distance=v["density_distance"],
        )

    def with_overrides(self, **overrides) -> "RunConfig":
        unknown = set(overrides) - set(_SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        merged = dict(self.values)
        merged.update(overrides)
        return RunConfig(values=merged)

    def as_flat_dict(self) -> dict:
        out = {}
        for key, value in self.values.items():
            out[key] = list(value) if isinstance(value, tuple) else value
        return out


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: dict = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config field {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config field {key!r}")
        parser, _default, validator = _SCHEMA[key]
        try:
            value = parser(raw_value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: field {key!r}: {exc}") from exc
        if validator is not None:
            verdict = validator(value)
            if verdict is not True:
                raise ConfigError(f"{source}:{lineno}: field {key!r} {verdict}")
        values[key] = value
    missing = [key for key in _SCHEMA if key not in values]
    if missing:
        raise ConfigError(f"{source}: missing config field(s): {', '.join(missing)}")
    return RunConfig(values=values)


def load_config(path: str | Path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), source=str(path))
