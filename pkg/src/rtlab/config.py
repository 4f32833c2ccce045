"""Experiment configuration: a flat key = value text document.

One key per line, '#' starts a comment line, values are typed against a
fixed schema (unknown keys are rejected). Dotted prefixes group keys into
sections that mirror the library config objects, e.g. ``distill.lr`` or
``model.encoder_kind``. ``resolved_text`` renders every key (defaults
included) in sorted order, which is the exact document echoed into each run
directory.
"""

from dataclasses import dataclass

from .distill import DistillConfig
from .errors import ConfigError
from .models import ModelSpec
from .supervised import SupervisedConfig

# type tags: int, float, str, bool, ints, floats, strs, or a tuple of choices
SCHEMA = {
    "seed": ("int", 0),
    "out": ("str", ""),
    "dataset.kind": (("blobs", "digits", "noise", "idx", "cifar_bin"), "blobs"),
    "dataset.n_train": ("int", 1024),
    "dataset.n_test": ("int", 512),
    "dataset.dim": ("int", 8),
    "dataset.k": ("int", 4),
    "dataset.separation": ("float", 6.0),
    "dataset.sigma": ("float", 1.0),
    "dataset.path": ("str", ""),
    "dataset.labels_path": ("str", ""),
    "dataset.downsample": ("int", 1),
    "model.encoder_kind": (("mlp", "small_cnn", "small_cnn_residual"), "mlp"),
    "model.encoder_widths": ("ints", (256, 128)),
    "model.embed_dim": ("int", 64),
    "model.norm_kind": (("batch", "layer", "identity"), "batch"),
    "model.input_shape": ("ints", (1, 14, 14)),
    "model.hidden_dims": ("ints", (256, 256)),
    "model.bottleneck_dim": ("int", 32),
    "model.out_dim": ("int", 4096),
    "model.use_weight_norm": ("bool", True),
    "model.use_first_linear": ("bool", True),
    "model.use_feature_norm": ("bool", True),
    "distill.alpha": ("float", 1e-10),
    "distill.lr": ("float", 1e-3),
    "distill.epochs": ("int", 30),
    "distill.batch_size": ("int", 256),
    "distill.temperature_t": ("float", 1.0),
    "distill.temperature_s": ("float", 1.0),
    "distill.ema_gamma": ("float", 0.0),
    "distill.loss_kind": (("cross_entropy", "kl"), "cross_entropy"),
    "distill.teacher_mode": (("eval", "train"), "eval"),
    "distill.student_mode": (("train", "eval"), "train"),
    "distill.checkpoint_epochs": ("ints", ()),
    "distill.alpha_sweep": ("floats", ()),
    "distill.probe_every": ("int", 0),
    "probe.kind": (("linear", "knn", "both"), "linear"),
    "probe.epochs": ("int", 100),
    "probe.lr": ("float", 1e-3),
    "probe.batch_size": ("int", 256),
    "probe.seeds": ("ints", (0, 1, 2)),
    "probe.knn_k": ("int", 20),
    "probe.ckpt": ("str", ""),
    "landscape.view": (("shared", "non_local"), "shared"),
    "landscape.resolution": ("int", 9),
    "landscape.extent": ("floats", (-0.5, 1.5, -0.5, 1.5)),
    "landscape.metrics": ("strs", ("distill_kl",)),
    "landscape.orthogonalize": ("bool", True),
    "landscape.teacher_ckpt": ("str", ""),
    "landscape.local_ckpt": ("str", ""),
    "landscape.far_ckpt": ("str", ""),
    "landscape.fresh_ckpt": ("str", ""),
    "supervised.epochs": ("int", 40),
    "supervised.milestones": ("ints", (20, 30)),
    "supervised.lr0": ("float", 0.1),
    "supervised.lr_decay": ("float", 0.1),
    "supervised.momentum": ("float", 0.9),
    "supervised.weight_decay": ("float", 1e-4),
    "supervised.augmentation": (("none", "flip_padcrop4"), "none"),
    "supervised.batch_size": ("int", 128),
    "supervised.ordering_seed": ("int", 0),
    "supervised.rewind_epochs": ("ints", (0, 1, 2, 5)),
    "supervised.num_classes": ("int", 0),  # 0 means dataset.k
    "imp.rounds": ("int", 3),
    "imp.k": ("float", 0.2),
    "imp.rewind_epoch": ("int", 0),
    "imp.arm": (("student", "random", "both"), "both"),
    "imp.student_ckpt": ("str", ""),
    "lmc.num_inits": ("int", 3),
    "lmc.num_orderings": ("int", 3),
    "lmc.gamma_points": ("int", 5),
    "lmc.arm": (("student", "random", "both"), "both"),
    "lmc.init_ckpts": ("strs", ()),
    "restart.rounds": ("int", 2),
    "sweep.sizes": ("ints", (64, 128, 256, 512)),
}


def _convert(key: str, raw: str):
    tag = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if isinstance(tag, tuple):
            if raw not in tag:
                raise ConfigError(f"{key}: {raw!r} not one of {tag}")
            return raw
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "str":
            return raw
        if tag == "bool":
            if raw not in ("true", "false"):
                raise ConfigError(f"{key}: expected true/false, got {raw!r}")
            return raw == "true"
        parts = [p.strip() for p in raw.split(",") if p.strip()] if raw else []
        if tag == "ints":
            return tuple(int(p) for p in parts)
        if tag == "floats":
            return tuple(float(p) for p in parts)
        if tag == "strs":
            return tuple(parts)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({e})") from None
    raise ConfigError(f"schema bug: unknown tag for {key}")


def _render(key: str, value) -> str:
    tag = SCHEMA[key][0]
    if tag == "bool":
        return "true" if value else "false"
    if tag in ("ints", "floats", "strs") or isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def resolved_text(self) -> str:
        # `out` names where artifacts land, not what the experiment is; it is
        # excluded so reruns into different directories stay byte-identical
        lines = [f"{k} = {_render(k, self.values[k])}" for k in sorted(self.values) if k != "out"]
        return "\n".join(lines) + "\n"

    def model_spec(self) -> ModelSpec:
        v = self.values
        return ModelSpec(
            encoder_kind=v["model.encoder_kind"],
            encoder_widths=v["model.encoder_widths"],
            embed_dim=v["model.embed_dim"],
            norm_kind=v["model.norm_kind"],
            input_shape=v["model.input_shape"],
            hidden_dims=v["model.hidden_dims"],
            bottleneck_dim=v["model.bottleneck_dim"],
            out_dim=v["model.out_dim"],
            use_weight_norm=v["model.use_weight_norm"],
            use_first_linear=v["model.use_first_linear"],
            use_feature_norm=v["model.use_feature_norm"],
        )

    def distill_config(self, seed: int | None = None, alpha: float | None = None) -> DistillConfig:
        v = self.values
        return DistillConfig(
            alpha=v["distill.alpha"] if alpha is None else alpha,
            lr=v["distill.lr"],
            epochs=v["distill.epochs"],
            batch_size=v["distill.batch_size"],
            temperature_t=v["distill.temperature_t"],
            temperature_s=v["distill.temperature_s"],
            ema_gamma=v["distill.ema_gamma"],
            loss_kind=v["distill.loss_kind"],
            teacher_mode=v["distill.teacher_mode"],
            student_mode=v["distill.student_mode"],
            seed=v["seed"] if seed is None else seed,
            checkpoint_epochs=v["distill.checkpoint_epochs"],
        )

    def supervised_config(self) -> SupervisedConfig:
        v = self.values
        return SupervisedConfig(
            model=self.model_spec(),
            num_classes=v["supervised.num_classes"] or v["dataset.k"],
            epochs=v["supervised.epochs"],
            lr0=v["supervised.lr0"],
            milestones=v["supervised.milestones"],
            lr_decay=v["supervised.lr_decay"],
            momentum=v["supervised.momentum"],
            weight_decay=v["supervised.weight_decay"],
            augmentation=v["supervised.augmentation"],
            ordering_seed=v["supervised.ordering_seed"],
            rewind_epochs=v["supervised.rewind_epochs"],
            batch_size=v["supervised.batch_size"],
        )


def parse_config(text: str) -> ExperimentConfig:
    """Parse a config document; unknown and duplicate keys are rejected."""
    values = {k: v for k, (_, v) in SCHEMA.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _convert(key, raw)
    return ExperimentConfig(values)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """key=value strings from the command line, validated like file keys."""
    values = dict(cfg.values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, raw)
    return ExperimentConfig(values)
