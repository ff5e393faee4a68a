"""Experiment configuration, manifests and the split/train/restore/evaluate/report commands."""

import argparse
import hashlib
import json
import logging
import os
import resource
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import torch
from dotenv import dotenv_values, load_dotenv

from inference_3way import AxisGenerator, FusionWeights, TileSpec, restore_volume_3way
from iqa import (
    BrisqueMetric,
    ConstantMetric,
    LaplacianFocusClassifier,
    MeanIntensityMetric,
    MetricError,
    MicroscopyIfqMetric,
    QualityReport,
    TorchScriptFocusClassifier,
    TorchScriptMetric,
    evaluate_volumes,
    load_brisque_model,
)
from montage import save_montage
from networks import DiscriminatorArch, GeneratorArch
from sectioning import ALL_AXES, PAD_MODES, SliceAxis, dump_sections, extract_sections
from spcyclegan_core import (
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    code_fingerprint,
    learning_rate_at,
    load_checkpoint,
    make_identity_models,
    read_checkpoint,
    save_checkpoint,
    train,
)
from synthetic import PhantomSpec, make_phantom
from volume_io import (
    DatasetSplit,
    SubvolumeRange,
    VolumeError,
    crop_subvolume,
    load_volume,
    probe_shape,
    save_volume,
    split_training_volumes,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
COMMANDS = ("split", "train", "restore", "evaluate", "report", "make-synthetic")
MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    """Invalid experiment configuration; raised before any file is written."""


def _truthy(value):
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _patch_size(text):
    parts = str(text).lower().replace("x", ",").split(",")
    if len(parts) == 1:
        parts = parts * 2
    return int(parts[0]), int(parts[1])


# (key suffix, TrainConfig field, parser)
TRAIN_KEYS = (
    ("LAMBDA1", "lambda1", float),
    ("LAMBDA2", "lambda2", float),
    ("LR", "lr", float),
    ("EPOCHS_CONST", "epochs_const", int),
    ("EPOCHS_DECAY", "epochs_decay", int),
    ("BETA1", "beta1", float),
    ("BETA2", "beta2", float),
    ("BATCH_SIZE", "batch_size", int),
    ("PATCHES_PER_SECTION", "patches_per_section", int),
    ("GAN_MODE", "gan_mode", str),
    ("POOL_SIZE", "pool_size", int),
    ("H_UPDATE", "h_update", str),
    ("CHECKPOINT_EVERY", "checkpoint_every", int),
    ("DEVICE", "device", str),
)
GENERATOR_KEYS = (
    ("GENERATOR", "kind", str),
    ("NGF", "ngf", int),
    ("N_BLOCKS", "n_blocks", int),
    ("N_DOWNSAMPLING", "n_downsampling", int),
    ("PADDING", "padding", str),
)
DISCRIMINATOR_KEYS = (("NDF", "ndf", int), ("N_LAYERS", "n_layers", int))


class _Source:
    """Key lookup honoring file > environment > default."""

    def __init__(self, values):
        self.values = values

    def get(self, key, default=None):
        value = self.values.get(key)
        if value is None or value == "":
            value = os.getenv(key)
        if value is None or value == "":
            return default
        return value


@dataclass
class ExperimentConfig:
    input_volume: str = None
    input_format: str = None
    split: DatasetSplit = None
    train: dict = field(default_factory=dict)
    fusion: FusionWeights = field(default_factory=FusionWeights)
    pad_mode: str = "reflect"
    inference_batch: int = 4
    tile: TileSpec = None
    workers: int = 3
    metrics: list = field(default_factory=lambda: ["microscopy_ifq"])
    metric_models: dict = field(default_factory=dict)
    eval_range: SubvolumeRange = None
    eval_workers: int = 1
    output_dir: str = "runs"
    seed: int = 0
    bit_depth: int = 8
    debug_sections: bool = False
    dump_intermediate: bool = False
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    source_path: str = None

    def snapshot(self):
        """JSON-ready view of the resolved configuration."""
        return {
            "input_volume": self.input_volume,
            "input_format": self.input_format,
            "split": {
                "blurred": str(self.split.blurred_range) if self.split else None,
                "clean": str(self.split.clean_range) if self.split else None,
                "test": str(self.split.test_range) if self.split else None,
            },
            "train": {axis: cfg.to_dict() for axis, cfg in self.train.items()},
            "fusion": {
                "weights": [self.fusion.w1, self.fusion.w2, self.fusion.w3],
                "pad_mode": self.pad_mode,
                "batch": self.inference_batch,
                "tile": [self.tile.size, self.tile.overlap] if self.tile else None,
            },
            "eval": {
                "metrics": list(self.metrics),
                "models": dict(self.metric_models),
                "range": str(self.eval_range) if self.eval_range else None,
            },
            "output_dir": self.output_dir,
            "seed": self.seed,
            "bit_depth": self.bit_depth,
            "phantom": self.phantom.to_dict(),
        }

    def stage_hash(self, stage):
        """Hash of the config subset a stage's artifacts depend on."""
        snap = self.snapshot()
        subset = {"input": [snap["input_volume"], snap["input_format"]], "split": snap["split"]}
        if stage in ("train", "restore", "evaluate"):
            subset["train"] = snap["train"]
        if stage in ("restore", "evaluate"):
            subset["fusion"] = snap["fusion"]
            subset["bit_depth"] = snap["bit_depth"]
        if stage == "evaluate":
            subset["eval"] = snap["eval"]
        if stage == "make-synthetic":
            subset = {"phantom": snap["phantom"], "bit_depth": snap["bit_depth"]}
        return hashlib.md5(json.dumps(subset, sort_keys=True).encode()).hexdigest()[:12]

    def stage_dir(self, stage):
        return Path(self.output_dir) / f"{stage}-{self.stage_hash(stage)}"

    def validate(self, command):
        """Reject invalid configurations before any filesystem mutation."""
        if command == "make-synthetic":
            try:
                self.phantom.validate()
            except VolumeError as e:
                raise ConfigError(str(e))
            return
        if command in ("split", "train", "restore", "evaluate"):
            if not self.input_volume:
                raise ConfigError("INPUT_VOLUME is not set")
            if self.split is None:
                raise ConfigError("SPLIT_BLURRED, SPLIT_CLEAN and SPLIT_TEST must all be set")
            try:
                shape = probe_shape(self.input_volume, self.input_format)
                self.split.validate(shape)
                if self.eval_range is not None:
                    self.eval_range.validate(self.split.test_range.shape())
            except VolumeError as e:
                raise ConfigError(str(e))
        if command == "train":
            for axis_name, cfg in self.train.items():
                try:
                    cfg.validate()
                except ValueError as e:
                    raise ConfigError(f"TRAIN ({axis_name}): {e}")
                axis = SliceAxis(axis_name)
                for label, r in (("blurred", self.split.blurred_range), ("clean", self.split.clean_range)):
                    dims = _section_dims(r.shape(), axis)
                    ph, pw = cfg.patch_size_for(axis)
                    if cfg.generator.kind != "identity" and (ph > dims[0] or pw > dims[1]):
                        raise ConfigError(
                            f"{axis_name} patch {ph}x{pw} does not fit {label} sections of {dims[0]}x{dims[1]}"
                        )
        if self.pad_mode not in PAD_MODES:
            raise ConfigError(f"FUSION_PAD_MODE must be one of {PAD_MODES}")
        if self.bit_depth not in (8, 16):
            raise ConfigError(f"VOLUME_BIT_DEPTH must be 8 or 16, got {self.bit_depth}")


def _section_dims(shape, axis):
    x, y, z = shape
    return {SliceAxis.XY: (x, y), SliceAxis.XZ: (x, z), SliceAxis.YZ: (y, z)}[axis]


def _train_config(source, axis, seed):
    prefixes = (f"TRAIN_{axis.value.upper()}_", "TRAIN_")

    def lookup(suffix):
        for prefix in prefixes:
            value = source.get(prefix + suffix)
            if value is not None:
                return value
        return None

    def collect(keys, defaults):
        values = {}
        for suffix, name, parse in keys:
            raw = lookup(suffix)
            values[name] = parse(raw) if raw is not None else getattr(defaults, name)
        return values

    base = TrainConfig()
    values = collect(TRAIN_KEYS, base)
    values["generator"] = GeneratorArch(**collect(GENERATOR_KEYS, base.generator))
    values["discriminator"] = DiscriminatorArch(**collect(DISCRIMINATOR_KEYS, base.discriminator))
    patch = lookup("PATCH_SIZE")
    patch_sizes = dict(base.patch_sizes)
    if patch is not None:
        patch_sizes[axis.value] = _patch_size(patch)
    values["patch_sizes"] = patch_sizes
    values["seed"] = seed
    return TrainConfig(**values)


def load_experiment_config(path=None, seed=None, out=None):
    """Resolve an experiment file with CLI overrides (highest), then the file, environment and defaults."""
    load_dotenv()
    values = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Experiment config not found: {path}")
        values = dotenv_values(path)
    source = _Source(values)
    try:
        resolved_seed = int(seed if seed is not None else source.get("SEED", 0))
        split = None
        ranges = [source.get(k) for k in ("SPLIT_BLURRED", "SPLIT_CLEAN", "SPLIT_TEST")]
        if all(ranges):
            split = DatasetSplit(*(SubvolumeRange.parse(r) for r in ranges))
        eval_range = source.get("EVAL_RANGE")
        tile_size = int(source.get("FUSION_TILE_SIZE", 0))
        shape = tuple(int(n) for n in str(source.get("SYNTH_SHAPE", "64,64,64")).split(","))
        config = ExperimentConfig(
            input_volume=source.get("INPUT_VOLUME"),
            input_format=source.get("INPUT_FORMAT"),
            split=split,
            train={axis.value: _train_config(source, axis, resolved_seed) for axis in ALL_AXES},
            fusion=FusionWeights.parse(source.get("FUSION_WEIGHTS", "1,1,1")),
            pad_mode=source.get("FUSION_PAD_MODE", "reflect"),
            inference_batch=int(source.get("FUSION_BATCH_SIZE", 4)),
            tile=TileSpec(tile_size, int(source.get("FUSION_TILE_OVERLAP", 32))) if tile_size > 0 else None,
            workers=int(source.get("FUSION_WORKERS", 3)),
            metrics=[m.strip() for m in source.get("EVAL_METRICS", "microscopy_ifq").split(",") if m.strip()],
            metric_models={
                "brisque": source.get("METRIC_BRISQUE_MODEL"),
                "og_iqa": source.get("METRIC_OG_IQA_MODEL"),
                "microscopy_ifq": source.get("METRIC_IFQ_MODEL", "surrogate"),
                "constant": source.get("METRIC_CONSTANT_VALUE", "0"),
            },
            eval_range=SubvolumeRange.parse(eval_range) if eval_range else None,
            eval_workers=int(source.get("EVAL_WORKERS", 1)),
            output_dir=out or source.get("OUTPUT_DIR", "runs"),
            seed=resolved_seed,
            bit_depth=int(source.get("VOLUME_BIT_DEPTH", 8)),
            debug_sections=_truthy(source.get("DEBUG_SECTIONS", "0")),
            dump_intermediate=_truthy(source.get("DUMP_INTERMEDIATE", "0")),
            phantom=PhantomSpec(
                shape=shape,
                n_ellipsoids=int(source.get("SYNTH_ELLIPSOIDS", 30)),
                n_tubes=int(source.get("SYNTH_TUBES", 6)),
                sigma_min=float(source.get("SYNTH_SIGMA_MIN", 0.5)),
                sigma_max=float(source.get("SYNTH_SIGMA_MAX", 3.0)),
                photons=float(source.get("SYNTH_PHOTONS", 200)),
                decay_tau=float(source.get("SYNTH_DECAY_TAU", 96)),
                seed=resolved_seed,
            ),
            source_path=str(path) if path else None,
        )
    except (ValueError, VolumeError) as e:
        raise ConfigError(f"Invalid experiment config: {e}")
    return config


# --- Manifest --------------------------------------------------------------


@dataclass
class ExperimentManifest:
    path: Path
    data: dict = field(default_factory=dict)

    @classmethod
    def open(cls, output_dir):
        path = Path(output_dir) / MANIFEST_NAME
        data = {}
        if path.exists():
            try:
                with open(path) as f:
                    data = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                logger.warning(f"Could not read manifest {path}, starting a new one: {e}")
        return cls(path, data)

    def update_config(self, config):
        snapshot = config.snapshot()
        self.data["config"] = snapshot
        self.data["config_hash"] = hashlib.md5(json.dumps(snapshot, sort_keys=True).encode()).hexdigest()
        self.data["config_source"] = config.source_path
        self.data["code_fingerprint"] = code_fingerprint()
        self.data["determinism"] = {
            "cudnn_deterministic": bool(torch.backends.cudnn.deterministic),
            "cudnn_benchmark": bool(torch.backends.cudnn.benchmark),
            "deterministic_algorithms": bool(torch.are_deterministic_algorithms_enabled()),
            "threaded_inference": True,
        }

    def record(self, stage, **info):
        self.data.setdefault("stages", {}).setdefault(stage, {}).update(info)

    def stage(self, stage):
        return self.data.get("stages", {}).get(stage, {})

    def save(self):
        os.makedirs(self.path.parent, exist_ok=True)
        self.data["updated"] = datetime.now().isoformat(timespec="seconds")
        with open(self.path, "w") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)


def _peak_rss_mb():
    # ru_maxrss is in kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


@contextmanager
def stage_timer(manifest, stage):
    start = time.perf_counter()
    status = "failed"
    try:
        yield
        status = "ok"
    finally:
        wall = time.perf_counter() - start
        peak = _peak_rss_mb()
        logger.info(f"stage={stage} status={status} wall_s={wall:.2f} peak_rss_mb={peak:.1f}")
        manifest.record(stage, status=status, wall_s=round(wall, 3), peak_rss_mb=round(peak, 1))
        manifest.save()


# --- Commands --------------------------------------------------------------


def _split_paths(config):
    directory = config.stage_dir("split")
    return {name: directory / f"{name}.tif" for name in ("blurred", "clean", "test")}


def cmd_split(config, manifest):
    """Crop the blurred, clean and test subvolumes out of the input volume."""
    volume = load_volume(config.input_volume, config.input_format)
    blurred, clean, test = split_training_volumes(volume, config.split)
    paths = _split_paths(config)
    for name, part in zip(("blurred", "clean", "test"), (blurred, clean, test)):
        save_volume(part, paths[name], bit_depth=config.bit_depth)
    manifest.record(
        "split", outputs={k: str(v) for k, v in paths.items()},
        shapes={"blurred": blurred.shape, "clean": clean.shape, "test": test.shape},
    )
    return paths


def _require(path, what):
    if not Path(path).exists():
        raise VolumeError(f"{what} not found: {path}; run the earlier stage first")


def _checkpoint_path(config, axis):
    return config.stage_dir("train") / "checkpoints" / f"{axis.value}_latest.pt"


def _axes(axis_arg):
    if axis_arg in (None, "all"):
        return list(ALL_AXES)
    return [SliceAxis.parse(axis_arg)]


def cmd_train(config, manifest, axis="all", resume=False):
    """Train one SpCycleGAN per requested axis on the blurred and clean subvolumes."""
    paths = _split_paths(config)
    _require(paths["blurred"], "Blurred subvolume")
    _require(paths["clean"], "Clean subvolume")
    blurred = load_volume(paths["blurred"])
    clean = load_volume(paths["clean"])
    train_dir = config.stage_dir("train")
    checkpoints = {}
    for slice_axis in _axes(axis):
        cfg = config.train[slice_axis.value]
        checkpoint_dir = train_dir / "checkpoints"
        latest = _checkpoint_path(config, slice_axis)
        if cfg.generator.kind == "identity":
            models = make_identity_models(slice_axis, cfg)
            save_checkpoint(models, latest, cfg=cfg)
            logger.info(f"Wrote identity checkpoint for {slice_axis.value}")
        else:
            stack_a = extract_sections(blurred, slice_axis)
            stack_b = extract_sections(clean, slice_axis)
            if config.debug_sections:
                dump_sections(stack_a, train_dir / "sections", prefix=f"A_{slice_axis.value}", limit=8)
                dump_sections(stack_b, train_dir / "sections", prefix=f"B_{slice_axis.value}", limit=8)
            history_path = train_dir / f"history_{slice_axis.value}.csv"
            resume_from = latest if resume and latest.exists() else None
            if resume_from:
                epoch = read_checkpoint(resume_from)["epoch"]
                logger.info(
                    f"Resuming {slice_axis.value} at epoch {epoch + 1}, lr={learning_rate_at(cfg, epoch + 1):.6g}"
                )
            elif history_path.exists():
                history_path.unlink()
            train(stack_a, stack_b, cfg, checkpoint_dir=checkpoint_dir, history_path=history_path,
                  resume_from=resume_from)
        checkpoints[slice_axis.value] = str(latest)
    manifest.record("train", checkpoints=checkpoints, directory=str(train_dir))
    return checkpoints


def cmd_restore(config, manifest):
    """Restore the test subvolume along each weighted axis and fuse."""
    test_path = _split_paths(config)["test"]
    _require(test_path, "Test subvolume")
    generators = {}
    for axis in config.fusion.enabled_axes():
        path = _checkpoint_path(config, axis)
        if not path.exists():
            raise CheckpointError(
                f"No {axis.value} checkpoint at {path}; train that axis or set its fusion weight to 0"
            )
        models = load_checkpoint(path, expected_arch=config.train[axis.value].generator)
        if models.axis is not None and models.axis != axis:
            raise CheckpointError(f"Checkpoint {path} is tagged {models.axis.value}, expected {axis.value}")
        generators[axis] = AxisGenerator.from_models(models)

    test = load_volume(test_path)
    fused, per_axis = restore_volume_3way(
        generators, test, config.fusion, workers=config.workers,
        pad_mode=config.pad_mode, batch_size=config.inference_batch, tile=config.tile,
    )
    restore_dir = config.stage_dir("restore")
    outputs = {"restored": str(restore_dir / "restored.tif")}
    save_volume(fused, outputs["restored"], bit_depth=config.bit_depth)
    if config.dump_intermediate:
        for axis, volume in per_axis.items():
            outputs[f"restored_{axis.value}"] = str(restore_dir / f"restored_{axis.value}.tif")
            save_volume(volume, outputs[f"restored_{axis.value}"], bit_depth=config.bit_depth)
    manifest.record("restore", outputs=outputs, weights=[config.fusion.w1, config.fusion.w2, config.fusion.w3])
    return outputs


def build_metrics(config):
    """Instantiate the configured metric adapters, skipping any that fail to load."""
    metrics = []
    for name in config.metrics:
        try:
            model = config.metric_models.get(name)
            if name == "brisque":
                if not model:
                    raise MetricError("METRIC_BRISQUE_MODEL is not set")
                metrics.append(BrisqueMetric(load_brisque_model(model)))
            elif name == "og_iqa":
                if not model:
                    raise MetricError("METRIC_OG_IQA_MODEL is not set")
                metrics.append(TorchScriptMetric(model, name="og_iqa", valid_range=(-1.0, 1.0)))
            elif name == "microscopy_ifq":
                if model in (None, "surrogate"):
                    classifier = LaplacianFocusClassifier()
                else:
                    classifier = TorchScriptFocusClassifier(model)
                metrics.append(MicroscopyIfqMetric(classifier))
            elif name == "mean_intensity":
                metrics.append(MeanIntensityMetric())
            elif name == "constant":
                metrics.append(ConstantMetric(float(model or 0)))
            else:
                raise MetricError(f"Unknown metric '{name}'")
        except Exception as e:
            logger.error(f"Error loading metric {name}: {e}")
    return metrics


def _restored_paths(config):
    """Restored volumes of the current config's restore stage: the fusion, then any per-axis dumps."""
    restore_dir = config.stage_dir("restore")
    fused = restore_dir / "restored.tif"
    if not fused.exists():
        raise VolumeError(f"No restored volume for this configuration at {fused}; run restore first")
    paths = {"restored": fused}
    for axis in ALL_AXES:
        path = restore_dir / f"restored_{axis.value}.tif"
        if path.exists():
            paths[f"restored_{axis.value}"] = path
    return paths


def _default_eval_volumes(config):
    volumes = {"original": str(_split_paths(config)["test"])}
    for key, path in _restored_paths(config).items():
        volumes["proposed" if key == "restored" else key] = str(path)
    return volumes


def cmd_evaluate(config, manifest, volume_paths=None):
    """Score volumes with the 3-way protocol and write the report as CSV and text."""
    volume_paths = volume_paths or _default_eval_volumes(config)
    metrics = build_metrics(config)
    if not metrics:
        raise MetricError("No metric adapter could be loaded")
    volumes = {}
    for name, path in volume_paths.items():
        _require(path, f"Volume '{name}'")
        volume = load_volume(path)
        if config.eval_range is not None:
            volume = crop_subvolume(volume, config.eval_range)
        volumes[name] = volume
    report = evaluate_volumes(
        volumes, metrics, workers=config.eval_workers, best_effort=True,
        metadata={"config_hash": config.stage_hash("evaluate"), "range": str(config.eval_range or "full")},
    )
    evaluate_dir = config.stage_dir("evaluate")
    csv_path, text_path = evaluate_dir / "report.csv", evaluate_dir / "report.txt"
    report.to_csv(csv_path)
    text = report.to_text()
    with open(text_path, "w") as f:
        f.write(text)
    logger.info(f"Quality report:\n{text}")
    manifest.record(
        "evaluate", csv=str(csv_path), text=str(text_path),
        volumes={k: str(v) for k, v in volume_paths.items()}, errors=report.errors,
    )
    return report


def cmd_report(config, manifest):
    """Montage the test and restored volumes and re-render the evaluation table."""
    test_path = _split_paths(config)["test"]
    _require(test_path, "Test subvolume")
    restored = _restored_paths(config)
    volume_paths = {"original": test_path, "restored": restored["restored"]}
    if "restored_xy" in restored:
        volume_paths["restored_xy"] = restored["restored_xy"]
    volumes = {name: load_volume(path) for name, path in volume_paths.items()}
    x, y, z = next(iter(volumes.values())).shape
    report_dir = Path(config.output_dir) / "report"
    outputs = {"montage": str(report_dir / "montage.png")}
    if not save_montage(volumes, outputs["montage"], z=(z + 1) // 2, y=(y + 1) // 2):
        raise VolumeError(f"Montage could not be written to {outputs['montage']}")
    csv_path = config.stage_dir("evaluate") / "report.csv"
    if csv_path.exists():
        outputs["table"] = str(report_dir / "table.txt")
        with open(outputs["table"], "w") as f:
            f.write(QualityReport.from_csv(csv_path).to_text())
    manifest.record("report", outputs=outputs)
    return outputs


def cmd_make_synthetic(config, manifest):
    """Write a clean and a degraded phantom volume for desk-scale runs."""
    clean, degraded = make_phantom(config.phantom)
    directory = config.stage_dir("make-synthetic")
    outputs = {"clean": str(directory / "phantom_clean.tif"), "degraded": str(directory / "phantom_degraded.tif")}
    save_volume(clean, outputs["clean"], bit_depth=config.bit_depth)
    save_volume(degraded, outputs["degraded"], bit_depth=config.bit_depth)
    manifest.record("make-synthetic", outputs=outputs, spec=config.phantom.to_dict())
    return outputs


# --- Entry -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(description="3-way SpCycleGAN blind deconvolution of microscopy volumes")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sub = subparsers.add_parser(command)
        sub.add_argument("--config", type=str, default=None, help="Experiment file (KEY=value lines)")
        sub.add_argument("--axis", choices=["xy", "xz", "yz", "all"], default="all")
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--out", type=str, default=None, help="Output directory")
        if command == "train":
            sub.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")
        if command == "evaluate":
            sub.add_argument("--volume", action="append", default=[], metavar="NAME=PATH")
    return parser


def _parse_volume_args(items):
    volumes = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--volume expects NAME=PATH, got '{item}'")
        name, path = item.split("=", 1)
        volumes[name] = path
    return volumes


def main(argv=None):
    """Run one command and return the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        config = load_experiment_config(args.config, seed=args.seed, out=args.out)
        config.validate(args.command)
        volume_args = _parse_volume_args(getattr(args, "volume", []))
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG

    manifest = ExperimentManifest.open(config.output_dir)
    manifest.update_config(config)
    try:
        with stage_timer(manifest, args.command):
            if args.command == "split":
                cmd_split(config, manifest)
            elif args.command == "train":
                cmd_train(config, manifest, axis=args.axis, resume=args.resume)
            elif args.command == "restore":
                cmd_restore(config, manifest)
            elif args.command == "evaluate":
                cmd_evaluate(config, manifest, volume_args or None)
            elif args.command == "report":
                cmd_report(config, manifest)
            elif args.command == "make-synthetic":
                cmd_make_synthetic(config, manifest)
    except (VolumeError, CheckpointError, TrainingDivergedError, MetricError, OSError) as e:
        logger.error(f"Error running {args.command}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Unexpected error running {args.command}: {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    return EXIT_OK
