"""Experiment configuration and the run pipelines behind the CLI.

A run directory always holds ``config.json`` (the fully resolved
configuration), the artifacts of the step, and ``manifest.json`` with the
SHA-256 of every other file in the directory.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .cnop import CnopConfig, Region, importance_map, solve_cnop, write_trace
from .errors import ValidationError
from .gridio import (
    DEFAULT_START,
    DEFAULT_VARIABLES,
    DESK_LEVELS,
    FULL_LEVELS,
    Dataset,
    GridSpec,
    NormStats,
    StateTensor,
    avsf_read,
    avsf_write,
    synth_generate,
    train_test_split,
)
from .model import VARIANTS, ModelConfig, load_checkpoint, save_checkpoint
from .physics import ic_index
from .trainer import TrainConfig, train, write_history
from .verify import MetricReport, climatology, evaluate_model, physical_forecasts

log = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
MANIFEST_NAME = "manifest.json"
MODEL_NAME = "model.avsc"
GRID_PRESETS = {
    "desk": {"n_lat": 32, "n_lon": 64, "levels": list(DESK_LEVELS), "poles": False},
    "full": {"n_lat": 181, "n_lon": 360, "levels": list(FULL_LEVELS), "poles": True},
}


@dataclass
class GridConfig:
    preset: str | None = "desk"
    n_lat: int | None = None
    n_lon: int | None = None
    levels: list | None = None
    variables: list = field(default_factory=lambda: list(DEFAULT_VARIABLES))
    step_hours: int = 6
    poles: bool | None = None

    def __post_init__(self):
        if self.preset is not None:
            if self.preset not in GRID_PRESETS:
                raise ValidationError(f"unknown grid preset {self.preset!r}; expected one of {sorted(GRID_PRESETS)}")
            for k, v in GRID_PRESETS[self.preset].items():
                if getattr(self, k) is None:
                    setattr(self, k, v)
        missing = [k for k in ("n_lat", "n_lon", "levels", "poles") if getattr(self, k) is None]
        if missing:
            raise ValidationError(f"grid section lacks {missing} and names no preset")

    def spec(self) -> GridSpec:
        return GridSpec.regular(self.n_lat, self.n_lon, self.levels, self.variables, self.step_hours, self.poles)


@dataclass
class DataConfig:
    steps: int = 200
    seed: int | None = None
    start: int = DEFAULT_START


@dataclass
class ModelSection:
    embed_dim: int = 64
    n_blocks: int = 4
    window: int = 4
    patch: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    variant: str = "full"


@dataclass
class EvaluateConfig:
    leads: int = 28
    max_inits: int | None = None


@dataclass
class CnopSection:
    xi: float = 0.6
    k_max: int = 50
    memory: int = 10
    alpha_min: float = 1e-3
    alpha_max: float = 50.0
    lead_steps: int = 12
    region: dict = field(default_factory=lambda: {"lat": [21.0, 30.0], "lon": [105.0, 121.0]})
    seed: int | None = None
    perturb: str = "current"
    smooth: bool = True
    init_index: int = 1


@dataclass
class AblationConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    variants: list = field(default_factory=lambda: list(VARIANTS))
    leads: int = 5
    max_inits: int | None = None


@dataclass
class PathsConfig:
    data: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    cnop: CnopSection = field(default_factory=CnopSection)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    # -- derived objects
    def grid_spec(self) -> GridSpec:
        return self.grid.spec()

    def model_config(self, spec: GridSpec | None = None, variant: str | None = None) -> ModelConfig:
        m = dataclasses.asdict(self.model)
        if variant is not None:
            m["variant"] = variant
        return ModelConfig(spec or self.grid_spec(), mask_threshold=self.train.mask_threshold, **m)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.train.seed if seed is None else seed)

    def cnop_config(self) -> CnopConfig:
        d = dataclasses.asdict(self.cnop)
        d.pop("init_index")
        d["region"] = Region(tuple(d["region"]["lat"]), tuple(d["region"]["lon"]))
        d["seed"] = self.seed if d["seed"] is None else d["seed"]
        return CnopConfig(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_SECTION_TYPES = {
    "grid": GridConfig, "data": DataConfig, "model": ModelSection, "train": TrainConfig,
    "evaluate": EvaluateConfig, "cnop": CnopSection, "ablation": AblationConfig, "paths": PathsConfig,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ValidationError(f"section {where!r} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValidationError(f"unknown keys in {where!r}: {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ValidationError(f"bad section {where!r}: {exc}") from exc


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build a config, rejecting unknown keys at every level.

    The top-level ``seed`` fills ``data.seed`` and ``train.seed`` when those
    are not given explicitly; ``cnop.seed`` falls back to it at solve time.
    """
    if not isinstance(d, dict):
        raise ValidationError("configuration must be a JSON object")
    unknown = sorted(set(d) - set(_SECTIONS))
    if unknown:
        raise ValidationError(f"unknown top-level keys: {unknown}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ValidationError("seed must be an integer")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        values = d.get(name, {})
        if values is None:
            values = {}
        if not isinstance(values, dict):
            raise ValidationError(f"section {name!r} must be a JSON object")
        values = dict(values)
        if name in ("train", "data") and values.get("seed") is None:
            values["seed"] = seed
        sections[name] = _build(cls, values, name)
    cfg = ExperimentConfig(seed=seed, **sections)
    if cfg.model.variant not in VARIANTS:
        raise ValidationError(f"unknown variant {cfg.model.variant!r}")
    cfg.cnop_config()  # validates the cnop section
    return cfg


def load_config(source=None) -> ExperimentConfig:
    """From a path, a dict, or ``None`` (defaults).

    A bare name such as ``desk.json`` that does not exist on disk is looked
    up among the packaged configs.
    """
    if source is None:
        return config_from_dict({})
    if isinstance(source, dict):
        return config_from_dict(source)
    path = Path(source)
    if not path.exists():
        packaged = Path(__file__).parent / "configs" / path.name
        if packaged.exists():
            path = packaged
        else:
            raise ValidationError(f"config file {source} not found")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(d)


# --------------------------------------------------------------------------
# run-directory plumbing


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir) -> dict:
    """Hash every file of ``run_dir``; nested runs with their own manifest are skipped."""
    run_dir = Path(run_dir)
    nested = {m.parent for m in run_dir.rglob(MANIFEST_NAME) if m.parent != run_dir}
    files = sorted(
        p for p in run_dir.rglob("*")
        if p.is_file() and p.name != MANIFEST_NAME and not any(n in p.parents for n in nested)
    )
    manifest = {"files": {p.relative_to(run_dir).as_posix(): sha256_file(p) for p in files}}
    write_json(manifest, run_dir / MANIFEST_NAME)
    return manifest


def _start_run(cfg: ExperimentConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.to_dict(), out / CONFIG_NAME)
    return out


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.paths.data:
        return avsf_read(cfg.paths.data)
    return synth_generate(cfg.grid_spec(), cfg.data.seed, cfg.data.steps, cfg.data.start)


def split(cfg: ExperimentConfig, dataset: Dataset) -> tuple[Dataset, Dataset]:
    return train_test_split(dataset, cfg.train.train_fraction)


def load_run(run_dir):
    """``(config, model)`` of a finished ``train`` run."""
    run_dir = Path(run_dir)
    if not (run_dir / CONFIG_NAME).exists() or not (run_dir / MODEL_NAME).exists():
        raise ValidationError(f"{run_dir} is not a training run directory")
    cfg = load_config(run_dir / CONFIG_NAME)
    return cfg, load_checkpoint(run_dir / MODEL_NAME)


def _init_indices(n_test: int, leads: int, limit: int | None) -> list[int]:
    idx = list(range(1, n_test - leads))
    if not idx:
        raise ValidationError(f"test split of {n_test} states is too short for {leads} leads")
    if limit is not None and len(idx) > limit:
        # evenly spread, deterministic
        idx = [idx[i] for i in np.linspace(0, len(idx) - 1, limit).round().astype(int)]
    return idx


# --------------------------------------------------------------------------
# pipelines


def run_gen_data(cfg: ExperimentConfig, out) -> Path:
    out = _start_run(cfg, out)
    ds = synth_generate(cfg.grid_spec(), cfg.data.seed, cfg.data.steps, cfg.data.start)
    avsf_write(ds, out / "dataset.avsf")
    write_manifest(out)
    return out / "dataset.avsf"


def run_train(cfg: ExperimentConfig, out) -> Path:
    out = _start_run(cfg, out)
    ds = load_dataset(cfg)
    model, history = train(ds, cfg.model_config(ds.spec), cfg.train_config(), out_dir=out)
    save_checkpoint(model, out / MODEL_NAME)
    write_history(history, out / "history.csv")
    if history:
        plotting.plot_loss(history, out / "loss.png")
    write_manifest(out)
    return out


def run_evaluate(run_dir, leads: int | None = None, baseline=None, max_inits: int | None = None) -> MetricReport:
    run_dir = Path(run_dir)
    cfg, model = load_run(run_dir)
    leads = leads or cfg.evaluate.leads
    max_inits = cfg.evaluate.max_inits if max_inits is None else max_inits
    train_ds, test = split(cfg, load_dataset(cfg))
    report = evaluate_model(model, test, climatology(train_ds), leads, model.stats(),
                            _init_indices(len(test), leads, max_inits))
    if baseline is not None:
        report = report.with_baseline(MetricReport.read_csv(baseline))
    report.write_csv(run_dir / "metrics.csv")
    cloud = [n for n in report.channels if n.startswith(("ciwc", "clwc", "crwc", "cswc"))]
    background = [n for n in report.channels if n not in cloud]
    plotting.plot_metric_curves(report, "rmse", run_dir / "rmse_cloud.png", cloud)
    plotting.plot_metric_curves(report, "acc", run_dir / "acc_background.png", background)
    write_manifest(run_dir)
    return report


def run_forecast(run_dir, init: int = 1, steps: int = 4, out=None, maps: tuple[str, ...] = ()) -> Path:
    cfg, model = load_run(run_dir)
    out = Path(out) if out is not None else Path(run_dir) / "forecast"
    _, test = split(cfg, load_dataset(cfg))
    if not 1 <= init < len(test):
        raise ValidationError(f"init index must lie in [1, {len(test) - 1}]")
    fc = physical_forecasts(model, model.stats(), test.values[init - 1], test.values[init], steps)
    spec = test.spec
    times = int(test.times[init]) + spec.step_hours * 3600 * np.arange(1, steps + 1)
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.to_dict(), out / CONFIG_NAME)
    avsf_write(Dataset(spec, fc, times), out / "forecast.avsf")
    names = spec.channel_names()
    for name in maps:
        if name not in names:
            raise ValidationError(f"unknown channel {name!r}")
        for k in range(steps):
            plotting.write_pgm(fc[k, names.index(name)], out / "maps" / f"{name}_step{k + 1:02d}.pgm")
    write_manifest(out)
    return out


def run_ic_index(cfg: ExperimentConfig, index: int, out, pgm: bool = True) -> Path:
    """Per-level IC of one state as a one-variable AVSF, with optional maps."""
    dataset = load_dataset(cfg)
    if not 0 <= index < len(dataset):
        raise ValidationError(f"state index {index} outside [0, {len(dataset) - 1}]")
    out = _start_run(cfg, out)
    state: StateTensor = dataset[index]
    ic = ic_index(StateTensor(state.spec, state.values.astype(np.float64), state.time)).values
    spec = dataclasses.replace(dataset.spec, variables=("ic",))
    avsf_write(Dataset(spec, ic[None], [state.time]), out / "ic.avsf")
    for k, lev in enumerate(spec.levels):
        if pgm:
            plotting.write_pgm(ic[k], out / "maps" / f"ic{int(round(lev))}.pgm")
        plotting.plot_map(ic[k], spec.latitudes, spec.longitudes, out / f"ic{int(round(lev))}.png",
                          f"IC {int(round(lev))} hPa")
    write_manifest(out)
    return out


def run_cnop(run_dir, cfg_override: dict | None = None, out=None, maps: bool = False) -> Path:
    run_dir = Path(run_dir)
    cfg, model = load_run(run_dir)
    if cfg_override:
        d = cfg.to_dict()
        d["cnop"].update(cfg_override)
        cfg = config_from_dict(d)
    ccfg = cfg.cnop_config()
    out = Path(out) if out is not None else run_dir / "cnop"
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.to_dict(), out / CONFIG_NAME)
    _, test = split(cfg, load_dataset(cfg))
    i = cfg.cnop.init_index
    if not 1 <= i < len(test):
        raise ValidationError(f"cnop.init_index must lie in [1, {len(test) - 1}]")
    res = solve_cnop(model, (test.values[i - 1], test.values[i]), ccfg, model.stats())
    spec = test.spec
    avsf_write(Dataset(spec, res.delta.values[None], [int(test.times[i])]), out / "delta.avsf")
    write_trace(res.trace, out / "trace.csv")
    write_json({"J": res.J, "converged": res.converged, "iterations": len(res.trace)}, out / "summary.json")
    energy = importance_map(res.delta)
    box = (ccfg.region.lat, ccfg.region.lon)
    for k, lev in enumerate(spec.levels):
        plotting.plot_map(energy[k], spec.latitudes, spec.longitudes, out / f"energy{int(round(lev))}.png",
                          f"perturbation energy {int(round(lev))} hPa", box)
    if res.trace:
        plotting.plot_trace(res.trace, out / "trace.png")
    if maps:
        names = spec.channel_names()
        for c in range(spec.n_channels):
            if np.any(res.delta.values[c]):
                plotting.write_pgm(res.delta.values[c], out / "maps" / f"{names[c]}.pgm")
    write_manifest(out)
    return out


# --------------------------------------------------------------------------
# ablation

TABLE_LABELS = {"baseline": "Baseline", "no_mp_ic": "w/o (MP, IC)", "no_ic": "w/o IC", "full": "Full"}


@dataclass
class AblationResult:
    variants: list[str]
    seeds: list[int]
    channels: list[str]
    rmse: np.ndarray  # [seed, variant, channel], mean over leads
    cloud_score: np.ndarray  # [seed, variant]

    def wins(self, better: str, worse: str) -> int:
        i, j = self.variants.index(better), self.variants.index(worse)
        return int(np.sum(self.cloud_score[:, i] <= self.cloud_score[:, j]))


def ablation_scores(report: MetricReport, stats: NormStats, spec: GridSpec) -> tuple[np.ndarray, float]:
    """Lead-mean RMSE per channel and the cloud score.

    The cloud score averages the cloud channels' lead-mean RMSE after
    dividing each by its training standard deviation, so no species
    dominates through its units.
    """
    per_channel = report.rmse.mean(axis=0)
    cloud = spec.cloud_channels()
    return per_channel, float(np.mean(per_channel[cloud] / stats.std[cloud]))


def run_ablation(cfg: ExperimentConfig, out) -> AblationResult:
    """Train and score each variant for each seed on one shared dataset."""
    out = _start_run(cfg, out)
    ab = cfg.ablation
    for v in ab.variants:
        if v not in VARIANTS:
            raise ValidationError(f"unknown variant {v!r}")
    ds = load_dataset(cfg)
    train_ds, test = split(cfg, ds)
    clim = climatology(train_ds)
    inits = _init_indices(len(test), ab.leads, ab.max_inits)
    spec = ds.spec
    rmse = np.zeros((len(ab.seeds), len(ab.variants), spec.n_channels))
    score = np.zeros((len(ab.seeds), len(ab.variants)))
    for si, seed in enumerate(ab.seeds):
        for vi, variant in enumerate(ab.variants):
            log.info("ablation seed %d variant %s", seed, variant)
            model, _ = train(ds, cfg.model_config(spec, variant), cfg.train_config(seed))
            report = evaluate_model(model, test, clim, ab.leads, model.stats(), inits)
            rmse[si, vi], score[si, vi] = ablation_scores(report, model.stats(), spec)
    result = AblationResult(list(ab.variants), list(ab.seeds), spec.channel_names(), rmse, score)
    write_ablation(result, out)
    write_manifest(out)
    return result


def write_ablation(result: AblationResult, out) -> None:
    out = Path(out)
    names = result.channels
    mean_rmse = result.rmse.mean(axis=0)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + names + ["cloud_score"])
        for vi, v in enumerate(result.variants):
            w.writerow([TABLE_LABELS.get(v, v)] + [repr(float(x)) for x in mean_rmse[vi]]
                       + [repr(float(result.cloud_score[:, vi].mean()))])
    with open(out / "ablation_seeds.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "model"] + names + ["cloud_score"])
        for si, s in enumerate(result.seeds):
            for vi, v in enumerate(result.variants):
                w.writerow([s, TABLE_LABELS.get(v, v)] + [repr(float(x)) for x in result.rmse[si, vi]]
                           + [repr(float(result.cloud_score[si, vi]))])
    ordering = {}
    for better, worse in (("full", "no_mp_ic"), ("no_mp_ic", "baseline"), ("full", "no_ic")):
        if better in result.variants and worse in result.variants:
            ordering[f"{better}<={worse}"] = {"wins": result.wins(better, worse), "of": len(result.seeds)}
    write_json(ordering, out / "ordering.json")
    cloud = [i for i, n in enumerate(names) if n.startswith(("ciwc", "clwc", "crwc", "cswc"))]
    spec_std = result.rmse.mean(axis=(0, 1))[cloud]
    plotting.plot_ablation([TABLE_LABELS.get(v, v) for v in result.variants], [names[i] for i in cloud],
                           mean_rmse[:, cloud] / spec_std, out / "ablation.png",
                           "5-step RMSE / mean over variants")
