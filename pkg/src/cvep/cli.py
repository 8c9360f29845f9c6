"""Command-line experiment runner.

Subcommands: synth-gen, preprocess, train-free, train-limited, train-within,
baseline-cca, report and run (every paradigm listed in the config, in order).
Failures exit with 2 (dataset), 3 (configuration) or 4 (training) and print
one ``E_CODE: message`` line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import protocols as proto
from .baseline import run_baseline_cca
from .codebook import build_codebook, generate_golay_pair, generate_m_sequence, read_codebook
from .dataset import Dataset, load_dataset, write_dataset
from .encoder import FeatureTensor, load_feature_dir, write_features
from .errors import (
    ConfigError,
    CvepError,
    EmptySplitError,
    EmptyTestSetError,
    FormatError,
    FractionOverflowError,
    InvalidSpecError,
    MissingCheckpointError,
    ShapeError,
)
from .head import load_checkpoint, save_checkpoint
from .synth import CohortSpec, generate_cohort

log = logging.getLogger("cvep")

EXIT_OK, EXIT_DATASET, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3, 4


@dataclass
class ExperimentConfig:
    dataset_path: str = ""
    paradigms: list[str] = field(default_factory=lambda: ["calibration_free"])
    fractions: list[float] | str = "fast_stim"
    trial_mode: str = "single"
    group_size: int = 5
    seeds: list[int] = field(default_factory=lambda: [0])
    epochs_free: int = 200
    epochs_limited: int = 400
    batch_size: int = 64
    lr_free: float = 1e-3
    lr_limited: float = 5e-4
    lr_within: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    train_spatial: bool = True
    encoder_mode: str = "reference"
    encoder_seed: int = 0
    features_path: str = ""
    bandpass: list[float] | None = None
    filter_order: int = 4
    subjects: list[str] | None = None
    exclude_subjects: list[str] = field(default_factory=list)
    cca_ridge: float | None = None
    output_path: str = "results"
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.fractions, str):
            if self.fractions not in proto.FRACTION_PRESETS:
                raise ConfigError(f"unknown fraction preset {self.fractions!r}")
            self.fractions = list(proto.FRACTION_PRESETS[self.fractions])
        self.fractions = [float(f) for f in self.fractions]
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must be a nonempty list within (0, 1]")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        bad = [p for p in self.paradigms if p not in proto.PARADIGMS + ("baseline_cca",)]
        if bad:
            raise ConfigError(f"unknown paradigms {bad}")
        if self.trial_mode not in ("single", "averaged"):
            raise ConfigError(f"trial_mode must be 'single' or 'averaged', got {self.trial_mode!r}")
        if self.encoder_mode not in ("reference", "imported"):
            raise ConfigError(f"encoder_mode must be 'reference' or 'imported', got {self.encoder_mode!r}")
        if self.encoder_mode == "imported" and not self.features_path:
            raise ConfigError("encoder_mode 'imported' needs features_path")
        if min(self.epochs_free, self.epochs_limited, self.batch_size, self.group_size) < 1:
            raise ConfigError("epochs, batch_size and group_size must be >= 1")
        if self.bandpass is not None and len(self.bandpass) != 2:
            raise ConfigError("bandpass must be [f_lo, f_hi]")
        self.subjects = None if self.subjects is None else [str(s) for s in self.subjects]
        self.exclude_subjects = [str(s) for s in self.exclude_subjects]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config keys {extra}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            # YAML is a superset of JSON, so one parser covers both
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " ")) from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of every setting that affects results (the output location excluded)."""
        d = self.to_dict()
        d.pop("output_path")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def protocol(self) -> proto.ProtocolConfig:
        return proto.ProtocolConfig(
            epochs_free=self.epochs_free, epochs_limited=self.epochs_limited, batch_size=self.batch_size,
            lr_free=self.lr_free, lr_limited=self.lr_limited, lr_within=self.lr_within, beta1=self.beta1,
            beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay,
            train_spatial=self.train_spatial and self.encoder_mode == "reference",
        )


# -- synthetic cohorts --------------------------------------------------------

def cohort_spec(d: dict) -> CohortSpec:
    """Build a CohortSpec from a mapping; ``code`` selects the base sequence."""
    d = dict(d)
    code = d.pop("code", {}) or {}
    family = code.get("family", "golay-a")
    n_targets = int(code.get("n_targets", 16))
    try:
        if family in ("golay-a", "golay-b", "golay"):
            a, b = generate_golay_pair(int(code.get("order", 6)))
            base = b if family == "golay-b" else a
        elif family == "m-sequence":
            base = generate_m_sequence(int(code.get("register_len", 6)),
                                       tuple(code["taps"]) if "taps" in code else None)
        elif family == "file":
            base = read_codebook(code["path"]).base
        else:
            raise InvalidSpecError(f"unknown code family {family!r}")
        book = build_codebook(base, n_targets, code.get("shift_step"))
    except KeyError as exc:
        raise InvalidSpecError(f"code section misses {exc}") from exc
    except CvepError as exc:
        if isinstance(exc, InvalidSpecError):
            raise
        raise InvalidSpecError(str(exc)) from exc
    known = {f.name for f in fields(CohortSpec)} - {"codebook"}
    extra = sorted(set(d) - known)
    if extra:
        raise InvalidSpecError(f"unknown cohort keys {extra}")
    spec = CohortSpec(codebook=book, **d)
    spec.validate()
    return spec


def load_spec_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InvalidSpecError(f"spec file {path} not found")
    try:
        d = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise InvalidSpecError(f"cannot parse {path}".replace("\n", " ")) from exc
    if not isinstance(d, dict):
        raise InvalidSpecError("spec must be a mapping")
    return d.get("synth", d) if "synth" in d and isinstance(d["synth"], dict) else d


# -- data loading -------------------------------------------------------------

def _load(cfg: ExperimentConfig) -> Dataset:
    if not cfg.dataset_path or not Path(cfg.dataset_path).is_dir():
        raise FileNotFoundError(f"dataset directory {cfg.dataset_path!r} not found")
    return load_dataset(cfg.dataset_path)


def _prepared(cfg: ExperimentConfig, cache: dict) -> proto.PreparedDataset:
    if "data" not in cache:
        if cfg.encoder_mode == "imported":
            root = Path(cfg.features_path)
            if not root.is_dir():
                raise FileNotFoundError(f"features directory {cfg.features_path!r} not found")
            cache["data"] = proto.prepare_features(load_feature_dir(root), name=root.name,
                                                   trial_mode=cfg.trial_mode)
        else:
            ds = _load(cfg)
            cache["data"] = proto.prepare_dataset(
                ds, cfg.trial_mode, cfg.group_size, encoder_seed=cfg.encoder_seed,
                bandpass=None if cfg.bandpass is None else tuple(cfg.bandpass), filter_order=cfg.filter_order,
            )
    return cache["data"]


def _ckpt_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_path) / "checkpoints"


def _ckpt_path(cfg: ExperimentConfig, paradigm: str, seed: int, sid: str, fraction: float | None = None) -> Path:
    tag = "" if fraction is None else f"_p{fraction:g}"
    return _ckpt_dir(cfg) / f"{paradigm}_{cfg.trial_mode}_seed{seed}_sub{sid}{tag}.ckpt"


def _write(cfg: ExperimentConfig, name: str, results) -> Path:
    out = Path(cfg.output_path)
    out.mkdir(parents=True, exist_ok=True)
    path = proto.write_results_csv(results, out / name, cfg.hash())
    log.info("wrote %s (%d rows)", path, len(results))
    return path


# -- paradigms ----------------------------------------------------------------

def do_free(cfg: ExperimentConfig, cache: dict) -> list:
    data = _prepared(cfg, cache)
    _ckpt_dir(cfg).mkdir(parents=True, exist_ok=True)
    results = []
    for seed in cfg.seeds:
        res, models = proto.run_calibration_free(data, cfg.protocol(), seed, cfg.subjects)
        for sid, model in models.items():
            save_checkpoint(model, _ckpt_path(cfg, "calibration_free", seed, sid))
        cache.setdefault("free_models", {})[seed] = models
        results += res
        log.info("calibration_free seed %d: mean accuracy %.4f", seed, sum(r.accuracy for r in res) / len(res))
    return results


def do_limited(cfg: ExperimentConfig, cache: dict) -> list:
    data = _prepared(cfg, cache)
    results = []
    for seed in cfg.seeds:
        models = cache.get("free_models", {}).get(seed)
        if models is None:
            models = {}
            for sub in data.subjects:
                path = _ckpt_path(cfg, "calibration_free", seed, sub.subject_id)
                if path.is_file():
                    models[sub.subject_id] = load_checkpoint(path)
        res = proto.run_limited(data, cfg.fractions, cfg.protocol(), seed, models, cfg.subjects)
        results += res
        log.info("limited seed %d: %d results", seed, len(res))
    return results


def do_within(cfg: ExperimentConfig, cache: dict) -> list:
    data = _prepared(cfg, cache)
    results = []
    for seed in cfg.seeds:
        res = proto.run_within(data, cfg.fractions, cfg.protocol(), seed, cfg.subjects)
        results += res
        log.info("within seed %d: %d results", seed, len(res))
    return results


def do_baseline(cfg: ExperimentConfig, cache: dict) -> list:
    ds = _load(cfg)
    if cfg.subjects:
        ds = Dataset([s for s in ds.subjects if s.subject_id in cfg.subjects], ds.name)
    results = []
    for seed in cfg.seeds:
        results += run_baseline_cca(ds, seed, cfg.cca_ridge,
                                    None if cfg.bandpass is None else tuple(cfg.bandpass), cfg.filter_order)
    return results


RUNNERS = {"calibration_free": do_free, "limited": do_limited, "within": do_within, "baseline_cca": do_baseline}


def format_summary(summaries) -> str:
    lines = ["paradigm,trial_mode,fraction,n,mean_accuracy,std_accuracy,mean_calib_seconds"]
    for s in summaries:
        lines.append(f"{s.paradigm},{s.trial_mode},{s.fraction:g},{s.n},{s.mean:.6f},{s.std:.6f},{s.calib_seconds:g}")
    return "\n".join(lines) + "\n"


# -- command handlers ---------------------------------------------------------

def cmd_synth_gen(args, cfg: ExperimentConfig | None) -> int:
    if args.spec:
        spec_dict = load_spec_file(args.spec)
    elif cfg is not None:
        spec_dict = cfg.synth
    else:
        raise InvalidSpecError("synth-gen needs --spec or a config with a 'synth' section")
    spec = cohort_spec(spec_dict)
    seed = args.seed if args.seed is not None else (cfg.seeds[0] if cfg is not None else 0)
    out = args.out or (cfg.dataset_path if cfg is not None and cfg.dataset_path else None)
    if not out:
        raise ConfigError("synth-gen needs --out")
    write_dataset(generate_cohort(spec, seed), out)
    print(f"master_seed={seed}")
    print(f"wrote {spec.n_subjects} subjects to {out}")
    return EXIT_OK


def cmd_preprocess(args, cfg: ExperimentConfig) -> int:
    data = _prepared(cfg, {})
    if data.encoder is None:
        raise ConfigError("preprocess writes reference-encoder features; set encoder_mode to 'reference'")
    root = Path(cfg.output_path) / "features"
    model = proto.Model.create(data.subjects[0].n_channels, data.n_classes, data.encoder)
    for sub in data.subjects:
        feats = FeatureTensor(model.features(sub.cal).reshape(-1, 16, 4, 512))
        write_features(root, sub.subject_id, feats, sub.cal_labels, sub.n_classes)
        if sub.test is not None:
            tfeats = FeatureTensor(model.features(sub.test).reshape(-1, 16, 4, 512))
            write_features(root, sub.subject_id, tfeats, sub.test_labels, sub.n_classes, partition="test")
    print(f"wrote features for {len(data.subjects)} subjects to {root}")
    return EXIT_OK


def _paradigm_cmd(paradigm: str, filename: str):
    def handler(args, cfg: ExperimentConfig) -> int:
        results = RUNNERS[paradigm](cfg, {})
        print(_write(cfg, filename, results))
        return EXIT_OK
    return handler


def cmd_run(args, cfg: ExperimentConfig) -> int:
    cache: dict = {}
    order = {p: i for i, p in enumerate(proto.PARADIGMS + ("baseline_cca",))}
    results = []
    for paradigm in sorted(cfg.paradigms, key=order.__getitem__):
        results += RUNNERS[paradigm](cfg, cache)
    print(_write(cfg, "results.csv", results))
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig | None) -> int:
    paths = [Path(p) for p in args.inputs] if args.inputs else sorted(Path(cfg.output_path).glob("results*.csv"))
    if not paths:
        raise FileNotFoundError("no results CSV files to report")
    results = []
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"results file {p} not found")
        results += proto.read_results_csv(p)
    exclude = args.exclude or (cfg.exclude_subjects if cfg is not None else [])
    text = format_summary(proto.aggregate(results, exclude))
    sys.stdout.write(text)
    if cfg is not None:
        out = Path(cfg.output_path)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(f"# config_hash={cfg.hash()}\n" + text, encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "preprocess": cmd_preprocess,
    "train-free": _paradigm_cmd("calibration_free", "results_free.csv"),
    "train-limited": _paradigm_cmd("limited", "results_limited.csv"),
    "train-within": _paradigm_cmd("within", "results_within.csv"),
    "baseline-cca": _paradigm_cmd("baseline_cca", "results_baseline.csv"),
    "report": cmd_report,
    "run": cmd_run,
}
NO_CONFIG_OK = {"synth-gen", "report"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (YAML or JSON)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed list with one seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="cvep", description="c-VEP decoding harness", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    help_text = {
        "synth-gen": "generate a synthetic cohort",
        "preprocess": "write reference-encoder features for a dataset",
        "train-free": "calibration-free leave-one-subject-out training",
        "train-limited": "fine-tune calibration-free checkpoints on each subject",
        "train-within": "train from scratch on each subject",
        "baseline-cca": "CCA template-matching baseline",
        "report": "aggregate results CSV files",
        "run": "run every paradigm listed in the config",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=help_text[name], parents=[common])
        if name == "synth-gen":
            p.add_argument("--spec", help="cohort spec file (YAML or JSON)")
        if name == "report":
            p.add_argument("inputs", nargs="*", help="results CSV files (default: results*.csv in the output dir)")
            p.add_argument("--exclude", nargs="*", default=None, help="subject ids left out of the aggregate")
    return parser


def _error(code: str, exc: BaseException) -> str:
    msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    return f"{code}: {msg}".replace("\n", " ")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    if not hasattr(args, "spec"):
        args.spec = None
    try:
        cfg = None
        if args.config is not None:
            cfg = ExperimentConfig.load(args.config)
        elif args.command not in NO_CONFIG_OK:
            raise ConfigError(f"{args.command} needs --config")
        if cfg is not None:
            if args.seed is not None:
                cfg.seeds = [args.seed]
            if args.out is not None and args.command != "synth-gen":
                cfg.output_path = args.out
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as exc:
        print(_error("E_DATASET_NOT_FOUND", exc), file=sys.stderr)
        return EXIT_DATASET
    except (FormatError, ShapeError) as exc:
        print(_error("E_DATASET_FORMAT", exc), file=sys.stderr)
        return EXIT_DATASET
    except InvalidSpecError as exc:
        print(_error("E_INVALID_SPEC", exc), file=sys.stderr)
        return EXIT_CONFIG
    except FractionOverflowError as exc:
        print(_error("E_FRACTION_OVERFLOW", exc), file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(_error("E_CONFIG", exc), file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpointError as exc:
        print(_error("E_MISSING_CHECKPOINT", exc), file=sys.stderr)
        return EXIT_TRAINING
    except (EmptySplitError, EmptyTestSetError, CvepError) as exc:
        print(_error("E_TRAINING", exc), file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
