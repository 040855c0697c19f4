"""
Run configuration of the command line: defaults < JSON config file < flags.
"""
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
from dsolocate import io
from dsolocate.exceptions import ArtifactIOError, ConfigurationError
from dsolocate.model import TrainingConfig
from dsolocate.pipeline import DetectConfig
from dsolocate.synthgen import PROFILES
from dsolocate.xrai import XraiConfig

COMMANDS = ("generate", "train", "detect", "evaluate", "bench")

CONFIG_ECHO = "run_config.json"

@dataclass(frozen=True)
class RunConfig:

    command: str = field(default="detect", metadata={"help": "Subcommand."})
    seed: int = field(default=0, metadata={"help": "Root seed, every stage derives its seed from it."})
    jobs: Optional[int] = field(default=None, metadata={"help": "Maximum concurrent patch workers."})
    timeout: float = field(default=600.0, metadata={"help": "Seconds a parallel detection run may take."})
    out: str = field(default="out", metadata={"help": "Output directory."})
    verbose: int = field(default=1, metadata={"help": "0=WARNING, 1=INFO, 2=DEBUG."})

    n: int = field(default=5000, metadata={"help": "Number of dataset patches."})
    scenes: int = field(default=10, metadata={"help": "Number of annotated full scenes."})
    profile: str = field(default="desk", metadata={"help": "Instrument profile."})
    label_mode: str = field(default="dso", metadata={"help": "Scene labels: dso or kind."})

    manifest: Optional[str] = field(default=None, metadata={"help": "Dataset manifest.json."})
    epochs: int = field(default=50, metadata={"help": "Training epochs."})
    batch_size: int = field(default=16, metadata={"help": "Training batch size."})
    learning_rate: float = field(default=0.001, metadata={"help": "ADAM learning rate."})
    architecture: str = field(default="desk", metadata={"help": "Classifier architecture preset."})
    early_stop: Optional[int] = field(default=None, metadata={"help": "Patience in epochs, off when unset."})

    checkpoint: Optional[str] = field(default=None, metadata={"help": "Model checkpoint."})
    images: Tuple[str, ...] = field(default=(), metadata={"help": "Input images."})
    select_threshold: float = field(default=0.5, metadata={"help": "Minimum patch probability for attribution."})
    percentile: float = field(default=70.0, metadata={"help": "Heatmap binarization percentile."})
    min_area: int = field(default=50, metadata={"help": "Smallest contour area in pixels."})
    ig_steps: int = field(default=64, metadata={"help": "Integrated-gradient steps."})
    overlap: int = field(default=0, metadata={"help": "Patch overlap in pixels."})
    scale: float = field(default=1.0, metadata={"help": "Pre-scale factor of the input image."})
    baseline: bool = field(default=False, metadata={"help": "Run the starless-contour baseline instead."})
    starless: Optional[str] = field(default=None, metadata={"help": "External starless image for the baseline."})

    predictions: Tuple[str, ...] = field(default=(), metadata={"help": "Prediction files or directories."})
    truths: Tuple[str, ...] = field(default=(), metadata={"help": "Ground-truth files or directories."})
    iou_threshold: float = field(default=0.5, metadata={"help": "IoU needed for a match."})

    scenes_dir: Optional[str] = field(default=None, metadata={"help": "Directory of scene images and annotations."})
    thresholds: Tuple[float, ...] = field(default=(0.0, 0.5), metadata={"help": "Selection thresholds to benchmark."})
    scales: Tuple[float, ...] = field(default=(1.0, 0.5), metadata={"help": "Scale factors to benchmark."})

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigurationError(f"unknown command '{self.command}', expected one of {COMMANDS}")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigurationError(f"jobs must be >= 1, got {self.jobs}")
        if not self.timeout > 0:
            raise ConfigurationError(f"timeout must be > 0, got {self.timeout}")
        if self.n < 10:
            raise ConfigurationError(f"n must be >= 10, got {self.n}")
        if self.scenes < 0:
            raise ConfigurationError(f"scenes must be >= 0, got {self.scenes}")
        if self.profile not in PROFILES:
            raise ConfigurationError(f"unknown profile '{self.profile}', expected one of {sorted(PROFILES)}")
        if self.label_mode not in ("dso", "kind"):
            raise ConfigurationError(f"label_mode must be 'dso' or 'kind', got '{self.label_mode}'")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigurationError(f"iou_threshold must be in (0,1], got {self.iou_threshold}")
        for t in self.thresholds:
            if not 0.0 <= t <= 1.0:
                raise ConfigurationError(f"benchmark thresholds must be in [0,1], got {t}")
        for s in self.scales:
            if not s > 0:
                raise ConfigurationError(f"benchmark scales must be > 0, got {s}")

        if self.command == "train":
            self.training_config().validate()
        elif self.command in ("detect", "bench"):
            self.detect_config().validate()
        return self

    def check_paths(self):

        """
            Verifies that every input the command reads exists, before any
            work starts.
        """

        required: List[Tuple[str, Optional[str]]] = []
        if self.command == "train":
            required.append(("manifest", self.manifest))
        elif self.command == "detect":
            if not self.images:
                raise ConfigurationError("detect needs at least one input image")
            if not self.baseline:
                required.append(("checkpoint", self.checkpoint))
            required += [("images", p) for p in self.images]
            if self.starless is not None:
                required.append(("starless", self.starless))
        elif self.command == "evaluate":
            if not self.predictions or not self.truths:
                raise ConfigurationError("evaluate needs --predictions and --truths")
            required += [("predictions", p) for p in self.predictions]
            required += [("truths", p) for p in self.truths]
        elif self.command == "bench":
            required += [("checkpoint", self.checkpoint), ("scenes_dir", self.scenes_dir)]

        for name, path in required:
            if path is None:
                raise ConfigurationError(f"{self.command} needs --{name.replace('_', '-')}")
            if not Path(path).exists():
                raise ArtifactIOError(path, f"{name} does not exist")
        return self

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            early_stop=self.early_stop,
            architecture=self.architecture,
        )

    def detect_config(self, select_threshold: Optional[float] = None, scale: Optional[float] = None) -> DetectConfig:
        return DetectConfig(
            select_threshold=self.select_threshold if select_threshold is None else select_threshold,
            percentile=self.percentile,
            min_area=self.min_area,
            overlap=self.overlap,
            scale=self.scale if scale is None else scale,
            xrai=XraiConfig(ig_steps=self.ig_steps),
            jobs=self.jobs,
            timeout=self.timeout,
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        for name, value in data.items():
            if isinstance(value, tuple):
                data[name] = list(value)
        return data

    def echo(self, out_dir: Optional[str] = None, **extra) -> Path:
        """
            Writes the resolved configuration (plus extra sections) as
            run_config.json into the output directory.
        """
        path = Path(out_dir or self.out) / CONFIG_ECHO
        io.write_json(path, dict(self.to_dict(), **extra))
        return path

DEFAULTS = RunConfig()

def help_for(name: str) -> str:
    for f in fields(RunConfig):
        if f.name == name:
            return f.metadata.get("help", "")
    raise KeyError(name)

def _coerce(name: str, value: Any) -> Any:
    default = getattr(DEFAULTS, name)
    try:
        if value is None:
            return None
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError("expected true or false")
            return value
        if isinstance(default, tuple):
            items = value if isinstance(value, (list, tuple)) else [value]
            kind = type(default[0]) if default else str
            return tuple(kind(v) for v in items)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, int) or name in ("jobs", "early_stop"):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError("expected an integer")
            return int(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"config value '{name}' = {value!r} is invalid: {e}")

def load_config_file(path) -> Dict[str, Any]:

    """
        Reads a flat JSON object of RunConfig fields. Keys may use dashes
        or underscores.
    """

    data = io.read_json(path)
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for key, value in data.items():
        name = key.replace("-", "_")
        if name not in known or name == "command":
            raise ConfigurationError(f"config file {path}: unknown key '{key}'")
        values[name] = _coerce(name, value)
    return values

def resolve(command: str, file_values: Optional[Dict[str, Any]] = None, cli_values: Optional[Dict[str, Any]] = None) -> RunConfig:

    """
        Merges defaults, config file values and command line values, later
        sources winning, and validates the result.

        Args:
            command (str): Subcommand
            file_values ({str: any}): From load_config_file
            cli_values ({str: any}): Flags actually given on the command line

        Returns:
            RunConfig
    """

    merged: Dict[str, Any] = {}
    merged.update(file_values or {})
    merged.update({k: _coerce(k, v) for k, v in (cli_values or {}).items()})
    return replace(DEFAULTS, command=command, **merged).validate()
