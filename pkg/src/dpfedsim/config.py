"""Flat key=value experiment configuration.

Config files are plain text: one ``key = value`` per line, ``#`` starts a
comment (full-line or trailing), blank lines ignored.  ``--override key=value``
on the command line wins over the file.  Unknown keys are an error that lists
the valid ones.  An empty file runs the full default experiment.

Keys (defaults in parentheses):

  dataset (synthetic)            synthetic | idx
  train_images/train_labels ('') IDX paths, required when dataset=idx
  test_images/test_labels ('')   IDX paths, required when dataset=idx
  synthetic_classes (10)         blob generator shape
  synthetic_per_class (100)
  synthetic_dim (32)
  synthetic_spread (0.25)
  subsample_train (0)            0 = keep all; else stratified subsample size
  subsample_test (0)
  partition (iid)                iid | label_split
  label_split (0-4;5-9)          ;-separated label groups, e.g. 0,1;2-5;6-9
  layer_sizes ('')               comma list; '' = input_dim,128,num_classes
  n_clients (2)
  clients_per_round (0)          0 = every client participates
  rounds (30)
  local_steps (1)
  eta (0.002)                    client and server learning rate
  batch_size (32)                0 = use sampling_rate instead
  sampling_rate (0.0)            per-step sampling fraction when batch_size=0
  sampling_mode (fixed_size)     fixed_size | poisson
  eval_batch_size (1024)
  algorithm (gcfl)               gcfl | dp_fedavg | dp_fedprox | dp_scaffold |
                                 dp_fedexp | isolated
  weighting (uniform)            uniform | by_samples
  prox_mu (0.01)
  sigma (0.8)                    Gaussian noise multiplier
  clip_threshold (1.5)
  delta (1e-5)
  epsilon_budget (0.0)           0 = no early privacy stop
  correction_mode (reference)    reference | pairwise
  num_references (0)             0 = max(1, n_clients // 2)
  order_seed (0)
  seeds (1,2,3)                  comma list of run seeds
  parallel_clients (false)
  record_timing (true)           false writes wall_ms as 0 (reproducible files)
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .correction import CORRECTION_MODES
from .dp import SAMPLING_MODES
from .federation import ALGORITHMS, WEIGHTINGS


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    synthetic_classes: int = 10
    synthetic_per_class: int = 100
    synthetic_dim: int = 32
    synthetic_spread: float = 0.25
    subsample_train: int = 0
    subsample_test: int = 0
    partition: str = "iid"
    label_split: str = "0-4;5-9"
    layer_sizes: tuple[int, ...] = ()
    n_clients: int = 2
    clients_per_round: int = 0
    rounds: int = 30
    local_steps: int = 1
    eta: float = 0.002
    batch_size: int = 32
    sampling_rate: float = 0.0
    sampling_mode: str = "fixed_size"
    eval_batch_size: int = 1024
    algorithm: str = "gcfl"
    weighting: str = "uniform"
    prox_mu: float = 0.01
    sigma: float = 0.8
    clip_threshold: float = 1.5
    delta: float = 1e-5
    epsilon_budget: float = 0.0
    correction_mode: str = "reference"
    num_references: int = 0
    order_seed: int = 0
    seeds: tuple[int, ...] = (1, 2, 3)
    parallel_clients: bool = False
    record_timing: bool = True

    def validate(self) -> None:
        if self.dataset not in ("synthetic", "idx"):
            raise ValueError(f"dataset must be synthetic or idx, got {self.dataset!r}")
        if self.dataset == "idx":
            missing = [
                name
                for name in ("train_images", "train_labels", "test_images", "test_labels")
                if not getattr(self, name)
            ]
            if missing:
                raise ValueError(
                    f"dataset=idx requires paths for: {', '.join(missing)}"
                )
        if self.synthetic_classes < 2:
            raise ValueError("synthetic_classes must be >= 2")
        if self.synthetic_per_class < 1:
            raise ValueError("synthetic_per_class must be >= 1")
        if self.synthetic_dim < 1:
            raise ValueError("synthetic_dim must be >= 1")
        if self.synthetic_spread < 0:
            raise ValueError("synthetic_spread must be >= 0")
        if self.subsample_train < 0 or self.subsample_test < 0:
            raise ValueError("subsample sizes must be >= 0 (0 keeps everything)")
        if self.partition not in ("iid", "label_split"):
            raise ValueError(
                f"partition must be iid or label_split, got {self.partition!r}"
            )
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0 <= self.clients_per_round <= self.n_clients:
            raise ValueError("clients_per_round must be in [0, n_clients]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 uses sampling_rate)")
        if self.batch_size == 0 and not 0 < self.sampling_rate <= 1:
            raise ValueError(
                "sampling_rate must be in (0, 1] when batch_size is 0"
            )
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(
                f"sampling_mode must be one of {SAMPLING_MODES}, "
                f"got {self.sampling_mode!r}"
            )
        if self.eval_batch_size < 1:
            raise ValueError("eval_batch_size must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(
                f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}"
            )
        if self.weighting not in WEIGHTINGS:
            raise ValueError(
                f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}"
            )
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")
        if self.sigma < 0:
            raise ValueError("noise_multiplier must be >= 0")
        if not self.clip_threshold > 0:
            raise ValueError("clip_threshold must be > 0")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")
        if self.epsilon_budget < 0:
            raise ValueError("epsilon_budget must be >= 0")
        if self.correction_mode not in CORRECTION_MODES:
            raise ValueError(
                f"correction_mode must be one of {CORRECTION_MODES}, "
                f"got {self.correction_mode!r}"
            )
        if self.num_references < 0:
            raise ValueError("num_references must be >= 0 (0 means auto)")
        if self.num_references >= self.n_clients and self.n_clients > 1:
            raise ValueError("num_references must be < n_clients")
        if self.order_seed < 0:
            raise ValueError("order_seed must be >= 0")
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be >= 0")
        if self.layer_sizes and len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output sizes")
        if self.partition == "label_split":
            groups = parse_label_split(self.label_split)
            if len(groups) != self.n_clients:
                raise ValueError(
                    f"label_split defines {len(groups)} groups "
                    f"but n_clients is {self.n_clients}"
                )

    def resolved(self) -> dict:
        """Plain-serializable view of every key's final value."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[f.name] = v
        return out


_PARSERS = {
    str: lambda raw: raw,
    int: lambda raw: int(raw),
    float: lambda raw: float(raw),
    bool: _parse_bool,
    tuple: _parse_int_list,
}


def _field_registry() -> dict[str, type]:
    reg: dict[str, type] = {}
    for f in fields(ExperimentConfig):
        origin = f.type
        if origin.startswith("tuple"):
            reg[f.name] = tuple
        elif origin == "bool":
            reg[f.name] = bool
        elif origin == "int":
            reg[f.name] = int
        elif origin == "float":
            reg[f.name] = float
        else:
            reg[f.name] = str
    return reg


_REGISTRY = _field_registry()


def _assign(cfg: ExperimentConfig, key: str, raw: str, where: str) -> None:
    if key not in _REGISTRY:
        valid = ", ".join(sorted(_REGISTRY))
        raise ValueError(f"unknown config key {key!r} ({where}); valid keys: {valid}")
    kind = _REGISTRY[key]
    try:
        value = _PARSERS[kind](raw)
    except ValueError as exc:
        raise ValueError(
            f"invalid value for {key} ({where}): {raw!r} ({exc})"
        ) from None
    setattr(cfg, key, value)


def parse_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a key=value file, apply overrides, validate, and return the config."""
    cfg = ExperimentConfig()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(
                    f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}"
                )
            key, raw = stripped.split("=", 1)
            _assign(cfg, key.strip(), raw.strip(), f"{path}:{lineno}")
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _assign(cfg, key.strip(), raw.strip(), "--override")
    cfg.validate()
    return cfg


def parse_label_split(raw: str) -> list[set[int]]:
    """'0-4;5,7;6,8-9' -> [{0..4}, {5,7}, {6,8,9}]."""
    groups: list[set[int]] = []
    for segment in raw.split(";"):
        segment = segment.strip()
        if not segment:
            raise ValueError(f"empty label group in {raw!r}")
        group: set[int] = set()
        for piece in segment.split(","):
            piece = piece.strip()
            if "-" in piece:
                lo_s, hi_s = piece.split("-", 1)
                lo, hi = int(lo_s), int(hi_s)
                if hi < lo:
                    raise ValueError(f"bad label range {piece!r}")
                group.update(range(lo, hi + 1))
            else:
                group.add(int(piece))
        groups.append(group)
    return groups
