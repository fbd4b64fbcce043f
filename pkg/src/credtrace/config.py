"""Run configuration: one INI file describing paths, hyperparameters, seeds.

A run is reproducible from the config file alone; command-line flags
override individual values without touching the file.
"""

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .vectorindex import IndexParams
from .verifier import VerifierConfig


class ConfigError(Exception):
    pass


@dataclass
class Config:
    # paths (resolved relative to the config file's directory when loaded)
    corpus_dir: str = "corpus"
    store_dir: str = "store"
    index_file: str = "patches.ctix"
    encoder_checkpoint: str = "encoder.ckpt"
    verifier_checkpoint: str = "verifier.ckpt"
    descriptor_cache: str = "descriptors.npz"
    ledger_log: str = "ledger.jsonl"
    queries_dir: str = "queries"
    reports_dir: str = "reports"

    # hyperparameters
    tau: float = 0.1
    lambda_threshold: float = 0.7
    gem_power: float = 3.0
    nlist: int = 64
    m: int = 16
    nprobe: int = 8
    top_k: int = 4
    top_m: int = 5
    input_size: int = 64
    encoder_epochs: int = 20
    verifier_epochs: int = 12
    auc_floor: float = 0.95

    # seeds
    corpus_seed: int = 11
    encoder_seed: int = 0
    verifier_seed: int = 0
    index_seed: int = 0
    query_seed: int = 42
    identity_seed: str = "credtrace-demo"

    corpus_size: int = 500
    image_size: int = 128

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(input_size=self.input_size, tau=self.tau,
                             seed=self.encoder_seed, epochs=self.encoder_epochs)

    def verifier_config(self) -> VerifierConfig:
        return VerifierConfig(gem_power=self.gem_power, seed=self.verifier_seed,
                              epochs=self.verifier_epochs,
                              auc_floor=self.auc_floor)

    def index_params(self) -> IndexParams:
        return IndexParams(nlist=self.nlist, m=self.m, nprobe=self.nprobe)

    def resolve(self, root: str | Path) -> "Config":
        """Copy with every path field anchored under ``root``."""
        root = Path(root)
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in PATH_FIELDS:
            values[name] = str(root / values[name])
        return Config(**values)


PATH_FIELDS = ("corpus_dir", "store_dir", "index_file", "encoder_checkpoint",
                "verifier_checkpoint", "descriptor_cache", "ledger_log",
                "queries_dir", "reports_dir")
_SECTIONS = {"paths": PATH_FIELDS,
             "params": ("tau", "lambda_threshold", "gem_power", "nlist", "m",
                        "nprobe", "top_k", "top_m", "input_size",
                        "encoder_epochs", "verifier_epochs", "auc_floor",
                        "corpus_size", "image_size"),
             "seeds": ("corpus_seed", "encoder_seed", "verifier_seed",
                       "index_seed", "query_seed", "identity_seed")}
_FIELD_TYPES = {f.name: f.type for f in fields(Config)}


def load_config(path: str | Path) -> Config:
    """Parse an INI config; unknown sections or keys are refused."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no config file at {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}] of {path}")
            values[key] = convert_value(key, raw)
    config = Config(**values)
    return config.resolve(path.parent)


def convert_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def save_config(config: Config, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {k: str(getattr(config, k)) for k in keys}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
