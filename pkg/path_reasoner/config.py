"""
Key = value configuration files and flag merging.

A config file uses the .env dialect (read with python-dotenv). Keys are field names
of TrainingConfig, SyntheticSpec or PredictOptions; case and `-` versus `_` do not
matter. Later sources win: defaults < file < command-line flags.
"""

from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Type, TypeVar, Union
import logging

from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError

from path_reasoner.errors import ConfigError
from path_reasoner.inference import PredictOptions
from path_reasoner.synthetic import SyntheticSpec
from path_reasoner.training import TrainingConfig

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

CONFIG_MODELS = (TrainingConfig, SyntheticSpec, PredictOptions)


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def known_keys(models: Iterable[Type[BaseModel]] = CONFIG_MODELS) -> set:
    return {name for model in models for name in model.model_fields}


def load_config_file(path: Union[str, Path], models: Iterable[Type[BaseModel]] = CONFIG_MODELS) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such config file: {path}")
    raw = dotenv_values(path)
    allowed = known_keys(models)
    values: Dict[str, str] = {}
    for key, value in raw.items():
        name = normalize_key(key)
        if name not in allowed:
            raise ConfigError(f"{path}: unknown key {key!r}")
        if value is None:
            raise ConfigError(f"{path}: key {key!r} has no value")
        values[name] = value
    logger.debug(f"Read {len(values)} settings from {path}")
    return values


def merge_sources(*sources: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    """Merge left to right; None values (unset flags) never override."""
    merged: Dict[str, Any] = {}
    for source in sources:
        if not source:
            continue
        for key, value in source.items():
            if value is not None:
                merged[normalize_key(key)] = value
    return merged


def build(model: Type[M], values: Mapping[str, Any]) -> M:
    """Instantiate `model` from the keys it declares; validation errors become ConfigError."""
    fields = {key: value for key, value in values.items() if key in model.model_fields}
    try:
        return model(**fields)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or model.__name__}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"Invalid {model.__name__}: {problems}") from e


def log_settings(title: str, settings: BaseModel) -> None:
    logger.info(f"{title}:")
    for key, value in settings.model_dump().items():
        logger.info(f"{key}: {value}")
