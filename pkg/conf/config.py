import hashlib
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import ConfigError, MissingFileError
from schemas import RunConfig, SyntheticSpec


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="NEXTBASKET_", env_file=".env", env_file_encoding="utf-8",
                                      extra="ignore")

    log_level: str = "INFO"
    workers: int = 1
    default_dtype: Literal["float32", "float64"] = "float32"


settings = Settings()


def derive_seed(seed: int, name: str) -> int:

    """
    The derive_seed function expands the single run seed into a stable per-module sub-seed.

    :param seed: int: The run-level seed
    :param name: str: Name of the consumer (e.g. "gcn", "dropout")
    :return: A non-negative 63-bit integer seed
    """
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str, int]]:

    """
    The parse_pairs function splits flat key=value text into (key, value, line number) triples.
    Blank lines and lines starting with # are skipped; trailing comments are not supported.

    :param text: str: Raw file content
    :param source: str: File name used in error messages
    :return: A list of key, value, line triples in file order
    """
    pairs = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError("expected key=value", path=source, line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path=source, line=number)
        pairs.append((key, value, number))
    return pairs


def _nest(pairs: list[tuple[str, str, int]], source: str) -> tuple[dict, dict[str, int]]:
    nested: dict = {}
    lines: dict[str, int] = {}
    for key, value, number in pairs:
        if key in lines:
            raise ConfigError("duplicate key", key=key, path=source, line=number)
        lines[key] = number
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("key used both as value and section", key=key, path=source, line=number)
        node[leaf] = None if value.lower() in ("", "none") else value
    return nested, lines


def validate_pairs(model: type[BaseModel], pairs: list[tuple[str, str, int]], source: str) -> BaseModel:

    """
    The validate_pairs function builds a pydantic model from flat dotted key=value pairs.
    Unknown keys and badly typed values raise a ConfigError naming the file, line and key.

    :param model: type[BaseModel]: The target model class
    :param pairs: list: Output of parse_pairs
    :param source: str: File name used in error messages
    :return: The validated model instance
    """
    nested, lines = _nest(pairs, source)
    try:
        return model.model_validate(nested)
    except ValidationError as err:
        first = err.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigError(first["msg"], key=key or None, path=source, line=lines.get(key)) from None


def _read_text(path: Path) -> str:
    try:
        data = path.read_bytes()
    except OSError:
        raise MissingFileError(str(path)) from None
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as err:
        raise ConfigError("invalid UTF-8", path=str(path), line=data.count(b"\n", 0, err.start) + 1) from None


def load_config(path: str | Path | None) -> RunConfig:

    """
    The load_config function reads a flat key=value run configuration; defaults are applied for absent keys.

    :param path: str | Path | None: The config file, or None for all defaults
    :return: A RunConfig
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    text = _read_text(path)
    return validate_pairs(RunConfig, parse_pairs(text, str(path)), str(path))


def load_synthetic_spec(path: str | Path | None) -> SyntheticSpec:
    """Read a flat key=value synthetic dataset spec; absent keys keep their defaults."""
    if path is None:
        return SyntheticSpec()
    path = Path(path)
    text = _read_text(path)
    return validate_pairs(SyntheticSpec, parse_pairs(text, str(path)), str(path))


def flatten_model(model: BaseModel, prefix: str = "") -> dict[str, object]:
    flat: dict[str, object] = {}
    for name in type(model).model_fields:
        value = getattr(model, name)
        key = f"{prefix}{name}"
        if isinstance(value, BaseModel):
            flat.update(flatten_model(value, f"{key}."))
        else:
            flat[key] = value
    return flat


def _render(value: object) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(model: BaseModel) -> str:

    """
    The dump_config function echoes every key of a model as sorted key=value lines.
    parse -> dump -> parse is the identity.

    :param model: BaseModel: A RunConfig (or any nested config model)
    :return: The config text
    """
    flat = flatten_model(model)
    return "".join(f"{key}={_render(flat[key])}\n" for key in sorted(flat))
