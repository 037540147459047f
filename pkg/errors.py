class NextBasketError(Exception):
    """
    Base class of every error raised by the pipeline.
    Like HTTPException carries a status code, each subclass carries the CLI exit code it maps to.
    """
    exit_code = 3

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(NextBasketError):
    exit_code = 1


class ConfigError(UsageError):

    def __init__(self, detail: str, key: str | None = None, path: str | None = None, line: int | None = None):
        where = ":".join(str(part) for part in (path, line) if part is not None)
        prefix = f"{where}: " if where else ""
        suffix = f" (key '{key}')" if key else ""
        super().__init__(f"{prefix}{detail}{suffix}")
        self.key = key
        self.path = path
        self.line = line


class DataError(NextBasketError):
    exit_code = 2


class MissingFileError(DataError):

    def __init__(self, path: str):
        super().__init__(f"file not found or unreadable: {path}")
        self.path = path


class ParseError(DataError):

    def __init__(self, path: str, line: int, detail: str):
        super().__init__(f"{path}:{line}: {detail}")
        self.path = path
        self.line = line


class EmptyDatasetError(DataError):
    pass


class CheckpointFormatError(DataError):
    pass


class ShapeError(NextBasketError, ValueError):

    def __init__(self, op: str, *shapes: tuple):
        rendered = " and ".join(str(tuple(shape)) for shape in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")
        self.op = op
        self.shapes = shapes


class PromptBudgetError(NextBasketError):
    pass


class GradientMissingError(NextBasketError):
    pass


class DegenerateGraphError(NextBasketError, RuntimeError):
    pass


class TrainingDivergenceError(NextBasketError):

    def __init__(self, components: list[str], epoch: int | None = None, step: int | None = None):
        where = f" at epoch {epoch}, step {step}" if epoch is not None else ""
        super().__init__(f"training diverged{where}: non-finite {', '.join(components)}")
        self.components = components
        self.epoch = epoch
        self.step = step
