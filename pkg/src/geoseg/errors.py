"""Exception hierarchy shared by all pipeline stages.

Exit-code mapping used by the CLI: ConfigError -> 1, NetworkError -> 2,
DataError -> 3.
"""


class GeosegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GeosegError):
    """Invalid or missing configuration (bad TOML, missing file, bad CRS id)."""


class NetworkError(GeosegError):
    """A remote service failed after retries (imagery endpoint, Overpass)."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class DataError(GeosegError):
    """Input data violates a contract (degenerate region, CRS mismatch, ...)."""


class PipelineError(GeosegError):
    """A stage failed on a specific tile; wraps the original error."""

    def __init__(self, stage: str, tile_id: int | None, cause: Exception):
        detail = f"stage '{stage}'"
        if tile_id is not None:
            detail += f", tile {tile_id}"
        super().__init__(f"{detail}: {cause}")
        self.stage = stage
        self.tile_id = tile_id
        self.cause = cause
