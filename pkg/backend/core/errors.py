# backend/core/errors.py
# Exception types shared by the engine, the CLI and the API routers.


class CanonFuseError(Exception):
    exit_code = 1


class ConfigError(CanonFuseError, ValueError):
    """Invalid parameters, dimension mismatches, unknown modes."""

    exit_code = 2


class DataError(CanonFuseError):
    """Corrupt assets, malformed tensors, non-binary visibility, empty masks."""

    exit_code = 3
