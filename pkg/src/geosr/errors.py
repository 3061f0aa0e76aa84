"""Exception types shared across the package."""


class GeoSRError(Exception):
    """Base class for every error raised by geosr."""


class InputError(GeoSRError, ValueError):
    """Bad argument values: out-of-range coordinates, wrong shapes, missing inputs."""


class ConfigError(GeoSRError, ValueError):
    """Inconsistent configuration or parameter shapes."""


class ParseError(InputError):
    """A file did not match its documented format."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class NonFiniteLossError(GeoSRError, FloatingPointError):
    """Training produced a NaN/Inf loss or parameter."""

    def __init__(self, component, step=None):
        self.component = component
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in {component!r}{where}")
