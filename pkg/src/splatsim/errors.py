"""Exception and warning types raised across the simulator."""


class SplatSimError(Exception):
    """Base class for all simulator errors."""


# --- asset / PLY ---------------------------------------------------------

class MalformedHeader(SplatSimError):
    pass


class MissingField(SplatSimError):
    def __init__(self, field: str):
        super().__init__(f"required PLY property missing: {field!r}")
        self.field = field


class InvalidValue(SplatSimError):
    def __init__(self, message: str, vertex: int):
        super().__init__(f"{message} (vertex {vertex})")
        self.vertex = vertex


class EmptyScene(SplatSimError):
    pass


class InvalidTransform(SplatSimError):
    pass


# --- poses ----------------------------------------------------------------

class MalformedLine(SplatSimError):
    def __init__(self, message: str, line: int):
        super().__init__(f"{message} (line {line})")
        self.line = line


class EmptyPoseSet(SplatSimError):
    pass


class MalformedManifest(SplatSimError):
    pass


# --- spline / track --------------------------------------------------------

class TooFewKnots(SplatSimError):
    pass


class OutOfRange(SplatSimError):
    pass


class DuplicateKnotWarning(UserWarning):
    pass


class SingleSegmentTrackWarning(UserWarning):
    pass


# --- physics / env ----------------------------------------------------------

class SimulationDiverged(SplatSimError):
    pass


class EpisodeFinished(SplatSimError):
    pass


# --- renderer ---------------------------------------------------------------

class InvalidDegree(SplatSimError):
    pass


# --- rl -----------------------------------------------------------------------

class DivergedUpdate(SplatSimError):
    pass


# --- config ---------------------------------------------------------------------

class ConfigError(SplatSimError):
    pass
