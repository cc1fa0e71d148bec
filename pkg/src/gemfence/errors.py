"""Exception hierarchy shared by all gemfence modules."""


class GemError(Exception):
    """Base class for every error raised by gemfence."""


# graph
class RecordError(GemError, ValueError):
    """A signal record violates its invariants."""


class DuplicateRecordId(RecordError):
    pass


class EmptyReadings(RecordError):
    pass


class RssOutOfRange(RecordError):
    pass


class WeightNotPositive(RecordError):
    pass


class IsolatedNode(GemError, ValueError):
    pass


class RecordParseError(GemError, ValueError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


# bisage / trainer
class EmptyGraph(GemError, ValueError):
    pass


class EmptySample(GemError, ValueError):
    pass


class ShapeMismatch(GemError, ValueError):
    pass


class NoKnownNeighbors(GemError):
    pass


class NoEdges(GemError, ValueError):
    pass


class NonFiniteLoss(GemError, FloatingPointError):
    pass


class MissingForwardTrace(GemError, ValueError):
    pass


# detector
class EmptyTrainingSet(GemError, ValueError):
    pass


class NonPositiveT(GemError, ValueError):
    pass


class GammaOutOfRange(GemError, ValueError):
    pass


class NotConfident(GemError, ValueError):
    pass


# engine
class TooFewRecords(GemError, ValueError):
    pass


class ModelFileError(GemError):
    pass


class VersionMismatch(ModelFileError):
    pass


class CorruptModel(ModelFileError):
    pass


# rf-sim
class InvalidPolygon(GemError, ValueError):
    pass


class UnreachableRegion(GemError, ValueError):
    pass


class InvalidSpec(GemError, ValueError):
    pass


# evalkit
class IdMismatch(GemError, ValueError):
    pass


class SingleClass(GemError, ValueError):
    pass


class MissingFixture(GemError, FileNotFoundError):
    pass
