"""Exception hierarchy shared by every morphfit module."""


class MorphfitError(Exception):
    """Base class for all library errors."""


class EmptyCloud(MorphfitError):
    pass


class InsufficientPoints(MorphfitError):
    pass


class DegenerateCorrespondence(MorphfitError):
    pass


class EmptyAfterClustering(MorphfitError):
    pass


class EmptyAfterCrop(MorphfitError):
    pass


class ShapeError(MorphfitError):
    pass


class ModelFormatError(MorphfitError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class InsufficientLandmarks(MorphfitError):
    pass


class DegenerateLandmarks(MorphfitError):
    pass


class RankDeficient(MorphfitError):
    def __init__(self, rank, required):
        super().__init__(f"effective rank {rank} < {required}")
        self.rank = rank
        self.required = required


class ParseError(MorphfitError):
    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.line = line
        self.offset = offset


class FormatError(MorphfitError):
    pass


class ConfigError(MorphfitError):
    pass
