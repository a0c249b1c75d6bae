class DiTParallelException(Exception):
    pass


class ValidationError(DiTParallelException):
    pass


class ScheduleError(ValidationError):
    pass


class NumericError(DiTParallelException):
    pass


class StalenessError(NumericError):
    pass


class ChannelClosedError(DiTParallelException):
    pass


class ProtocolError(DiTParallelException):
    pass
