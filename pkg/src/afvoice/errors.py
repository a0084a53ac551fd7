"""Exception hierarchy shared by every module.

Each error carries an ``exit_code`` so the CLI can map failures onto
0 ok / 1 runtime / 2 format / 3 config mismatch without a lookup table.
"""


class AFVoiceError(Exception):
    exit_code = 1


# signal / shape errors
class EmptyAudio(AFVoiceError):
    pass


class EmptyInput(AFVoiceError):
    pass


class InvalidSignal(AFVoiceError):
    pass


class ShapeMismatch(AFVoiceError, ValueError):
    pass


class RateMismatch(AFVoiceError, ValueError):
    pass


class InsufficientData(AFVoiceError):
    pass


class CorruptCode(AFVoiceError, IndexError):
    pass


class SequenceTooLong(AFVoiceError):
    pass


class GraphError(AFVoiceError):
    pass


# runtime state errors
class InvalidState(AFVoiceError):
    pass


class SessionClosed(AFVoiceError):
    pass


class SpeakerMismatch(AFVoiceError):
    pass


class EmptyStream(AFVoiceError):
    pass


# file / configuration errors
class FormatError(AFVoiceError):
    exit_code = 2


class InvalidConfig(AFVoiceError, ValueError):
    exit_code = 3


class ConfigMismatch(AFVoiceError):
    exit_code = 3
