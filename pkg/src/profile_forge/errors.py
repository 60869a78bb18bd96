"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class ProfileForgeError(Exception):
    """Base class for every error raised by this package."""


# corpus
class EmptyDocument(ProfileForgeError):
    pass


# gateway
class BackendUnavailable(ProfileForgeError):
    pass


class TransientBackendError(ProfileForgeError):
    """Raised by a backend for failures worth retrying (timeouts, 429, 5xx)."""


class ScriptMiss(ProfileForgeError):
    def __init__(self, prompt_hash: str, request_tag: str = ""):
        super().__init__(f"no scripted response for prompt {prompt_hash[:16]} ({request_tag or 'untagged'})")
        self.prompt_hash = prompt_hash
        self.request_tag = request_tag


class ContextOverflow(ProfileForgeError):
    pass


class InvalidJson(ProfileForgeError):
    """Model output that stayed unparseable after the repair turn.

    ``raw_text`` holds the last output so a human can patch the record.
    """

    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


class ApologyPersisted(ProfileForgeError):
    def __init__(self, raw_text: str):
        super().__init__("model kept apologizing after the feedback turn")
        self.raw_text = raw_text


# profiles
class ProfileParseError(ProfileForgeError):
    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text
        self.partial_trace: list = []


class MissingSection(ProfileParseError):
    def __init__(self, dimension, raw_text: str = ""):
        super().__init__(f"missing section: {dimension.value}", raw_text)
        self.dimension = dimension


class DuplicateSection(ProfileParseError):
    def __init__(self, dimension, raw_text: str = ""):
        super().__init__(f"duplicate section: {dimension.value}", raw_text)
        self.dimension = dimension


# summarizer
class DocumentTooLong(ProfileForgeError):
    pass


class PackingImpossible(ProfileForgeError):
    def __init__(self, index: int, message: str = ""):
        super().__init__(message or f"summary {index} cannot fit the context window on its own")
        self.index = index


class BudgetExceeded(ProfileForgeError):
    pass


# judging / statistics
class ScoreOutOfRange(ProfileForgeError):
    pass


class UnknownWinnerLabel(ProfileForgeError):
    pass


class MissingCell(ProfileForgeError):
    pass


class DegenerateInput(ProfileForgeError):
    pass


class DegenerateAgreement(ProfileForgeError):
    pass


# motivation recognition
class NoValidQuestions(ProfileForgeError):
    pass


class MissingAnnotation(ProfileForgeError):
    pass


class InvalidChoiceLabel(ProfileForgeError):
    pass


class IncompleteGroup(ProfileForgeError):
    pass


# runs
class ConfigInvalid(ProfileForgeError):
    pass


class MissingArtifacts(ProfileForgeError):
    pass
