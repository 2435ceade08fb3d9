"""Exception hierarchy. Everything the CLI maps to exit code 1 derives from MultiRagError."""


class MultiRagError(Exception):
    pass


# ingest
class IngestError(MultiRagError):
    """Adapter failure with the offending document attached."""

    def __init__(self, message, source_id=None, name=None):
        self.source_id = source_id
        self.name = name
        if source_id is not None or name is not None:
            message = f"{message} [source={source_id!r} name={name!r}]"
        super().__init__(message)


class EmptyInput(IngestError):
    pass


class MalformedTable(IngestError):
    pass


class MalformedTree(IngestError):
    pass


class DuplicateDocument(IngestError):
    pass


class AdapterMismatch(IngestError):
    pass


class NoColumnIndex(MultiRagError):
    pass


class UnknownAttribute(MultiRagError):
    pass


# extract
class NoExtractableContent(MultiRagError):
    pass


class ClientError(MultiRagError):
    pass


class ReplyParseError(MultiRagError):
    pass


# graph / homology
class UnknownEntity(MultiRagError):
    pass


class NoCandidates(MultiRagError):
    pass


# confidence
class EmptyContent(MultiRagError):
    pass


class TooFewMembers(MultiRagError):
    pass


# pipeline / eval
class EmptyQuery(MultiRagError):
    pass


class RateTooHigh(MultiRagError):
    pass


class ConfigError(MultiRagError):
    pass
