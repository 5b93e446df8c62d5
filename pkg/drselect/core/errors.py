"""Exception hierarchy shared by all drselect modules."""


class DrSelectError(Exception):
    """Base class of every error raised on purpose by drselect."""


class ParseError(DrSelectError):
    """A line of an input file could not be parsed."""

    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class ValidationError(DrSelectError):
    """Input parsed fine but violates an invariant of the data model."""


class IdSetMismatch(ValidationError):
    """Two collections that must cover the same ids do not."""

    def __init__(self, message, left, right):
        self.only_left = sorted(set(left) - set(right))
        self.only_right = sorted(set(right) - set(left))
        super().__init__(
            f"{message}: only in first {self.only_left}, "
            f"only in second {self.only_right}")


class MissingQuery(DrSelectError):
    """A run-file backed retriever was asked for a query it never ran."""

    def __init__(self, dr_id, query_id):
        self.dr_id = dr_id
        self.query_id = query_id
        super().__init__(f"retriever '{dr_id}' has no results for query "
                         f"'{query_id}'")


class BackendUnavailable(DrSelectError):
    """A remote backend kept failing after all retries."""


class UnsupportedBaseline(DrSelectError):
    """A baseline needs a capability the retriever pool does not have."""


class LlmError(DrSelectError):
    """The LLM backend failed; carries the item being processed."""

    def __init__(self, message, **context):
        self.context = context
        if context:
            details = ", ".join(f"{k}={v}" for k, v in sorted(context.items()))
            message = f"{message} ({details})"
        super().__init__(message)


class MissingArtifact(DrSelectError):
    """A pipeline stage was started before the stage it depends on."""

    def __init__(self, stage, path):
        self.stage = stage
        self.path = path
        super().__init__(f"missing artifact '{path}': run stage '{stage}' "
                         "first")


class StaleArtifact(MissingArtifact):
    """A stored artifact was built for another set of generated queries."""

    def __init__(self, stage, path):
        self.stage = stage
        self.path = path
        DrSelectError.__init__(
            self, f"stale artifact '{path}' was built for other generated "
            f"queries: rerun stage '{stage}' with --force")
