import logging

logger = logging.getLogger(__name__)


def report_error(error_text: str) -> None:
    """Report an unexpected failure.

    Emits an ERROR event carrying the text, usually a formatted traceback.
    Change this if failures should also go somewhere else.

    Args:
        error_text (str): The error message to report.
    """
    logger.error("unexpected failure", extra={"traceback": error_text})
