"""JSON-over-HTTP client with a bounded number of in-flight requests and
jitterless exponential backoff, shared by the search and LLM backends."""
from __future__ import annotations

import logging
import os
import threading
import time

import requests

from drselect.core.errors import BackendUnavailable
from drselect.processing import config

logger = logging.getLogger(__name__)


def timeout_ms_from_env(timeout_ms=None) -> int:
    """Request timeout: the environment overrides ``timeout_ms``, which
    overrides the default."""
    value = os.environ.get(config.http_timeout_env)
    if value:
        return int(value)
    return int(timeout_ms) if timeout_ms is not None else \
        config.http_timeout_ms


class JsonPoster:
    """POST JSON to one endpoint, retrying on transport errors and non-200.

    At most ``max_retries + 1`` requests are sent per call. The wait before
    retry i (0-based) is ``backoff_s * 2**i``.
    """

    def __init__(self, url, timeout_ms=config.http_timeout_ms,
                 max_retries=config.http_max_retries,
                 max_in_flight=config.http_max_in_flight,
                 backoff_s=config.http_backoff_s, headers=None,
                 session=None, sleep=time.sleep):
        self.url = url
        self.timeout_s = timeout_ms / 1000.0
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.headers = dict(headers or {})
        self.session = session if session is not None else requests.Session()
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def post(self, payload: dict) -> dict:
        wait = self.backoff_s
        last_error = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(wait)
                wait *= 2.0
            try:
                with self._slots:
                    response = self.session.post(
                        self.url, json=payload, headers=self.headers,
                        timeout=self.timeout_s)
            except requests.RequestException as e:
                last_error = repr(e)
            else:
                if response.status_code == 200:
                    try:
                        return response.json()
                    except ValueError:
                        last_error = "response body is not JSON"
                else:
                    last_error = f"HTTP {response.status_code}"
            logger.warning("request failed",
                           extra={"url": self.url, "attempt": attempt + 1,
                                  "error": last_error})
        raise BackendUnavailable(
            f"{self.url} failed {self.max_retries + 1} times: {last_error}")
