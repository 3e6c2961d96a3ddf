"""HTTP clients for the NBMP workflow and task APIs."""

from __future__ import annotations

import time
from typing import Callable

import requests

from mediaengine import nbmp


class NbmpRequestError(Exception):
    def __init__(self, message: str, status: int = 0, body: bytes = b""):
        super().__init__(message)
        self.status = status
        self.body = body

    @property
    def acknowledge(self) -> nbmp.Acknowledge | None:
        try:
            d = nbmp.parse_document(self.body, nbmp.WDD)
            return d.acknowledge
        except Exception:
            return None


class _DocumentClient:
    document_kind = nbmp.WDD

    def __init__(self, endpoint: str, timeout: float = 10.0, session: requests.Session | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self._session = session or requests.Session()

    def _request(self, method: str, url: str, body: bytes | None = None,
                 timeout: float | None = None) -> nbmp.Description | None:
        try:
            resp = self._session.request(
                method, url, data=body,
                headers={"Content-Type": "application/json"} if body else None,
                timeout=timeout or self.timeout)
        except requests.RequestException as e:
            raise NbmpRequestError(str(e)) from e
        if resp.status_code >= 300:
            raise NbmpRequestError(f"{method} {url} answered {resp.status_code}",
                                   status=resp.status_code, body=resp.content)
        if not resp.content:
            return None
        return nbmp.parse_document(resp.content, self.document_kind)

    def create(self, d: nbmp.Description, timeout: float | None = None) -> nbmp.Description:
        return self._request("POST", self.endpoint, d.serialize(), timeout)

    def retrieve(self, doc_id: str, timeout: float | None = None) -> nbmp.Description:
        return self._request("GET", f"{self.endpoint}/{doc_id}", timeout=timeout)

    def update(self, d: nbmp.Description, timeout: float | None = None,
               method: str = "PATCH") -> nbmp.Description:
        return self._request(method, f"{self.endpoint}/{d.general.id}", d.serialize(), timeout)

    def delete(self, doc_id: str, timeout: float | None = None) -> nbmp.Description | None:
        return self._request("DELETE", f"{self.endpoint}/{doc_id}", timeout=timeout)


class WorkflowClient(_DocumentClient):
    document_kind = nbmp.WDD


class TaskClient(_DocumentClient):
    document_kind = nbmp.TDD


def retry_with_budget(op: Callable[[], object], total_cap: float = 60.0,
                      initial_delay: float = 0.25, factor: float = 2.0,
                      max_delay: float = 10.0, sleep: Callable[[float], None] = time.sleep,
                      give_up_on: Callable[[NbmpRequestError], bool] | None = None):
    """Retry op with exponential backoff; the combined duration of all retry
    delays is capped. Raises the last error once the budget is spent."""
    start = time.monotonic()
    delay = initial_delay
    while True:
        try:
            return op()
        except NbmpRequestError as e:
            if give_up_on is not None and give_up_on(e):
                raise
            elapsed = time.monotonic() - start
            remaining = total_cap - elapsed
            if remaining <= 0:
                raise
            sleep(min(delay, remaining))
            delay = min(delay * factor, max_delay)
