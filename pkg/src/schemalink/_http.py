from __future__ import annotations

import logging
import os
import time
from typing import Callable

import httpx

log = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class RemoteError(RuntimeError):
    def __init__(self, message: str, retryable: bool, status: int | None = None):
        super().__init__(message)
        self.retryable = retryable
        self.status = status


def bearer_headers(token_env: str | None) -> dict[str, str]:
    token = os.environ.get(token_env) if token_env else None
    return {"Authorization": f"Bearer {token}"} if token else {}


def _retry_after(response: httpx.Response) -> float | None:
    value = response.headers.get("Retry-After")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    *,
    headers: dict[str, str] | None = None,
    retries: int = 3,
    backoff: float = 0.5,
    timeout: float | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> dict:
    """POST ``payload`` and decode the JSON reply, retrying transient failures.

    Waits ``backoff * 2**attempt`` between attempts, or the server's
    Retry-After when given.
    """
    last: RemoteError | None = None
    for attempt in range(retries + 1):
        wait = backoff * (2**attempt)
        try:
            response = client.post(url, json=payload, headers=headers or {}, timeout=timeout)
        except httpx.TransportError as exc:
            last = RemoteError(f"transport failure calling {url}: {exc}", retryable=True)
        else:
            if response.status_code < 300:
                try:
                    return response.json()
                except ValueError as exc:
                    raise RemoteError(f"{url} returned non-JSON body", retryable=False, status=response.status_code) from exc
            retryable = response.status_code in RETRYABLE_STATUS
            last = RemoteError(
                f"{url} returned HTTP {response.status_code}: {response.text[:200]}",
                retryable=retryable,
                status=response.status_code,
            )
            if not retryable:
                raise last
            wait = _retry_after(response) or wait
        if attempt < retries:
            log.warning("retrying %s after %.2fs (%s)", url, wait, last)
            sleep(wait)
    assert last is not None
    raise last
