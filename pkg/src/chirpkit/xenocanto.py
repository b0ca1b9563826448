"""Query-driven ingestion client for the Xeno-canto recordings API.

Downloads are resumable and idempotent: every completed download is
recorded in a JSONL manifest next to the audio, and ids whose file is
already on disk are skipped on later runs. License metadata travels
with each record.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import urllib.error
import urllib.parse
import urllib.request

from .errors import RemoteApiError

log = logging.getLogger(__name__)

DEFAULT_API_BASE = "https://xeno-canto.org/api/2"
MANIFEST_NAME = "xc_manifest.jsonl"
_RETRYABLE = {429, 500, 502, 503, 504}


def _safe_id(xc_id) -> str:
    s = re.sub(r"[^A-Za-z0-9_-]", "", str(xc_id))
    if not s:
        raise RemoteApiError(f"unusable recording id {xc_id!r}")
    return s


def _http_get(url: str, max_retries: int, timeout_s: float,
              backoff_s: float) -> bytes:
    last = None
    for attempt in range(max_retries + 1):
        try:
            with urllib.request.urlopen(url, timeout=timeout_s) as resp:
                return resp.read()
        except urllib.error.HTTPError as exc:
            last = exc
            if exc.code not in _RETRYABLE:
                raise RemoteApiError(f"GET {url} failed: HTTP {exc.code}") from exc
        except urllib.error.URLError as exc:
            last = exc
        if attempt < max_retries:
            time.sleep(backoff_s * (2 ** attempt))
    raise RemoteApiError(f"GET {url} failed after {max_retries + 1} attempts: {last}")


def _record_meta(rec: dict) -> dict:
    xc_id = _safe_id(rec["id"])
    file_name = rec.get("file-name") or ""
    ext = os.path.splitext(file_name)[1].lower()
    if ext not in (".wav", ".mp3"):
        ext = ".mp3"
    return {
        "xc_id": xc_id,
        "genus": rec.get("gen", ""),
        "species": rec.get("sp", ""),
        "english_name": rec.get("en", ""),
        "file_url": rec.get("file", ""),
        "license": rec.get("lic", ""),
        "quality": rec.get("q", ""),
        "length": rec.get("length", ""),
        "extension": ext,
    }


def _load_manifest(path: str) -> dict:
    by_id = {}
    if os.path.exists(path):
        with open(path) as f:
            for line in f:
                if line.strip():
                    row = json.loads(line)
                    by_id[row["xc_id"]] = row
    return by_id


class _RateLimiter:
    # one request per interval, shared by page and file fetches
    def __init__(self, interval_s: float):
        self.interval_s = interval_s
        self._last = 0.0

    def wait(self):
        if self.interval_s <= 0:
            return
        now = time.monotonic()
        remaining = self._last + self.interval_s - now
        if remaining > 0:
            time.sleep(remaining)
        self._last = time.monotonic()


def fetch_xenocanto(query: str, out_dir: str, max_items: int | None = None,
                    api_base: str = DEFAULT_API_BASE,
                    rate_limit_s: float = 1.0, max_retries: int = 3,
                    timeout_s: float = 30.0) -> list[dict]:
    """Fetch recordings matching `query`, at most `max_items` of them.

    Returns one metadata dict per recording (license, taxon names, local
    path), covering both fresh downloads and files already present from
    earlier runs. A query with no matches returns an empty list.
    """
    if max_items is not None and max_items < 1:
        return []
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    have = _load_manifest(manifest_path)
    limiter = _RateLimiter(rate_limit_s)
    backoff_s = max(rate_limit_s, 0.05)

    out: list[dict] = []
    page = 1
    n_pages = 1
    with open(manifest_path, "a") as manifest:
        while page <= n_pages:
            limiter.wait()
            url = (f"{api_base}/recordings?"
                   f"query={urllib.parse.quote(query)}&page={page}")
            body = _http_get(url, max_retries, timeout_s, backoff_s)
            try:
                payload = json.loads(body)
            except json.JSONDecodeError as exc:
                raise RemoteApiError(f"bad JSON from {url}") from exc
            if "error" in payload:
                raise RemoteApiError(
                    f"API error: {payload.get('message', payload['error'])}")
            n_pages = int(payload.get("numPages", 1))
            for rec in payload.get("recordings", []):
                meta = _record_meta(rec)
                local = os.path.join(
                    out_dir, f"XC{meta['xc_id']}{meta['extension']}")
                meta["path"] = local
                prior = have.get(meta["xc_id"])
                if prior is not None and os.path.exists(prior["path"]):
                    out.append(prior)
                else:
                    limiter.wait()
                    blob = _http_get(meta["file_url"], max_retries,
                                     timeout_s, backoff_s)
                    tmp = local + ".part"
                    with open(tmp, "wb") as f:
                        f.write(blob)
                    os.replace(tmp, local)
                    manifest.write(json.dumps(meta, sort_keys=True) + "\n")
                    manifest.flush()
                    have[meta["xc_id"]] = meta
                    out.append(meta)
                    log.info("downloaded XC%s (%s %s)", meta["xc_id"],
                             meta["genus"], meta["species"])
                if max_items is not None and len(out) >= max_items:
                    return out
            page += 1
    return out
