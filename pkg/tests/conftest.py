"""Shared fixtures: a small music ontology, corpus builders, and a
scriptable in-process HTTP server standing in for LLM / embedding
endpoints."""

from __future__ import annotations

import json
import random
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from musicqa.corpus import ClipRecord, LabelFrequencyTable, Source
from musicqa.ontology import parse_ontology

# ---------------------------------------------------------------------------
# Ontology fixtures

# Shape: root "Music" with two top-level categories; instruments have an
# intermediate abstract grouping plus a non-leaf concrete node ("Guitar")
# whose children are the actual leaves; "Speech" sits outside the music
# subtree entirely.
FIXTURE_NODES = [
    {"id": "root", "name": "Sounds", "child_ids": ["music", "speech"], "abstract": True},
    {"id": "music", "name": "Music", "child_ids": ["instr", "genre"]},
    {"id": "speech", "name": "Speech", "child_ids": ["sp1"]},
    {"id": "sp1", "name": "Narration", "child_ids": []},
    {"id": "instr", "name": "Musical instrument", "child_ids": ["strings", "piano", "drums"]},
    {"id": "strings", "name": "Guitar", "child_ids": ["ag", "eg"]},
    {"id": "ag", "name": "Acoustic guitar", "child_ids": []},
    {"id": "eg", "name": "Electric guitar", "child_ids": []},
    {"id": "piano", "name": "Piano", "child_ids": []},
    {"id": "drums", "name": "Drum kit", "child_ids": []},
    {"id": "genre", "name": "Music genre", "child_ids": ["rock", "jazz", "pop", "folk"]},
    {"id": "rock", "name": "Rock music", "child_ids": []},
    {"id": "jazz", "name": "Jazz", "child_ids": []},
    {"id": "pop", "name": "Pop music", "child_ids": []},
    {"id": "folk", "name": "Folk music", "child_ids": []},
]

FIXTURE_LEAF_IDS = {"ag", "eg", "piano", "drums", "rock", "jazz", "pop", "folk"}


@pytest.fixture
def fixture_ontology():
    return parse_ontology(json.dumps(FIXTURE_NODES))


def make_clip(audio_id, labels, source=Source.FMA, caption=None, metadata=None, duration=None):
    return ClipRecord(
        audio_id=audio_id,
        source=source,
        labels=frozenset(labels),
        caption=caption,
        metadata=metadata or {},
        duration_s=duration,
    )


@pytest.fixture
def fixture_clips():
    """Handful of clips over the fixture ontology, one non-music."""
    return [
        make_clip("c01", {"ag", "rock"}, caption="Upbeat acoustic rock."),
        make_clip("c02", {"piano", "jazz"}, caption="Late night piano jazz."),
        make_clip("c03", {"eg"}, caption="Distorted riffing."),
        make_clip("c04", {"sp1"}, caption="A person talking."),
        make_clip("c05", {"drums", "pop", "folk"}),
    ]


@pytest.fixture
def fixture_freqs():
    counts = {"ag": 40, "eg": 25, "piano": 20, "drums": 15, "rock": 50, "jazz": 10, "pop": 30, "folk": 5}
    return LabelFrequencyTable(counts=counts, total=sum(counts.values()))


def wide_ontology(n_categories=6, leaves_per_category=30):
    """Synthetic ontology large enough for distribution checks."""
    nodes = [{
        "id": "music",
        "name": "Music",
        "child_ids": [f"cat{c}" for c in range(n_categories)],
        "abstract": True,
    }]
    for c in range(n_categories):
        kids = [f"leaf{c}_{i}" for i in range(leaves_per_category)]
        nodes.append({"id": f"cat{c}", "name": f"Category {c}", "child_ids": kids, "abstract": True})
        for i, k in enumerate(kids):
            nodes.append({"id": k, "name": f"Label {c} {i}", "child_ids": []})
    return parse_ontology(json.dumps(nodes))


def wide_corpus(n_clips, n_categories=6, leaves_per_category=30, rng_seed=7, max_labels=4):
    rng = random.Random(rng_seed)
    universe = [f"leaf{c}_{i}" for c in range(n_categories) for i in range(leaves_per_category)]
    return [
        make_clip(f"clip{n:06d}", rng.sample(universe, rng.randint(1, max_labels)))
        for n in range(n_clips)
    ]


def wide_freqs(n_categories=6, leaves_per_category=30):
    counts = {f"leaf{c}_{i}": i + 1 for c in range(n_categories) for i in range(leaves_per_category)}
    return LabelFrequencyTable(counts=counts, total=sum(counts.values()))


# ---------------------------------------------------------------------------
# Mock HTTP endpoint

class MockEndpoint:
    """In-process HTTP server whose responses follow a per-test script.

    script entries are (status, body) pairs; the last entry repeats once
    the script is exhausted. Bodies may be dicts (sent as JSON) or raw
    strings. Every request is recorded for assertions.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._script: list[tuple[int, object]] = [(200, {"choices": [{"message": {"content": "[]"}}]})]
        self._cursor = 0
        self.requests: list[dict] = []

        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                try:
                    payload = json.loads(raw)
                except ValueError:
                    payload = {"_raw": raw.decode("utf-8", "replace")}
                with endpoint._lock:
                    endpoint.requests.append({
                        "path": self.path,
                        "payload": payload,
                        "auth": self.headers.get("Authorization"),
                    })
                    status, body = endpoint._script[min(endpoint._cursor, len(endpoint._script) - 1)]
                    endpoint._cursor += 1
                data = body.encode("utf-8") if isinstance(body, str) else json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def script(self, *entries):
        """Replace the response script and reset the cursor and log."""
        with self._lock:
            self._script = list(entries)
            self._cursor = 0
            self.requests.clear()

    @staticmethod
    def chat_body(content: str) -> dict:
        return {"choices": [{"message": {"content": content}}]}

    def close(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def mock_endpoint():
    ep = MockEndpoint()
    yield ep
    ep.close()


# ---------------------------------------------------------------------------
# Acceptance reporting: one visible pass/fail line per criterion

def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", None) != "call" and outcome != "error":
                continue
            match = re.search(r"test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if not match:
                continue
            detail = dict(getattr(rep, "user_properties", [])).get(
                "criterion", match.group(2).replace("_", " ")
            )
            rows[int(match.group(1))] = (outcome == "passed", detail)
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(rows):
        ok, detail = rows[number]
        terminalreporter.write_line(f"[criterion {number:02d}] {'PASS' if ok else 'FAIL'} {detail}")
