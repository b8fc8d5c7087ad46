"""In-process chat-completion endpoint with canned ground-truth labels.

The handler detects which pipeline stage a prompt belongs to from the
format contract embedded in the prompt text, finds the article by a marker
substring of its abstract, and answers from the truth table. Knobs:
``fail_first`` returns HTTP 500 for the first N requests (retry testing)
and ``garble`` returns schema-violating text for the first N requests of a
stage (re-ask testing).
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class MockLlm:
    def __init__(self, truth: dict[str, dict], fail_first: int = 0,
                 garble: dict[str, int] | None = None):
        self.truth = truth
        self.fail_first = fail_first
        self.garble = dict(garble or {})
        self.lock = threading.Lock()
        self.requests: list[tuple[str, str]] = []  # (stage, marker)
        self._server: ThreadingHTTPServer | None = None

    @property
    def n_requests(self) -> int:
        with self.lock:
            return len(self.requests)

    def stages_seen(self) -> list[str]:
        with self.lock:
            return [stage for stage, _ in self.requests]

    def __enter__(self):
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, status: int, payload: dict):
                raw = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def do_POST(self):
                if self.path != "/v1/chat/completions":
                    self._reply(404, {"error": "unknown path"})
                    return
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                prompt = body["messages"][-1]["content"]
                full_text = " ".join(m["content"] for m in body["messages"])

                if '"confirmed"' in full_text:
                    stage = "stage3"
                elif '"keywords"' in full_text:
                    stage = "stage2"
                else:
                    stage = "stage1"

                marker = ""
                entry = None
                for key, truth in mock.truth.items():
                    if key in full_text:
                        marker, entry = key, truth
                        break

                with mock.lock:
                    mock.requests.append((stage, marker))
                    if mock.fail_first > 0:
                        mock.fail_first -= 1
                        self._reply(500, {"error": "transient"})
                        return
                    if mock.garble.get(stage, 0) > 0:
                        mock.garble[stage] -= 1
                        content = "Well, it is complicated to say for sure."
                        self._reply(200, {"choices": [{"message": {"content": content}}]})
                        return

                if stage == "stage1":
                    content = "yes" if entry and entry.get("relevant") else "no"
                elif stage == "stage2":
                    content = json.dumps({
                        "keywords": list(entry.get("keywords", [])) if entry else [],
                        "subfields": list(entry.get("subfields", [])) if entry else [],
                    })
                else:
                    confirmed = (
                        entry.get("confirmed", entry.get("keywords", []))
                        if entry else []
                    )
                    content = json.dumps({"confirmed": list(confirmed)})
                self._reply(200, {"choices": [{"message": {"content": content}}]})

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self.base_url = f"http://127.0.0.1:{self._server.server_address[1]}"
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        return False


# Ground truth for the 21-file fixture corpus under tests/fixtures/corpus.
# Markers are unique tokens embedded in each fixture abstract; this table is
# the oracle that engagement counts are checked against.
CORPUS_TRUTH = {
    "MARKER-A01": {"relevant": True,
                   "keywords": ["CNN", "transformer"],
                   "subfields": ["ComputerVision", "NaturalLanguageProcessing"]},
    "MARKER-A02": {"relevant": True,
                   "keywords": ["reinforcement learning"],
                   "subfields": ["LearningAlgorithms"]},
    "MARKER-A03": {"relevant": False},
    "MARKER-A04": {"relevant": True,
                   "keywords": ["graph neural network"],
                   "subfields": ["KnowledgeRepresentation"],
                   "confirmed": []},
    "MARKER-A06": {"relevant": True,
                   "keywords": ["transformer"],
                   "subfields": ["NaturalLanguageProcessing"]},
    "MARKER-B01": {"relevant": False},
    "MARKER-B02": {"relevant": True,
                   "keywords": ["support vector machine"],
                   "subfields": ["LearningAlgorithms"]},
    "MARKER-B03": {"relevant": False},
    "MARKER-B04": {"relevant": True,
                   "keywords": ["neural network", "training session"],
                   "subfields": ["LearningAlgorithms"],
                   "confirmed": ["neural network"]},
    "MARKER-C01": {"relevant": True,
                   "keywords": ["computer vision", "CNN"],
                   "subfields": ["ComputerVision"]},
    "MARKER-C02": {"relevant": False},
    "MARKER-C03": {"relevant": True,
                   "keywords": ["information retrieval"],
                   "subfields": ["Search"]},
    "MARKER-C04": {"relevant": True,
                   "keywords": ["multi-agent system"],
                   "subfields": ["DistributedAI"]},
    "MARKER-D01": {"relevant": True,
                   "keywords": ["BERT"],
                   "subfields": ["NaturalLanguageProcessing"]},
    "MARKER-D02": {"relevant": False},
    "MARKER-D03": {"relevant": False},
    "MARKER-E01": {"relevant": True,
                   "keywords": ["random forest"],
                   "subfields": ["LearningAlgorithms"]},
    "MARKER-E02": {"relevant": False},
    "MARKER-E03": {"relevant": True,
                   "keywords": ["knowledge graph"],
                   "subfields": ["KnowledgeRepresentation", "Quantum AI"]},
}
