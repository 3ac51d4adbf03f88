"""
Candidate Tracking for Model Learning
Keeps every proposed program on disk and an append-only learning log per domain
"""

import json
import logging
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from pps_parser import Program
from settings import CACHE_DIR

logger = logging.getLogger(__name__)

LOG_NAME = "learning_log.jsonl"


class CandidateTracker:
    """
    On-disk record of a learning run for one domain:

        <root>/<domain>/<component>/<node-id>.pps
        <root>/<domain>/learning_log.jsonl
        <root>/<domain>/llm/<n>-<component>-<kind>.json
    """

    def __init__(self, domain: str, root: Optional[Path] = None):
        self.domain = domain
        self.root = Path(root) if root is not None else CACHE_DIR
        self.base = self.root / domain
        self._learn_calls: Counter = Counter()
        self._exchanges = 0

    @property
    def log_path(self) -> Path:
        return self.base / LOG_NAME

    def start_learn_call(self, component: str) -> int:
        """Index of a new learn call for component; prefixes its node ids."""
        existing = self._count_existing_calls(component)
        self._learn_calls[component] = max(self._learn_calls[component], existing) + 1
        return self._learn_calls[component]

    def _count_existing_calls(self, component: str) -> int:
        folder = self.base / component
        if not folder.exists():
            return 0
        prefixes = {p.name.split("-")[0] for p in folder.glob("*.pps")}
        return max((int(p) for p in prefixes if p.isdigit()), default=0)

    def save_candidate(self, component: str, node_id: str, program: Program) -> Optional[Path]:
        """Write a candidate program with its component header"""
        path = self.base / component / f"{node_id}.pps"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            text = program.text
            if not text.lstrip().startswith("# component:"):
                text = f"# component: {component}\n{text}"
            path.write_text(text, encoding="utf-8")
            return path
        except OSError as e:
            logger.error("❌ Error saving candidate %s/%s: %s", component, node_id, e)
            return None

    def log_event(self, entry: Dict) -> bool:
        """Append one JSON line to the learning log"""
        try:
            self.base.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
            return True
        except OSError as e:
            logger.error("❌ Error writing learning log: %s", e)
            return False

    def load_log(self) -> List[Dict]:
        if not self.log_path.exists():
            return []
        entries = []
        try:
            with open(self.log_path, "r", encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        entries.append(json.loads(line))
        except (OSError, json.JSONDecodeError) as e:
            logger.error("❌ Error loading learning log: %s", e)
        return entries

    def log_exchange(self, component: str, kind: str, prompt: str, response: Optional[str],
                     error: Optional[str] = None) -> Optional[Path]:
        """Keep a prompt and the raw proposer response for audit"""
        self._exchanges += 1
        path = self.base / "llm" / f"{self._exchanges:04d}-{component}-{kind}.json"
        record = {
            "component": component,
            "kind": kind,
            "logged_at": datetime.now(timezone.utc).isoformat(),
            "prompt": prompt,
            "response": response,
            "error": error,
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(record, indent=2), encoding="utf-8")
            return path
        except OSError as e:
            logger.error("❌ Error saving proposer exchange: %s", e)
            return None


def node_counts(entries: List[Dict]) -> Dict[tuple, int]:
    """Candidates created per (phase, component), from learning-log entries"""
    counts: Counter = Counter()
    for entry in entries:
        if entry.get("event") == "node" and entry.get("from_proposer", True):
            counts[(entry["phase"], entry["component"])] += 1
    return dict(counts)


def learn_invocations(entries: List[Dict], phase: str) -> int:
    return sum(1 for e in entries if e.get("event") == "learn_start" and e.get("phase") == phase)
