import json
import logging
import os
import uuid
from datetime import datetime
from typing import Any, Dict, List, Optional

from config import Config

logger = logging.getLogger(__name__)


class RunHistory:
    """Keeps the history of lab runs; timestamps are recorded here and nowhere else"""

    def __init__(self, output_folder: str = None):
        self.history_file = os.path.join(output_folder or Config.OUTPUT_FOLDER, 'history.json')
        self.ensure_history_file()

    def ensure_history_file(self):
        """Create history file if it doesn't exist"""
        os.makedirs(os.path.dirname(self.history_file) or '.', exist_ok=True)
        if not os.path.exists(self.history_file):
            with open(self.history_file, 'w') as f:
                json.dump([], f)

    def save_run(self, manifest_path: str, seed: int, commands: List[str],
                 outcomes: Dict[str, bool], provenance: Dict[str, Any]) -> Optional[str]:
        """Append a run to the history, most recent first"""
        try:
            history = self.load_history()
            entry = {
                'id': str(uuid.uuid4()),
                'timestamp': datetime.now().isoformat(),
                'manifest': manifest_path,
                'seed': seed,
                'commands': list(commands),
                'outcomes': outcomes,
                'passed': all(outcomes.values()) if outcomes else False,
                'provenance': provenance,
            }
            history.insert(0, entry)
            with open(self.history_file, 'w') as f:
                json.dump(history, f, indent=2, default=str)
            return entry['id']
        except (OSError, TypeError, ValueError) as e:
            logger.error("Error saving run to history: %s", e)
            return None

    def load_history(self) -> List[Dict[str, Any]]:
        try:
            with open(self.history_file, 'r') as f:
                return json.load(f)
        except (OSError, ValueError) as e:
            logger.error("Error loading history: %s", e)
            return []

    def get_run_by_id(self, run_id: str) -> Optional[Dict[str, Any]]:
        for entry in self.load_history():
            if entry['id'] == run_id:
                return entry
        return None

    def get_recent_runs(self, limit: int = 10) -> List[Dict[str, Any]]:
        return self.load_history()[:limit]

    def clear_history(self) -> bool:
        try:
            with open(self.history_file, 'w') as f:
                json.dump([], f)
            return True
        except OSError as e:
            logger.error("Error clearing history: %s", e)
            return False
