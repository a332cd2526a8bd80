"""
Versioned checkpoint container: named state dicts plus the records needed to
rebuild the networks.
"""

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mrdd-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], kind: str, state: Dict[str, Dict[str, torch.Tensor]],
                    specs: Dict[str, Any], meta: Optional[Dict[str, Any]] = None) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "specs": specs,
        "meta": meta or {},
        "state": {name: {k: v.detach().cpu() for k, v in sd.items()} for name, sd in state.items()},
    }
    torch.save(payload, path)
    logger.info(f"Saved {kind} checkpoint: {path}")
    return str(path)


def load_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise ValueError(f"{path} holds a '{payload.get('kind')}' checkpoint, expected '{kind}'")
    return payload
