import hashlib
import json
import logging
import os
import random
from datetime import datetime, timezone

import numpy as np
import torch

from config import LOG_FORMAT, LOG_LEVEL

_logging_ready = False


def setup_logging(level=None):
    """
    Configure root logging once for the process
    """
    global _logging_ready
    if _logging_ready and level is None:
        return
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT, force=True)
    _logging_ready = True


def get_logger(name):
    return logging.getLogger(name)


def format_timestamp(dt=None):
    """
    Format datetime for reports and log lines
    """
    if dt is None:
        dt = datetime.now(timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + "Z"


def log_event(event_type, details, logger=None):
    """
    Structured one-line event log
    """
    logger = logger or logging.getLogger("binder")
    logger.info("%s: %s", event_type, json.dumps(to_jsonable(details), sort_keys=True))


def create_error_response(error_message, error_type=None, details=None):
    """
    Create standardized error payload for the CLI
    """
    response = {
        "error": error_message,
        "type": error_type,
        "timestamp": format_timestamp(),
    }
    if details:
        response["details"] = details
    return response


def create_success_response(data, message=None):
    """
    Create standardized success payload for the CLI
    """
    response = {
        "success": True,
        "data": to_jsonable(data),
        "timestamp": format_timestamp(),
    }
    if message:
        response["message"] = message
    return response


def to_jsonable(obj):
    """
    Recursively convert tensors / numpy values into JSON-friendly types
    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().tolist()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(data), f, indent=2, sort_keys=True)


def append_jsonl(path, record):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(to_jsonable(record), sort_keys=True) + "\n")


def truncate_jsonl(path, keep):
    """
    Rewrite a JSONL log with only the records for which keep(record) holds

    Returns:
        number of dropped records
    """
    if not os.path.exists(path):
        return 0
    with open(path, "r", encoding="utf-8") as f:
        records = [json.loads(line) for line in f if line.strip()]
    kept = [r for r in records if keep(r)]
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        for record in kept:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    os.replace(tmp_path, path)
    return len(records) - len(kept)


def hash_parameters(module):
    """
    SHA-256 over every parameter and buffer of a module, in state_dict order
    """
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def seed_everything(seed):
    """
    Seed python, numpy and torch RNGs
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def make_generator(seed, device="cpu"):
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed))
    return generator


def get_rng_state():
    return {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
    }


def set_rng_state(state):
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(state["torch"])


def calculate_percentage(part, total):
    """
    Calculate percentage safely
    """
    if total == 0:
        return 0
    return round((part / total) * 100, 2)
