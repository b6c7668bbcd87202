import glob
import os
from threading import Lock

from apscheduler.schedulers.background import BackgroundScheduler

from utils import get_logger

logger = get_logger(__name__)

STEP_CHECKPOINT_PATTERN = "ckpt_*.pt"


class CheckpointTimer:
    """
    Wall-clock checkpoint trigger

    A background job raises a "due" flag every `minutes`; the training loop
    polls it with consume() and does the actual save on its own thread, so
    parameters are never touched from the scheduler thread.
    """

    def __init__(self, minutes):
        self.minutes = minutes
        self.lock = Lock()
        self._due = False
        self.scheduler = None

        if minutes and minutes > 0:
            self.scheduler = BackgroundScheduler()
            self.scheduler.add_job(self._mark_due, "interval", minutes=minutes)
            self.scheduler.start()

    def _mark_due(self):
        with self.lock:
            self._due = True

    def consume(self):
        """
        Return True once per elapsed interval
        """
        with self.lock:
            due = self._due
            self._due = False
        return due

    def shutdown(self):
        if self.scheduler is not None and self.scheduler.running:
            self.scheduler.shutdown(wait=False)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False


def step_checkpoints(out_dir):
    """
    Step checkpoints in out_dir, oldest first
    """
    return sorted(glob.glob(os.path.join(out_dir, STEP_CHECKPOINT_PATTERN)))


def prune_checkpoints(out_dir, keep):
    """
    Delete all but the `keep` newest step checkpoints (latest.pt is never touched)

    Returns:
        list of deleted paths
    """
    if keep is None or keep <= 0:
        return []
    expired = step_checkpoints(out_dir)[:-keep]
    for path in expired:
        os.remove(path)
    if expired:
        logger.info("Pruned %d old checkpoints in %s", len(expired), out_dir)
    return expired
