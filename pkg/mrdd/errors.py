"""Exceptions shared by the training and estimation services."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, stage: str, epoch: int, checkpoint_path=None):
        self.stage = stage
        self.epoch = epoch
        self.checkpoint_path = checkpoint_path
        message = f"{stage} loss became non-finite at epoch {epoch}"
        if checkpoint_path:
            message += f" (diagnostic checkpoint: {checkpoint_path})"
        super().__init__(message)


class EstimationError(RuntimeError):
    """Raised when MINE cannot produce a finite estimate."""
