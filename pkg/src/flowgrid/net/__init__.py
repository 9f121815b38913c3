from . import model, tape, train

__all__ = ["model", "tape", "train"]
