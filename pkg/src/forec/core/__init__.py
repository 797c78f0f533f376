from forec.core.ops import IGNORE_INDEX
from forec.core.optim import SgdState, poly_lr, sgd_step
from forec.core.tape import Node, Tape

__all__ = ["IGNORE_INDEX", "Node", "SgdState", "Tape", "poly_lr", "sgd_step"]
