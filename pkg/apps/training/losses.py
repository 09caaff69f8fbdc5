from dataclasses import dataclass

import numpy as np

from apps.detector.geometry import pseudo_boxes
from apps.detector.network import HeadOutput
from apps.tensor_core import ops
from apps.tensor_core.tensor import Tensor

from .assignment import AssignmentResult, LossWeights


@dataclass
class LossBreakdown:
    total: Tensor
    loc1: float
    loc2: float
    classification: float

    def as_dict(self) -> dict:
        return {
            'loss': float(self.total.item()),
            'loc1': self.loc1,
            'loc2': self.loc2,
            'class': self.classification,
        }


def masked_smooth_l1(boxes: Tensor, mask: np.ndarray, targets: np.ndarray) -> Tensor:
    """Smooth-L1 medio sobre las celdas de la máscara y las 4 coordenadas; 0 si no hay celdas."""
    if not mask.any():
        return Tensor(0.0, dtype=boxes.dtype)
    index = np.nonzero(mask)
    return ops.smooth_l1(boxes[index], targets[index].astype(boxes.dtype))


def total_loss(head: HeadOutput, assignment: AssignmentResult, weights: LossWeights) -> LossBreakdown:
    """L = λ1·L_loc1 + λ2·L_loc2 + λ3·L_class."""
    p1_points = head.p1_points()
    loc1 = masked_smooth_l1(pseudo_boxes(p1_points), assignment.loc1_mask, assignment.loc1_targets)
    loc2 = masked_smooth_l1(pseudo_boxes(head.p2_points(p1_points)), assignment.loc2_mask, assignment.loc2_targets)
    classification = ops.focal_loss(head.logits, assignment.labels[:, None],
                                    alpha=weights.focal_alpha, gamma=weights.focal_gamma)

    total = loc1 * weights.lambda_loc1 + loc2 * weights.lambda_loc2 + classification * weights.lambda_class
    return LossBreakdown(total, loc1.item(), loc2.item(), classification.item())
