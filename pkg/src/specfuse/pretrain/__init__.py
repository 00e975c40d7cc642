"""Self-distillation pretraining: views, losses, optimizer, training loop."""

from .losses import (
    init_projector,
    invariance_loss,
    projector_forward,
    sigreg,
    student_projection,
    teacher_target,
    total_loss,
)
from .loop import (
    TrainFault,
    TrainState,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)
from .optim import AdamW, ema_update, make_teacher, schedules
from .views import GLOBAL, LOCAL, View, augment_view, build_views, resize_bilinear
