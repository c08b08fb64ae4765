"""Worst-category long-tailed classification: geometric mean loss re-training,
two-head temperature ensembles and recall-based metrics."""

from .dataset import (
    ClassCounts,
    LabeledFeatureSet,
    LongTailProfile,
    count_classes,
    exponential_profile,
    make_batches,
    pareto_profile,
    read_features,
    read_features_csv,
    synthesize_gaussian,
    uniform_profile,
    write_features,
    write_features_csv,
)
from .ensemble import (
    TemperaturePair,
    ensemble_predict,
    evaluate,
    parse_grid,
    predict,
    sweep_temperatures,
    temperature_softmax,
)
from .errors import InvalidStateError
from .losses import (
    bsce_loss_and_grad,
    ce_loss_and_grad,
    gml_loss_and_grad,
    reweighted_softmax,
    softmax,
)
from .metrics import MetricsReport, overall_accuracy, per_class_recall, subset_report, summarize
from .model import LinearHead, MlpBackbone, ModelBundle, backward, forward, init_head
from .trainer import (
    Checkpoint,
    SgdState,
    TrainConfig,
    finetune,
    load_checkpoint,
    lr_at_epoch,
    pretrain,
    save_checkpoint,
    sgd_update,
)

__version__ = "0.1.0"
