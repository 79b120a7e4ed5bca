"""selekt: class-selectivity regularization and robustness analysis toolkit."""

from .backbone import (
    ArchConfig,
    ImageBatch,
    LayerActivations,
    ModelAdapter,
    build_model,
    load_checkpoint,
)
from .selectivity import (
    LossSpec,
    RegularizerConfig,
    SelectivityReport,
    UnitClassStats,
    class_conditional_means,
    network_selectivity,
    regularized_loss,
    selectivity_index,
    selectivity_report,
    unit_si,
)
from .attacks import AttackSpec, attack_sweep, fgsm, pgd
from .corruptions import (
    CorruptionEvalResult,
    CorruptionSpec,
    apply_corruption,
    corrupted_eval,
    load_corruption_benchmark,
    synthetic_suite,
)
from .dimensionality import DimReport, clean_dim_profile, difference_dim_profile, dims_to_variance
from .stability import JacobianReport, input_output_jacobian, jacobian_magnitude
from .data import (
    Dataset,
    DatasetDescriptor,
    generate_synthetic,
    load_dataset,
    load_local,
    materialize_dataset,
)
from .harness import (
    BootstrapCI,
    RunRecord,
    TrainConfig,
    bootstrap_ci,
    read_record,
    run_sweep,
    split_dataset,
    train,
    validate_record,
    write_record,
)

__version__ = "0.1.0"
