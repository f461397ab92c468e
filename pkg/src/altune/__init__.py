"""altune: pool-based active learning with task-adaptive pre-training.

A self-contained desk-scale engine: a dense-network numerics core, dataset
handling with an oracle that masks labels, contrastive/reconstruction
pre-training of a frame encoder, uncertainty-based acquisition with
clustering-seeded initialization, and budget-sweep / ablation harnesses.
"""

__version__ = "0.1.0"

from .acquisition import (
    AcquisitionSpec,
    ClusterModel,
    ScoredSample,
    clustering_init,
    elbow_choose_k,
    kmeans,
    score_committee_bald,
    score_entropy,
    score_least_confidence,
    score_margin,
    select_top_k,
)
from .dataset import (
    Dataset,
    LabelOracle,
    Sample,
    SplitSpec,
    SynthConfig,
    kfold_split,
    load_dataset,
    make_pool,
    synth_pool,
    write_dataset,
    zscore_normalize,
)
from .engine import (
    ALConfig,
    ClassifierModel,
    ConfigError,
    Metrics,
    PipelineConfig,
    RunLog,
    RunLogRow,
    ablation_grid,
    evaluate,
    fine_tune,
    kfold_experiment,
    run_al,
    run_pipeline,
)
from .numerics import (
    AdamState,
    DenseNet,
    Layer,
    adam_step,
    cosine_similarity,
    cross_entropy,
    finite_diff_check,
    one_hot,
    softmax,
)
from .tapt import (
    Codebook,
    EncoderModel,
    TaptConfig,
    contrastive_loss,
    load_encoder,
    make_mask,
    quantize,
    reconstruction_loss,
    save_encoder,
    tapt_train,
)
