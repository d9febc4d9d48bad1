"""pcrkit: desk-scale omni-modal embeddings with a composed-retrieval harness."""

from .data import (
    BenchmarkTask,
    ComposedQuery,
    DatasetRecord,
    Embedding,
    ModalityItem,
    cosine,
    normalize,
    read_records,
    validate_record,
    validate_records,
    write_records,
)
from .encoder import (
    EncoderConfig,
    assemble_sequence,
    encode,
    encode_batch,
    fuse_simple_add,
    init_params,
    patchify_image,
    sample_video_frames,
    tokenize_text,
)
from .objective import ContrastiveBatch, info_nce, info_nce_grad, similarity_matrix
from .trainer import (
    OptimizerState,
    PhaseSpec,
    TrainConfig,
    adam_step,
    build_batches,
    curriculum_plan,
    grad_check,
    train_stage,
)
from .stainlab import (
    LabStats,
    StainDistribution,
    fit_stain_distribution,
    image_stats_lab,
    lab_to_rgb,
    randstain_augment,
    reinhard,
    rgb_to_lab,
)
from .curation import FilterConfig, SynthSpec, filter_pairs, score_pairs, synth_dataset
from .retrieval import EmbeddingIndex, batch_score, build_index, load_index, save_index, topk
from .evalbench import (
    GapReport,
    MetricReport,
    build_tasks,
    evaluate_task,
    modality_gap,
    pca_project,
    recall_at_k,
    run_fusion_ablation,
    weighted_accuracy,
    zero_shot_classify,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
