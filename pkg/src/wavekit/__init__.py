"""wavekit: a desk-scale unified audio-visual embedding model.

A tiny multimodal transformer over a from-scratch float64 autodiff engine,
trained contrastively on synthetic data whose latent structure makes every
retrieval and QA claim checkable against ground truth.
"""

from .autodiff import GradCheckReport, Tensor, grad_check, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    GROUPS,
    LatentSpec,
    PairRecord,
    TaskBatchPlan,
    generate_dataset,
    generate_records,
    load_dataset,
    make_qa_record,
    sample_batches,
    save_dataset,
)
from .model import (
    LayerStates,
    LoraConfig,
    Model,
    ModelConfig,
    MultimodalSample,
    PositionGrid,
    apply_tmrope,
    assign_positions,
)
from .objectives import (
    EmbeddingBatch,
    ObjectiveConfig,
    cosine_sim,
    qa_loss,
    retrieval_loss,
)
from .training import DivergenceError, TrainConfig, TrainResult, train
from .evaluation import (
    EvalReport,
    ModelEmbedder,
    evaluate_qa,
    evaluate_retrieval,
    prompt_argmax_accuracy,
    prompt_similarity_matrix,
    recall_at_k,
    run_fusion_ablation,
)

__version__ = "0.1.0"
