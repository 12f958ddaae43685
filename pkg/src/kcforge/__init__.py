"""kcforge: knowledge-component discovery and evaluation toolkit.

Scores question pairs with a language-model logprob backend, turns the
PMI-style congruity into clusters of questions that plausibly share a
knowledge component, and ranks candidate KC models by how well an Additive
Factors Model fitted with them predicts student responses.
"""

from .afm import (
    AFMData,
    AFMGradient,
    AFMParams,
    FitConfig,
    OpportunityTable,
    QMatrix,
    assemble,
    build_q_matrix,
    compare,
    cross_validate,
    fit,
    fold_assignment,
    nll_and_gradient,
    opportunities,
    predict,
    rmse,
    save_reports,
)
from .clustering import (
    Dendrogram,
    DistanceMatrix,
    Merge,
    Partition,
    agglomerate,
    cut,
    save_dendrogram,
    select_k,
    silhouette,
    silhouette_samples,
    to_distance,
    to_kc_model,
)
from .congruity import (
    DEFAULT_SEP,
    CongruityMatrix,
    congruity_matrix,
    directed_pmi,
    load_congruity,
    save_congruity,
)
from .corpus import (
    EvalReport,
    KCModel,
    Question,
    QuestionBank,
    StepLog,
    StudentStep,
    canonical_text,
    load_kc_model,
    load_question_bank,
    load_step_log,
    save_kc_model,
    save_question_bank,
    save_step_log,
)
from .errors import (
    CacheCorruptError,
    InputError,
    KCForgeError,
    ProtocolError,
    ScoringError,
    TransportError,
)
from .scoring import (
    BigramScorer,
    CachedScorer,
    HttpScorer,
    Scorer,
    ScoreRequest,
    ScoreResult,
    cache_key,
)

__version__ = "0.1.0"
