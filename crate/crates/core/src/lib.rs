//! Channel-wise derivative operators over pixel features, derivative label
//! propagation for pseudo-label rectification, the derivative loss family
//! with closed-form gradients, and numerical checks of the supporting theory.

pub mod derivative;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod similarity;
pub mod tensor;
pub mod theory;

pub use derivative::{
    apply_operator_columns, build_operator_matrix, diff, diff_columns, induced_one_norm, numerical_rank,
    DerivativeOperator, DerivativeVariant,
};
pub use error::{Error, Result};
pub use losses::{
    cross_entropy_masked, derivative_loss, kl_masked, loss_gradients, total_loss, DerLossSpec, DerTargets, HighOrderTarget,
    LossParts, LossToggles, LossWeights, Reduction,
};
pub use similarity::{
    blend_pseudo_labels, confidence_mask, cosine, derivative_propagate, derivative_similarity, propagate,
    scaled_propagate, similarity_matrix, BlendSchedule, CosineConvention, KernelScale, SimilarityKind,
    SimilarityMatrix,
};
pub use tensor::{
    entrywise_l1, l1_normalize_columns, softmax_columns, FeatureMap, LabelMap, LogitMap, ProbMap, Tensor, ZeroPolicy,
};
