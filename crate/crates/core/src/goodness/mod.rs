//! The dimensionality-compression goodness: second moments, effective
//! dimensionality, consistency/diversity terms, Haar projections and the
//! cosine orthogonality score of learned kernels.

pub mod cos;
pub mod moment;
pub mod objective;
pub mod projection;

use serde::{Deserialize, Serialize};

pub use cos::{cos_score, mean_kernel_std};
pub use moment::{effective_dim, second_moment, MomentSummary, DEFAULT_ED_EPS};
pub use objective::{
    channels_as_samples, consistency_groups, dc_loss, dc_objective, ed_consistency, ed_diversity, DcTerms,
    SampleViews, Supervision,
};
pub use projection::{haar_basis, haar_basis_for_block, project, ProjectionBasis};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionStrategy {
    /// Decreasing per-block dimensions (30-20-10 for 10-class data).
    #[default]
    Graded,
    /// Every block projected to the class count.
    Fixed,
    /// A random dimension per block.
    Random,
    /// Objective computed on raw channels.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoodnessConfig {
    pub alpha: f64,
    pub n_copies: usize,
    pub projection_strategy: ProjectionStrategy,
    /// Explicit per-block dimensions; derived from the strategy when absent.
    pub projection_dims: Option<Vec<usize>>,
    pub eps: f64,
    pub supervision: Supervision,
}

impl Default for GoodnessConfig {
    fn default() -> Self {
        GoodnessConfig {
            alpha: 0.5,
            n_copies: 20,
            projection_strategy: ProjectionStrategy::Graded,
            projection_dims: None,
            eps: DEFAULT_ED_EPS,
            supervision: Supervision::Unsup,
        }
    }
}
