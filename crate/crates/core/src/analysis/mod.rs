//! Parameter and cost accounting, adjacent-layer similarity and gradient
//! checking.

mod counts;
mod gradcheck;
mod similarity;

pub use counts::{
    attention_projection_cost, count_dfc, count_fc_flops, count_sfc, delta_rate, fc_overhead_ratio, ffn_cost,
    p_extra, round_sig, structural_extra, structural_total, Convention, ParamBreakdown,
};
pub use gradcheck::{
    check_gradients, gradcheck, perturb_connections, GradcheckConfig, GradcheckReport, ParamError,
    DEFAULT_TOLERANCE, MAX_GRADCHECK_PARAMS,
};
pub use similarity::{cosine, layer_inputs, nearest_rank, similarity_probe, LayerSimilarity, SimilarityReport};
