//! Attention-similarity probes and parameter/MAC accounting.

mod costs;
mod plot;
mod similarity;

pub use costs::{count_costs, counting_layout, instrumented_costs, CostReport};
pub use plot::svg_line_chart;
pub use similarity::{
    attn_similarity, top_fraction_mean, write_similarity_csv, AttnSimilarity, HeadScore, ProbeSet,
};
