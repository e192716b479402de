//! Caption overlap metrics and correlation analysis.

mod stats;
mod text;

pub use stats::{pearson, rolling_mean, weight_covariate_analysis, CovariateAnalysis, Pearson};
pub use text::{bleu, edit_distance, rouge, wer, Rouge, TokenizedPair};
