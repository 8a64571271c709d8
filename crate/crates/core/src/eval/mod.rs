//! Metrics over generated latents and the ablation runner.
mod ablation;
mod metrics;
pub use ablation::{
    eval_noise_seed, eval_pairs, evaluate_variant, run_ablation, sample_input, train_model, AblationSettings,
    AblationTable, Metric, MetricReport, ModelCache, SampleRecord, TrainedModel, Variant,
};
pub use metrics::{content_leakage, env_adherence, identity_similarity, leakage_score, sign_test, SignTest};
