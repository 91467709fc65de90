//! Toy-scale experiment harnesses: perplexity against input length,
//! question answering over cached documents, layer ablations, and timing.

mod dataset;
mod perplexity;
mod retrieval;
mod timing;

pub use dataset::{kv_dataset, read_jsonl, write_jsonl, EvalRecord, KvDatasetSpec, LoadedDataset, RawRecord};
pub use perplexity::{perplexity_eval, PerplexityMethod, PerplexityReport, PerplexityRow};
pub use retrieval::{
    answer_nll_by_k, contains_span, layer_ablation, layer_subsets, neg_log_prob, prepare, retrieval_bench, AblationRow,
    AppearanceBuckets, RecordOutcome, RetrievalMethod, RetrievalReport, Tally,
};
pub use timing::{
    cost_model, machine_description, timing_bench, CostEstimate, TimingCurve, TimingOptions, TimingReport,
};

#[cfg(test)]
mod tests;
