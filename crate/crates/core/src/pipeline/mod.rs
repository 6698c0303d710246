//! Pre-training and evaluation.

mod config;
mod eval;
mod metrics;
mod train;

use std::path::Path;

pub use config::{parse_pairs, Ablation, Precision, RunConfig};
pub use eval::{
    evaluate_relatedness, evaluate_retrieval, evaluate_zeroshot, image_embeddings, negation_probe,
    retrieval_map, text_embeddings, zeroshot_from_scores, NegationProbe, Relatedness, ZeroShot,
};
pub use metrics::{auroc, average_precision, mean_average_precision, pearson};
pub use train::{
    batch_step, corpus_vocab, knowledge_context, metrics_csv, prepare, pretrain, write_metrics,
    MetricsRow, PreparedSample, TrainOutcome, METRICS_HEADER,
};

use crate::error::Result;
use crate::kgraph::{load_triples, train_kg_embeddings, EmbeddingTable};

/// Loads a saved embedding table, or trains one when `path` is a triples file.
pub fn load_or_train_embeddings(path: &Path, cfg: &RunConfig) -> Result<EmbeddingTable> {
    if EmbeddingTable::is_table_file(path) {
        EmbeddingTable::load(path)
    } else {
        let store = load_triples(path)?;
        Ok(train_kg_embeddings(&store, &cfg.kg)?.table)
    }
}
