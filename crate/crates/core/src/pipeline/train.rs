//! Mini-batch pre-training loop and its per-step metrics.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kgraph::EmbeddingTable;
use crate::knowledge::{batch_similarities, KnowledgeContext, SampleKnowledge, SimilarityPair};
use crate::losses::{
    loss_kag, loss_kse, loss_sbg, loss_skr, loss_total, loss_vsr, LossParts, LossReport,
};
use crate::model::{
    encode_image, encode_text, fuse_all, EncodedPair, FuseOptions, Model, ModelConfig, Vocab,
};
use crate::numerics::Tensor;
use crate::optim::{Adam, ReduceOnPlateau};
use crate::synth::CorpusRecord;
use crate::textkb::{extract_concepts, Lexicon, View};

use super::config::{Precision, RunConfig};

pub const METRICS_HEADER: &str = "step,epoch,l_se,l_kag,l_skr,l_vsr,l_sbg,l_sg,l_total,lr,ms";

/// Salts that split the run seed into independent streams.
const SHUFFLE_SALT: u64 = 0x5348_5546;
const KNOWLEDGE_SALT: u64 = 0x4b4e_4f57;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossReport,
    pub lr: f64,
    pub ms: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            l.l_se,
            l.l_kag,
            l.l_skr,
            l.l_vsr,
            l.l_sbg,
            l.l_sg,
            l.l_total,
            self.lr,
            self.ms
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// A corpus record turned into encoder inputs and sample knowledge.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub regions: Tensor,
    pub token_ids: Vec<usize>,
    pub knowledge: SampleKnowledge,
}

/// Vocabulary over every report (captions are report sentences).
pub fn corpus_vocab(records: &[CorpusRecord]) -> Vocab {
    Vocab::from_texts(
        records
            .iter()
            .flat_map(|r| [r.report.as_str(), r.sentence.as_str()]),
    )
}

pub fn knowledge_context(table: &EmbeddingTable, cfg: &RunConfig) -> Result<KnowledgeContext> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ KNOWLEDGE_SALT);
    KnowledgeContext::new(table.concept_embeddings.clone(), cfg.epsilon, &mut rng)
}

pub fn prepare(
    records: &[CorpusRecord],
    vocab: &Vocab,
    lexicon: &Lexicon,
    ctx: &KnowledgeContext,
) -> Result<Vec<PreparedSample>> {
    lexicon.validate(ctx.num_concepts())?;
    records
        .iter()
        .map(|r| {
            let report = extract_concepts(&r.report, lexicon, View::Report)?;
            let sentence = extract_concepts(&r.sentence, lexicon, View::Sentence)?;
            Ok(PreparedSample {
                regions: r.regions.clone(),
                token_ids: vocab.encode(&r.sentence),
                knowledge: SampleKnowledge::build(&report, &sentence, ctx)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub initial: Model,
    pub metrics: Vec<MetricsRow>,
    /// Mean `l_total` of each epoch.
    pub epoch_means: Vec<f64>,
}

/// One optimization step's forward pass; returns the loss report and
/// the gradients in parameter order.
pub fn batch_step(
    model: &Model,
    batch: &[&PreparedSample],
    e: &Tensor,
    cfg: &RunConfig,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut g = crate::numerics::Graph::new();
    let bound = model.params.bind(&mut g);
    let mut pairs = Vec::with_capacity(batch.len());
    for s in batch {
        let image = encode_image(&mut g, &bound, &s.regions)?;
        let text = encode_text(&mut g, &bound, &s.token_ids, model.config.vocab_size)?;
        pairs.push(EncodedPair { image, text });
    }
    let knowledge: Vec<SampleKnowledge> = batch.iter().map(|s| s.knowledge.clone()).collect();
    let sim = if cfg.ablation.disable_kse {
        SimilarityPair::zeros(batch.len())
    } else {
        batch_similarities(&knowledge)?
    };

    let vs: Vec<_> = pairs.iter().map(|p| p.image.v).collect();
    let ts: Vec<_> = pairs.iter().map(|p| p.text.t).collect();
    let v = g.concat_rows(&vs)?;
    let t = g.concat_rows(&ts)?;
    let mut parts = LossParts {
        se: Some(loss_kse(&mut g, v, t, &sim, cfg.loss.tau_g)?),
        ..Default::default()
    };

    let ab = &cfg.ablation;
    let on = |p: usize| ab.part_enabled(p);
    if (0..4).any(on) {
        let opts = FuseOptions {
            global: on(0) || on(3),
            cross_local: on(1),
            in_sample_local: on(2),
        };
        let e_var = g.constant(e.clone());
        let fusion = fuse_all(&mut g, &pairs, &knowledge, e_var, cfg.loss.tau_l, &opts)?;
        if on(0) {
            parts.kag = Some(loss_kag(&mut g, fusion.h_ik, fusion.h_tk, cfg.loss.tau_g)?);
        }
        if on(1) {
            parts.skr = loss_skr(&mut g, &fusion.h_si, &fusion.h_st, cfg.loss.tau_l)?;
        }
        if on(2) {
            let rs: Vec<_> = fusion.active.iter().map(|&i| pairs[i].image.r).collect();
            parts.vsr = loss_vsr(&mut g, &fusion.h_is, &rs, cfg.loss.tau_l)?;
        }
        if on(3) {
            parts.sbg = Some(loss_sbg(&mut g, fusion.h_ik, t, cfg.loss.tau_g)?);
        }
    }

    let (total, report) = loss_total(&mut g, &parts, &cfg.loss)?;
    if !report.is_finite() {
        return Ok((report, Vec::new()));
    }
    g.backward(total)?;
    Ok((report, bound.grads(&g)))
}

/// Batches of one epoch. A trailing batch of a single sample is folded
/// into the previous batch, since a lone pair has no negatives.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Trains a fresh model on `records`.
///
/// `table` holds the frozen concept embeddings; its width must equal the
/// model's embedding width.
pub fn pretrain(
    cfg: &RunConfig,
    records: &[CorpusRecord],
    lexicon: &Lexicon,
    table: &EmbeddingTable,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Contract("corpus has no records".into()));
    }
    if table.dim() != cfg.embed_dim {
        return Err(Error::Contract(format!(
            "concept embeddings have width {}, model.embed_dim is {}",
            table.dim(),
            cfg.embed_dim
        )));
    }
    let feature_dim = records[0].regions.cols();
    if let Some(bad) = records.iter().position(|r| r.regions.cols() != feature_dim) {
        return Err(Error::Contract(format!(
            "record {bad} has {} region features, expected {feature_dim}",
            records[bad].regions.cols()
        )));
    }

    let vocab = corpus_vocab(records);
    let ctx = knowledge_context(table, cfg)?;
    let samples = prepare(records, &vocab, lexicon, &ctx)?;
    let mcfg = ModelConfig {
        feature_dim,
        hidden_dim: cfg.hidden_dim,
        embed_dim: cfg.embed_dim,
        vocab_size: vocab.len(),
    };
    let mut model = Model::init(mcfg, vocab, cfg.seed)?;
    let initial = model.clone();

    let mut adam = Adam::new(cfg.lr);
    let mut plateau = ReduceOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut metrics = Vec::new();
    let mut epoch_means = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for idx in batches(&order, cfg.batch_size) {
            let clock = Instant::now();
            let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
            let step = metrics.len();
            let (report, grads) = batch_step(&model, &batch, &ctx.e, cfg)?;
            if !report.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("loss became non-finite in epoch {epoch}: {report:?}"),
                });
            }
            adam.step(&mut model.params, &grads)?;
            if cfg.precision == Precision::Single {
                model.params.round_to_single();
            }
            sum += report.l_total;
            count += 1;
            let ms = if cfg.wall_clock {
                clock.elapsed().as_millis() as u64
            } else {
                0
            };
            metrics.push(MetricsRow {
                step,
                epoch,
                losses: report,
                lr: adam.lr,
                ms,
            });
        }
        let mean = sum / count as f64;
        epoch_means.push(mean);
        adam.lr = plateau.observe(mean, adam.lr);
    }

    Ok(TrainOutcome {
        model,
        initial,
        metrics,
        epoch_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgraph::{train_kg_embeddings, KgTrainConfig};
    use crate::synth::{generate_corpus, WorldSpec};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.embed_dim = 16;
        cfg.hidden_dim = 16;
        cfg.batch_size = 8;
        cfg.epochs = 2;
        cfg.wall_clock = false;
        cfg
    }

    fn setup(cfg: &RunConfig, n: usize) -> (Vec<CorpusRecord>, Lexicon, EmbeddingTable) {
        let spec = WorldSpec {
            feature_dim: 12,
            region_count: 4,
            seed: cfg.seed,
            ..Default::default()
        };
        let corpus = generate_corpus(&spec, n).unwrap();
        let kg = train_kg_embeddings(
            &corpus.triples,
            &KgTrainConfig {
                dim: cfg.embed_dim,
                epochs: 20,
                ..Default::default()
            },
        )
        .unwrap();
        (corpus.records, corpus.lexicon, kg.table)
    }

    #[test]
    fn batching_folds_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order, 3).len(), 3);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut cfg = small_cfg();
        cfg.epochs = 0;
        let (records, lex, table) = setup(&cfg, 12);
        let out = pretrain(&cfg, &records, &lex, &table).unwrap();
        assert_eq!(out.model, out.initial);
        assert!(out.metrics.is_empty());
        assert_eq!(metrics_csv(&out.metrics), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small_cfg();
        let (records, lex, table) = setup(&cfg, 20);
        let a = pretrain(&cfg, &records, &lex, &table).unwrap();
        let b = pretrain(&cfg, &records, &lex, &table).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.metrics.len(), 2 * 3);
        assert!(a.metrics.windows(2).all(|w| w[1].step == w[0].step + 1));
    }

    #[test]
    fn ksg_switch_zeroes_guidance() {
        let mut cfg = small_cfg();
        cfg.ablation.disable_ksg = true;
        let (records, lex, table) = setup(&cfg, 16);
        let out = pretrain(&cfg, &records, &lex, &table).unwrap();
        for r in &out.metrics {
            assert_eq!(r.losses.l_sg, 0.0);
            assert_eq!(r.losses.l_total, r.losses.l_se);
        }
    }

    #[test]
    fn guidance_report_matches_weights() {
        let cfg = small_cfg();
        let (records, lex, table) = setup(&cfg, 16);
        let out = pretrain(&cfg, &records, &lex, &table).unwrap();
        for r in &out.metrics {
            let l = &r.losses;
            let sg = 0.25 * l.l_kag + 0.25 * l.l_skr + 0.25 * l.l_vsr + 0.25 * l.l_sbg;
            assert_eq!(l.l_sg, sg);
            assert!(l.l_kag > 0.0 && l.l_sbg > 0.0 && l.l_vsr > 0.0);
        }
    }

    #[test]
    fn mismatched_table_width_is_rejected() {
        let cfg = small_cfg();
        let (records, lex, table) = setup(&cfg, 8);
        let mut wide = cfg.clone();
        wide.embed_dim = 32;
        assert!(matches!(
            pretrain(&wide, &records, &lex, &table),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_precision_rounds_parameters() {
        let mut cfg = small_cfg();
        cfg.precision = Precision::Single;
        cfg.epochs = 1;
        let (records, lex, table) = setup(&cfg, 8);
        let out = pretrain(&cfg, &records, &lex, &table).unwrap();
        for (_, t) in out.model.params.iter() {
            assert!(t.data().iter().all(|&x| (x as f32) as f64 == x));
        }
    }
}
