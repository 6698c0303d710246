//! Read-only evaluation of a trained model on a corpus.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{dot, Tensor};
use crate::synth::{CorpusRecord, RelatednessPair};

use super::metrics::{auroc, mean_average_precision, pearson};

pub fn image_embeddings(model: &Model, records: &[CorpusRecord]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| model.embed_image(&r.regions).map(Tensor::into_data))
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

pub fn text_embeddings<S: AsRef<str>>(model: &Model, texts: &[S]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| model.embed_text(t.as_ref()).map(Tensor::into_data))
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

fn shares_label(a: &[usize], b: &[usize]) -> bool {
    a.iter().any(|x| b.contains(x))
}

/// mAP of ranking rows of `texts` for each row of `images` by dot product;
/// `j` is relevant to query `i` when their label sets intersect.
pub fn retrieval_map(images: &Tensor, texts: &Tensor, labels: &[Vec<usize>]) -> Result<f64> {
    let n = images.rows();
    if n < 2 {
        return Err(Error::Contract(
            "retrieval needs at least two samples".into(),
        ));
    }
    if texts.rows() != n || labels.len() != n {
        return Err(Error::Contract(format!(
            "{n} images, {} texts, {} label sets",
            texts.rows(),
            labels.len()
        )));
    }
    let scores: Vec<Vec<f64>> = images
        .row_iter()
        .map(|q| texts.row_iter().map(|t| dot(q, t)).collect())
        .collect();
    let relevant: Vec<Vec<bool>> = labels
        .iter()
        .map(|a| labels.iter().map(|b| shares_label(a, b)).collect())
        .collect();
    mean_average_precision(&scores, &relevant)
        .ok_or_else(|| Error::Contract("no query has a relevant item".into()))
}

/// Image-to-report retrieval mAP with label-intersection relevance.
pub fn evaluate_retrieval(model: &Model, records: &[CorpusRecord]) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::Contract(
            "retrieval needs at least two samples".into(),
        ));
    }
    let v = image_embeddings(model, records)?;
    let reports: Vec<&str> = records.iter().map(|r| r.report.as_str()).collect();
    let t = text_embeddings(model, &reports)?;
    let labels: Vec<Vec<usize>> = records.iter().map(|r| r.labels.clone()).collect();
    retrieval_map(&v, &t, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShot {
    /// `None` for a class that is always or never present.
    pub per_class: Vec<Option<f64>>,
}

impl ZeroShot {
    /// Mean over the classes with a defined AUROC.
    pub fn mean(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

/// Per-class AUROC of `scores[c][i]` against record labels.
pub fn zeroshot_from_scores(scores: &[Vec<f64>], records: &[CorpusRecord]) -> Result<ZeroShot> {
    let present: std::collections::BTreeSet<usize> = records
        .iter()
        .flat_map(|r| r.labels.iter().copied())
        .collect();
    if scores.len() < 2 || present.len() < 2 {
        return Err(Error::Contract(format!(
            "zero-shot needs at least two classes present, found {}",
            present.len()
        )));
    }
    let per_class = scores
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let positive: Vec<bool> = records.iter().map(|r| r.labels.contains(&c)).collect();
            auroc(s, &positive)
        })
        .collect();
    Ok(ZeroShot { per_class })
}

/// Scores each image against every class's prompts (mean cosine) and
/// reports per-class AUROC.
pub fn evaluate_zeroshot(
    model: &Model,
    records: &[CorpusRecord],
    prompts: &[Vec<String>],
) -> Result<ZeroShot> {
    let v = image_embeddings(model, records)?;
    let mut scores = Vec::with_capacity(prompts.len());
    for class_prompts in prompts {
        if class_prompts.is_empty() {
            return Err(Error::Contract("a class has no prompts".into()));
        }
        let t = text_embeddings(model, class_prompts)?;
        let s: Vec<f64> = v
            .row_iter()
            .map(|vi| t.row_iter().map(|tp| dot(vi, tp)).sum::<f64>() / t.rows() as f64)
            .collect();
        scores.push(s);
    }
    zeroshot_from_scores(&scores, records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Relatedness {
    pub predicted: Vec<f64>,
    pub gold: Vec<f64>,
    pub pearson: f64,
}

pub fn evaluate_relatedness(model: &Model, pairs: &[RelatednessPair]) -> Result<Relatedness> {
    if pairs.len() < 3 {
        return Err(Error::Contract(format!(
            "need at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let mut predicted = Vec::with_capacity(pairs.len());
    for p in pairs {
        let a = model.embed_text(&p.text_a)?;
        let b = model.embed_text(&p.text_b)?;
        predicted.push(dot(a.data(), b.data()));
    }
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    let r = pearson(&gold, &predicted)?;
    Ok(Relatedness {
        predicted,
        gold,
        pearson: r,
    })
}

/// Mean cosines behind the negation check: `t("no X")` vs `t("X")`, and
/// `t("X")` vs `t("X present")`, averaged over `diseases`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NegationProbe {
    pub negated: f64,
    pub paraphrase: f64,
}

impl NegationProbe {
    pub fn separates(&self) -> bool {
        self.negated < self.paraphrase
    }
}

pub fn negation_probe(model: &Model, diseases: &[String]) -> Result<NegationProbe> {
    if diseases.is_empty() {
        return Err(Error::Contract("no diseases to probe".into()));
    }
    let (mut neg, mut para) = (0.0, 0.0);
    for d in diseases {
        let bare = model.embed_text(d)?;
        let no = model.embed_text(&format!("no {d}"))?;
        let present = model.embed_text(&format!("{d} present"))?;
        neg += dot(no.data(), bare.data());
        para += dot(bare.data(), present.data());
    }
    let n = diseases.len() as f64;
    Ok(NegationProbe {
        negated: neg / n,
        paraphrase: para / n,
    })
}
