//! Seeded synthetic paired corpora.
//!
//! Each disease owns an orthogonal signature vector in region-feature space.
//! A sample's regions carry the signatures of its diseases plus Gaussian
//! noise, and its report affirms those diseases and, at `negation_rate`,
//! explicitly negates absent ones.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgraph::TripleStore;
use crate::numerics::Tensor;
use crate::textkb::Lexicon;

/// Disease name, anatomical site and a distinguishing manifestation, used
/// in order.
const DISEASES: &[(&str, &str, &str)] = &[
    ("effusion", "pleura", "fluid"),
    ("pneumothorax", "pleura", "air"),
    ("atelectasis", "lung", "collapse"),
    ("cardiomegaly", "heart", "enlargement"),
    ("consolidation", "lung", "opacity"),
    ("pneumonia", "lung", "infection"),
    ("edema", "lung", "congestion"),
    ("nodule", "lung", "mass"),
];

pub const PLACEHOLDER: &str = "{d}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub affirmed: Vec<String>,
    pub negated: Vec<String>,
}

impl Default for Templates {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|t| t.to_string()).collect();
        Self {
            affirmed: s(&[
                "there is {d} .",
                "{d} is present .",
                "{d} present .",
                "findings consistent with {d} .",
            ]),
            negated: s(&[
                "no {d} .",
                "no evidence of {d} .",
                "negative for {d} .",
                "there is no {d} .",
            ]),
        }
    }
}

impl Templates {
    pub fn fill(template: &str, disease: &str) -> String {
        template.replace(PLACEHOLDER, disease)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub num_diseases: usize,
    pub region_count: usize,
    pub feature_dim: usize,
    /// Target probability that two random samples share a disease.
    pub overlap_rate: f64,
    /// Probability that an absent disease is explicitly negated.
    pub negation_rate: f64,
    pub noise_sigma: f64,
    pub templates: Templates,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_diseases: 4,
            region_count: 8,
            feature_dim: 32,
            overlap_rate: 0.5,
            negation_rate: 0.3,
            noise_sigma: 0.5,
            templates: Templates::default(),
            seed: 42,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.num_diseases < 2 {
            return bad(format!(
                "num_diseases must be >= 2, got {}",
                self.num_diseases
            ));
        }
        if self.num_diseases > self.feature_dim {
            return bad(format!(
                "{} orthogonal signatures do not fit in feature_dim {}",
                self.num_diseases, self.feature_dim
            ));
        }
        if self.region_count == 0 {
            return bad("region_count must be >= 1".into());
        }
        for (name, r) in [
            ("overlap_rate", self.overlap_rate),
            ("negation_rate", self.negation_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        let t = &self.templates;
        if t.affirmed.is_empty() || t.negated.is_empty() {
            return bad("need at least one affirmed and one negated template".into());
        }
        if let Some(x) = t
            .affirmed
            .iter()
            .chain(&t.negated)
            .find(|x| !x.contains(PLACEHOLDER))
        {
            return bad(format!("template {x:?} has no {PLACEHOLDER} placeholder"));
        }
        Ok(())
    }

    pub fn disease_names(&self) -> Vec<String> {
        (0..self.num_diseases).map(disease_name).collect()
    }
}

fn disease_name(k: usize) -> String {
    DISEASES
        .get(k)
        .map_or_else(|| format!("pattern{k}"), |d| d.0.to_string())
}

fn disease_site(k: usize) -> &'static str {
    DISEASES.get(k).map_or("lung", |d| d.1)
}

fn disease_manifestation(k: usize) -> String {
    DISEASES
        .get(k)
        .map_or_else(|| format!("feature{k}"), |d| d.2.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    /// `[N_I × D_F]`
    pub regions: Tensor,
    pub report: String,
    /// One report sentence, used as the caption.
    pub sentence: String,
    /// Present diseases, ascending.
    pub labels: Vec<usize>,
    /// Diseases explicitly negated in the report, ascending.
    pub negated: Vec<usize>,
}

/// Everything `generate_corpus` emits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub lexicon: Lexicon,
    pub triples: TripleStore,
    pub world: WorldInfo,
    pub relatedness: Vec<RelatednessPair>,
}

/// Disease names and templates, kept next to the corpus for prompting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldInfo {
    pub diseases: Vec<String>,
    /// Concept id of each disease in the emitted lexicon and triples.
    pub concept_ids: Vec<usize>,
    pub templates: Templates,
    pub spec: WorldSpec,
}

impl WorldInfo {
    /// Zero-shot prompts: every affirmed template, per class.
    pub fn class_prompts(&self) -> Vec<Vec<String>> {
        self.diseases
            .iter()
            .map(|d| {
                self.templates
                    .affirmed
                    .iter()
                    .map(|t| Templates::fill(t, d))
                    .collect()
            })
            .collect()
    }

    /// The (concept id, negated) pairs a record's report was built from, sorted.
    pub fn planted_mentions(&self, record: &CorpusRecord) -> Vec<(usize, bool)> {
        let mut out: Vec<(usize, bool)> = record
            .labels
            .iter()
            .map(|&d| (self.concept_ids[d], false))
            .chain(record.negated.iter().map(|&d| (self.concept_ids[d], true)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("world info serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelatednessPair {
    pub text_a: String,
    pub text_b: String,
    pub gold: f64,
}

/// Label-set distribution: probability of each label count `1..=3` and,
/// when skewed, per-disease draw weights.
#[derive(Clone, Debug)]
struct LabelModel {
    count_probs: Vec<f64>,
    weights: Vec<f64>,
}

impl LabelModel {
    /// `s ∈ [0, 1]` blends "always one label" into uniform counts;
    /// `s > 1` additionally skews disease popularity by `exp(−(s−1)·k)`.
    fn new(k: usize, s: f64) -> Self {
        let max_m = k.min(3);
        let blend = s.min(1.0);
        let mut count_probs = vec![blend / max_m as f64; max_m];
        count_probs[0] += 1.0 - blend;
        let beta = (s - 1.0).max(0.0);
        let weights = (0..k).map(|i| (-beta * i as f64).exp()).collect();
        Self {
            count_probs,
            weights,
        }
    }

    /// Probability of each label set (as a bitmask) under sequential
    /// weighted draws without replacement.
    fn set_probabilities(&self) -> Vec<(u32, f64)> {
        fn walk(
            w: &[f64],
            mask: u32,
            left: usize,
            p: f64,
            acc: &mut std::collections::BTreeMap<u32, f64>,
        ) {
            if left == 0 {
                *acc.entry(mask).or_insert(0.0) += p;
                return;
            }
            let free: f64 = (0..w.len())
                .filter(|&i| mask & (1 << i) == 0)
                .map(|i| w[i])
                .sum();
            for i in 0..w.len() {
                if mask & (1 << i) == 0 {
                    walk(w, mask | (1 << i), left - 1, p * w[i] / free, acc);
                }
            }
        }
        let mut acc = std::collections::BTreeMap::new();
        for (m, &pm) in self.count_probs.iter().enumerate() {
            if pm > 0.0 {
                walk(&self.weights, 0, m + 1, pm, &mut acc);
            }
        }
        acc.into_iter().collect()
    }

    /// Exact probability that two independent draws share a label.
    fn overlap(&self) -> f64 {
        let sets = self.set_probabilities();
        let mut disjoint = 0.0;
        for &(a, pa) in &sets {
            for &(b, pb) in &sets {
                if a & b == 0 {
                    disjoint += pa * pb;
                }
            }
        }
        1.0 - disjoint
    }

    fn fit(k: usize, target: f64) -> Self {
        let (mut lo, mut hi) = (0.0, 60.0);
        if Self::new(k, lo).overlap() >= target {
            return Self::new(k, lo);
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if Self::new(k, mid).overlap() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::new(k, 0.5 * (lo + hi))
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<usize> {
        let u: f64 = rng.gen();
        let mut m = self.count_probs.len();
        let mut acc = 0.0;
        for (i, p) in self.count_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                m = i + 1;
                break;
            }
        }
        let mut chosen = Vec::with_capacity(m);
        let mut w = self.weights.clone();
        for _ in 0..m {
            let total: f64 = w.iter().sum();
            let mut x = rng.gen::<f64>() * total;
            let mut pick = w.iter().rposition(|&v| v > 0.0).expect("a disease is left");
            for (i, &v) in w.iter().enumerate() {
                if v > 0.0 && x < v {
                    pick = i;
                    break;
                }
                x -= v;
            }
            chosen.push(pick);
            w[pick] = 0.0;
        }
        chosen.sort_unstable();
        chosen
    }
}

/// Expected pairwise label overlap for a spec, computed exactly.
pub fn expected_overlap(spec: &WorldSpec) -> f64 {
    LabelModel::fit(spec.num_diseases, spec.overlap_rate).overlap()
}

fn orthogonal_signatures(k: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let scale = (d as f64).sqrt();
    out.into_iter()
        .map(|u| u.into_iter().map(|x| x * scale).collect())
        .collect()
}

/// The disease signatures `generate_corpus` plants for this spec.
pub fn signatures(spec: &WorldSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    orthogonal_signatures(spec.num_diseases, spec.feature_dim, &mut rng)
}

/// Lexicon and triples for the generated diseases. Lexicon ids are concept
/// ids in the store, which a reload of the emitted triples reproduces.
pub fn world_knowledge(spec: &WorldSpec) -> (Lexicon, TripleStore) {
    let k = spec.num_diseases;
    let mut store = TripleStore::new();
    for d in 0..k {
        store.add(&disease_name(d), "located_in", disease_site(d));
        store.add(&disease_name(d), "manifests_as", &disease_manifestation(d));
    }
    for a in 0..k {
        for b in 0..k {
            if a != b && disease_site(a) == disease_site(b) {
                store.add(&disease_name(a), "related_to", &disease_name(b));
            }
        }
    }
    let mut lex = Lexicon::new();
    for d in 0..k {
        let id = store
            .concept_id(&disease_name(d))
            .expect("every disease has a triple");
        lex.insert(&disease_name(d), id)
            .expect("disease names are non-empty");
    }
    (lex, store)
}

fn relatedness_pairs(spec: &WorldSpec) -> Vec<RelatednessPair> {
    let names = spec.disease_names();
    let t = &spec.templates;
    let aff = |i: usize, d: &str| Templates::fill(&t.affirmed[i % t.affirmed.len()], d);
    let neg = |d: &str| Templates::fill(&t.negated[0], d);
    let mut out = Vec::new();
    for d in &names {
        out.push(RelatednessPair {
            text_a: aff(0, d),
            text_b: aff(1, d),
            gold: 1.0,
        });
        out.push(RelatednessPair {
            text_a: aff(0, d),
            text_b: neg(d),
            gold: 0.0,
        });
    }
    for a in 0..names.len() {
        for b in a + 1..names.len() {
            let gold = if disease_site(a) == disease_site(b) {
                0.5
            } else {
                0.25
            };
            out.push(RelatednessPair {
                text_a: aff(0, &names[a]),
                text_b: aff(0, &names[b]),
                gold,
            });
        }
    }
    out
}

pub fn generate_corpus(spec: &WorldSpec, n_samples: usize) -> Result<Corpus> {
    spec.validate()?;
    if n_samples < 1 {
        return Err(Error::Parameter("n_samples must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_diseases;
    let signatures = orthogonal_signatures(k, spec.feature_dim, &mut rng);
    let labels_model = LabelModel::fit(k, spec.overlap_rate);
    let names = spec.disease_names();

    let mut records = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let labels = labels_model.sample(&mut rng);
        let (n_i, d_f) = (spec.region_count, spec.feature_dim);
        let mut regions: Vec<f64> = (0..n_i * d_f)
            .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for &d in &labels {
            let mut rows: Vec<usize> = (0..n_i).filter(|_| rng.gen_bool(0.5)).collect();
            if rows.is_empty() {
                rows.push(rng.gen_range(0..n_i));
            }
            for r in rows {
                for (x, s) in regions[r * d_f..(r + 1) * d_f]
                    .iter_mut()
                    .zip(&signatures[d])
                {
                    *x += s;
                }
            }
        }

        let mut sentences = Vec::new();
        for &d in &labels {
            let t = spec.templates.affirmed.choose(&mut rng).expect("validated");
            sentences.push(Templates::fill(t, &names[d]));
        }
        let mut negated = Vec::new();
        for d in (0..k).filter(|d| !labels.contains(d)) {
            if rng.gen_bool(spec.negation_rate) {
                let t = spec.templates.negated.choose(&mut rng).expect("validated");
                sentences.push(Templates::fill(t, &names[d]));
                negated.push(d);
            }
        }
        sentences.shuffle(&mut rng);
        let sentence = sentences
            .choose(&mut rng)
            .expect("at least one label")
            .clone();
        records.push(CorpusRecord {
            regions: Tensor::matrix(n_i, d_f, regions)?,
            report: sentences.join(" "),
            sentence,
            labels,
            negated,
        });
    }

    let (lexicon, triples) = world_knowledge(spec);
    let concept_ids = names
        .iter()
        .map(|n| lexicon.get(n).expect("disease in lexicon"))
        .collect();
    Ok(Corpus {
        records,
        lexicon,
        triples,
        world: WorldInfo {
            concept_ids,
            diseases: names,
            templates: spec.templates.clone(),
            spec: spec.clone(),
        },
        relatedness: relatedness_pairs(spec),
    })
}

/// Fraction of unordered record pairs whose label sets intersect.
pub fn pairwise_overlap(records: &[CorpusRecord]) -> f64 {
    let n = records.len();
    if n < 2 {
        return 0.0;
    }
    let mut shared = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if records[i]
                .labels
                .iter()
                .any(|l| records[j].labels.contains(l))
            {
                shared += 1;
            }
        }
    }
    shared as f64 / (n * (n - 1) / 2) as f64
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    rows: usize,
    cols: usize,
    /// Little-endian f64, base64.
    regions: String,
    report: String,
    sentence: String,
    labels: Vec<usize>,
    negated: Vec<usize>,
}

pub fn write_corpus(records: &[CorpusRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let bytes: Vec<u8> = r
            .regions
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let line = RecordLine {
            rows: r.regions.rows(),
            cols: r.regions.cols(),
            regions: B64.encode(bytes),
            report: r.report.clone(),
            sentence: r.sentence.clone(),
            labels: r.labels.clone(),
            negated: r.negated.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let bytes = B64
            .decode(&rec.regions)
            .map_err(|e| parse_err(e.to_string()))?;
        if bytes.len() != rec.rows * rec.cols * 8 {
            return Err(parse_err(format!(
                "region blob holds {} bytes, expected {}",
                bytes.len(),
                rec.rows * rec.cols * 8
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(CorpusRecord {
            regions: Tensor::matrix(rec.rows, rec.cols, values)?,
            report: rec.report,
            sentence: rec.sentence,
            labels: rec.labels,
            negated: rec.negated,
        });
    }
    Ok(out)
}

pub fn write_relatedness(pairs: &[RelatednessPair], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        let _ = writeln!(out, "{}\t{}\t{}", p.text_a, p.text_b, p.gold);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `text_a <TAB> text_b <TAB> gold` lines.
pub fn read_relatedness(path: &Path) -> Result<Vec<RelatednessPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", f.len())));
        }
        let gold = f[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad score {:?}", f[2])))?;
        out.push(RelatednessPair {
            text_a: f[0].to_string(),
            text_b: f[1].to_string(),
            gold,
        });
    }
    Ok(out)
}

/// File names used by [`Corpus::save`].
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const WORLD_FILE: &str = "world.json";
pub const RELATEDNESS_FILE: &str = "relatedness.tsv";

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(&self.records, &dir.join(CORPUS_FILE))?;
        self.lexicon.save(&dir.join(LEXICON_FILE))?;
        self.triples.save(&dir.join(TRIPLES_FILE))?;
        self.world.save(&dir.join(WORLD_FILE))?;
        write_relatedness(&self.relatedness, &dir.join(RELATEDNESS_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textkb::{default_triggers, extract_concepts, tokenize, View};
    use proptest::prelude::*;

    fn spec(k: usize, overlap: f64, negation: f64, sigma: f64, seed: u64) -> WorldSpec {
        WorldSpec {
            num_diseases: k,
            overlap_rate: overlap,
            negation_rate: negation,
            noise_sigma: sigma,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_corpus(&WorldSpec::default(), 0).is_err());
        assert!(generate_corpus(&spec(1, 0.5, 0.5, 0.5, 1), 5).is_err());
        assert!(generate_corpus(&spec(4, 1.5, 0.5, 0.5, 1), 5).is_err());
        assert!(generate_corpus(&spec(4, 0.5, 0.5, -1.0, 1), 5).is_err());
    }

    #[test]
    fn noiseless_two_disease_clusters_separate() {
        // overlap 0 forces single labels for K = 2
        let c = generate_corpus(&spec(2, 0.0, 0.0, 0.0, 3), 60).unwrap();
        let sigs = signatures(&spec(2, 0.0, 0.0, 0.0, 3));
        for r in &c.records {
            assert_eq!(r.labels.len(), 1);
            let score = |d: usize| -> f64 {
                r.regions
                    .row_iter()
                    .map(|row| row.iter().zip(&sigs[d]).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            };
            let d = r.labels[0];
            assert!(score(d) > 0.0);
            assert!(score(1 - d).abs() < 1e-9);
        }
    }

    #[test]
    fn no_negation_rate_means_no_triggers() {
        let c = generate_corpus(&spec(4, 0.5, 0.0, 0.5, 4), 100).unwrap();
        let triggers = default_triggers();
        for r in &c.records {
            let toks = tokenize(&r.report);
            for trig in &triggers {
                assert!(
                    !toks.windows(trig.len()).any(|w| w == trig.as_slice()),
                    "{}",
                    r.report
                );
            }
        }
    }

    #[test]
    fn overlap_rate_is_hit() {
        let c = generate_corpus(&spec(4, 0.8, 0.3, 0.5, 5), 200).unwrap();
        let measured = pairwise_overlap(&c.records);
        assert!((measured - 0.8).abs() <= 0.1, "{measured}");
        for target in [0.3, 0.5, 0.7, 0.9] {
            assert!((expected_overlap(&spec(4, target, 0.0, 0.0, 0)) - target).abs() < 1e-9);
        }
        // below the single-label floor the rate clamps to 1/K
        assert!((expected_overlap(&spec(4, 0.0, 0.0, 0.0, 0)) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn label_model_probabilities_sum_to_one() {
        for s in [0.0, 0.3, 1.0, 2.5] {
            let total: f64 = LabelModel::new(5, s)
                .set_probabilities()
                .iter()
                .map(|p| p.1)
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extraction_recovers_planted_pairs() {
        let c = generate_corpus(&spec(4, 0.6, 0.5, 0.5, 6), 200).unwrap();
        for r in &c.records {
            let found = extract_concepts(&r.report, &c.lexicon, View::Report).unwrap();
            let mut got = found.keys();
            got.sort_unstable();
            assert_eq!(got, c.world.planted_mentions(r), "{}", r.report);
        }
    }

    #[test]
    fn sentence_comes_from_report() {
        let c = generate_corpus(&spec(4, 0.6, 0.5, 0.5, 7), 50).unwrap();
        for r in &c.records {
            assert!(r.report.contains(&r.sentence));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(4, 0.6, 0.5, 0.5, 8);
        generate_corpus(&s, 30)
            .unwrap()
            .save(&dir.path().join("a"))
            .unwrap();
        generate_corpus(&s, 30)
            .unwrap()
            .save(&dir.path().join("b"))
            .unwrap();
        for f in [
            CORPUS_FILE,
            LEXICON_FILE,
            TRIPLES_FILE,
            WORLD_FILE,
            RELATEDNESS_FILE,
        ] {
            let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let other = generate_corpus(&spec(4, 0.6, 0.5, 0.5, 9), 30).unwrap();
        assert_ne!(other.records, generate_corpus(&s, 30).unwrap().records);
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&spec(4, 0.6, 0.5, 0.5, 10), 20).unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(
            read_corpus(&dir.path().join(CORPUS_FILE)).unwrap(),
            c.records
        );
        assert_eq!(
            read_relatedness(&dir.path().join(RELATEDNESS_FILE)).unwrap(),
            c.relatedness
        );
        assert_eq!(
            WorldInfo::load(&dir.path().join(WORLD_FILE)).unwrap(),
            c.world
        );
        assert_eq!(
            Lexicon::load(&dir.path().join(LEXICON_FILE)).unwrap(),
            c.lexicon
        );
        let store = crate::kgraph::load_triples(&dir.path().join(TRIPLES_FILE)).unwrap();
        assert_eq!(store.concepts(), c.triples.concepts());
        assert_eq!(store.triples(), c.triples.triples());

        std::fs::write(dir.path().join("bad.jsonl"), "{\"rows\":1}\n").unwrap();
        match read_corpus(&dir.path().join("bad.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn knowledge_ids_match_lexicon() {
        let (lex, store) = world_knowledge(&spec(6, 0.5, 0.5, 0.5, 0));
        for (i, name) in spec(6, 0.5, 0.5, 0.5, 0).disease_names().iter().enumerate() {
            assert_eq!(lex.get(name), store.concept_id(name), "{i}");
        }
        lex.validate(store.num_concepts()).unwrap();
    }

    #[test]
    fn relatedness_has_negation_pairs() {
        let pairs = relatedness_pairs(&WorldSpec::default());
        assert!(pairs
            .iter()
            .any(|p| p.gold == 0.0 && p.text_b.starts_with("no ")));
        assert!(pairs.len() >= 10);
    }

    proptest! {
        #[test]
        fn labels_and_affirmed_mentions_agree(seed in 0u64..200, k in 2usize..7, neg in 0.0f64..1.0) {
            let c = generate_corpus(&spec(k, 0.5, neg, 0.3, seed), 8).unwrap();
            for r in &c.records {
                prop_assert!(!r.labels.is_empty() && r.labels.len() <= 3);
                prop_assert!(r.labels.iter().all(|&l| l < k));
                prop_assert!(r.negated.iter().all(|d| !r.labels.contains(d)));
                let found = extract_concepts(&r.report, &c.lexicon, View::Report).unwrap();
                let mut affirmed: Vec<usize> = found.keys().into_iter().filter(|k| !k.1).map(|k| k.0).collect();
                affirmed.sort_unstable();
                let mut want: Vec<usize> = r.labels.iter().map(|&d| c.world.concept_ids[d]).collect();
                want.sort_unstable();
                prop_assert_eq!(affirmed, want);
            }
        }
    }
}
