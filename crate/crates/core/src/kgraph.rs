//! Knowledge graph storage and the domain knowledge encoder.
//!
//! The encoder is a single composition-based message-passing layer:
//! every concept keeps a self term and receives the mean of
//! `W_msg · (e_u − ρ_r)` over its incoming triples `(u, r, v)`. It is trained
//! by tail prediction with multiplicative scoring against uniformly sampled
//! corrupted tails.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Graph, Tensor, Var};
use crate::optim::{Adam, BoundParams, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripleStore {
    concepts: Vec<String>,
    relations: Vec<String>,
    triples: Vec<Triple>,
    concept_ids: HashMap<String, usize>,
    relation_ids: HashMap<String, usize>,
    seen: HashSet<Triple>,
}

impl TripleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Interns a concept name, returning its id.
    pub fn intern_concept(&mut self, name: &str) -> usize {
        if let Some(&id) = self.concept_ids.get(name) {
            return id;
        }
        self.concepts.push(name.to_string());
        self.concept_ids
            .insert(name.to_string(), self.concepts.len() - 1);
        self.concepts.len() - 1
    }

    pub fn intern_relation(&mut self, name: &str) -> usize {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        self.relations.push(name.to_string());
        self.relation_ids
            .insert(name.to_string(), self.relations.len() - 1);
        self.relations.len() - 1
    }

    /// Adds a triple by name; returns false when it was already present.
    pub fn add(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.intern_concept(head);
        let r = self.intern_relation(relation);
        let t = self.intern_concept(tail);
        let triple = Triple {
            head: h,
            relation: r,
            tail: t,
        };
        if self.seen.insert(triple) {
            self.triples.push(triple);
            true
        } else {
            false
        }
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn concept_id(&self, name: &str) -> Option<usize> {
        self.concept_ids.get(name).copied()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                self.concepts[t.head], self.relations[t.relation], self.concepts[t.tail]
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads `head <TAB> relation <TAB> tail` lines; names are interned in
/// first-seen order and duplicate triples are dropped.
pub fn load_triples(path: &Path) -> Result<TripleStore> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text, path)
}

pub fn parse_triples(text: &str, origin: &Path) -> Result<TripleStore> {
    let mut store = TripleStore::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: format!("expected head<TAB>relation<TAB>tail, got {line:?}"),
            });
        }
        store.add(fields[0], fields[1], fields[2]);
    }
    Ok(store)
}

/// Concept embeddings `E` and relation embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub concepts: Vec<String>,
    pub relations: Vec<String>,
    pub concept_embeddings: Tensor,
    pub relation_embeddings: Tensor,
}

const TABLE_MAGIC: &[u8; 8] = b"KOBOKGE1";

#[derive(Serialize, Deserialize)]
struct TableNames {
    concepts: Vec<String>,
    relations: Vec<String>,
}

impl EmbeddingTable {
    pub fn num_concepts(&self) -> usize {
        self.concept_embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.concept_embeddings.cols()
    }

    pub fn row(&self, concept: usize) -> &[f64] {
        self.concept_embeddings.row(concept)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the binary table and its JSON sidecar of names.
    ///
    /// Layout: magic, then `N_E`, `D_S`, `N_R` as little-endian u64, then
    /// concept and relation embeddings as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(
            32 + 8 * (self.concept_embeddings.len() + self.relation_embeddings.len()),
        );
        bytes.extend_from_slice(TABLE_MAGIC);
        for n in [
            self.num_concepts(),
            self.dim(),
            self.relation_embeddings.rows(),
        ] {
            bytes.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for v in self
            .concept_embeddings
            .data()
            .iter()
            .chain(self.relation_embeddings.data())
        {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;

        let names = TableNames {
            concepts: self.concepts.clone(),
            relations: self.relations.clone(),
        };
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&names).expect("names serialize");
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn is_table_file(path: &Path) -> bool {
        std::fs::read(path)
            .map(|b| b.starts_with(TABLE_MAGIC))
            .unwrap_or(false)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 32 || &bytes[..8] != TABLE_MAGIC {
            return Err(Error::format(path, "not an embedding table"));
        }
        let word = |i: usize| {
            u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize
        };
        let (n_e, dim, n_r) = (word(0), word(1), word(2));
        let expected = 32 + 8 * dim * (n_e + n_r);
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let values: Vec<f64> = bytes[32..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (e, r) = values.split_at(n_e * dim);

        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let names: TableNames =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if names.concepts.len() != n_e || names.relations.len() != n_r {
            return Err(Error::format(
                &side,
                "name counts disagree with table header",
            ));
        }
        Ok(Self {
            concepts: names.concepts,
            relations: names.relations,
            concept_embeddings: Tensor::matrix(n_e, dim, e.to_vec())?,
            relation_embeddings: Tensor::matrix(n_r, dim, r.to_vec())?,
        })
    }
}

/// Trainable state of the graph encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct KgEncoder {
    pub params: ParamSet,
}

impl KgEncoder {
    pub const BASE: &'static str = "kg.base";
    pub const W_SELF: &'static str = "kg.w_self";
    pub const W_MSG: &'static str = "kg.w_msg";
    pub const RHO: &'static str = "kg.rho";

    pub fn init(store: &TripleStore, dim: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        params.insert(
            Self::BASE,
            Tensor::xavier_uniform(store.num_concepts(), dim, rng),
        );
        params.insert(Self::W_SELF, Tensor::xavier_uniform(dim, dim, rng));
        params.insert(Self::W_MSG, Tensor::xavier_uniform(dim, dim, rng));
        params.insert(
            Self::RHO,
            Tensor::xavier_uniform(store.num_relations().max(1), dim, rng),
        );
        Self { params }
    }

    /// Encoder with explicit weights, mainly for tests.
    pub fn from_parts(base: Tensor, w_self: Tensor, w_msg: Tensor, rho: Tensor) -> Self {
        let mut params = ParamSet::new();
        params.insert(Self::BASE, base);
        params.insert(Self::W_SELF, w_self);
        params.insert(Self::W_MSG, w_msg);
        params.insert(Self::RHO, rho);
        Self { params }
    }
}

/// Message passing on the tape; returns unit-norm concept rows.
fn encode_on_graph(g: &mut Graph, store: &TripleStore, p: &BoundParams) -> Result<Var> {
    let base = p.var(KgEncoder::BASE);
    let self_term = g.matmul(base, p.var(KgEncoder::W_SELF))?;
    let triples = store.triples();
    if triples.is_empty() {
        return Ok(g.l2_normalize(self_term));
    }
    let n_e = store.num_concepts();
    let mut indegree = vec![0usize; n_e];
    for t in triples {
        indegree[t.tail] += 1;
    }
    let mut agg = vec![0.0; n_e * triples.len()];
    for (k, t) in triples.iter().enumerate() {
        agg[t.tail * triples.len() + k] = 1.0 / indegree[t.tail] as f64;
    }
    let agg = g.constant(Tensor::matrix(n_e, triples.len(), agg)?);

    let heads = g.gather(base, triples.iter().map(|t| t.head).collect())?;
    let rels = g.gather(
        p.var(KgEncoder::RHO),
        triples.iter().map(|t| t.relation).collect(),
    )?;
    let composed = g.sub(heads, rels)?;
    let messages = g.matmul(composed, p.var(KgEncoder::W_MSG))?;
    let mean_msg = g.matmul(agg, messages)?;
    let total = g.add(self_term, mean_msg)?;
    Ok(g.l2_normalize(total))
}

/// One message-passing layer over `store` with the encoder's weights.
pub fn encode_graph(store: &TripleStore, encoder: &KgEncoder) -> Result<EmbeddingTable> {
    let mut g = Graph::new();
    let bound = encoder.params.bind(&mut g);
    let out = encode_on_graph(&mut g, store, &bound)?;
    Ok(EmbeddingTable {
        concepts: store.concepts().to_vec(),
        relations: store.relations().to_vec(),
        concept_embeddings: g.value(out).clone(),
        relation_embeddings: encoder.params.get(KgEncoder::RHO)?.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgTrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for KgTrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            epochs: 1000,
            lr: 0.01,
            negatives: 4,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KgTraining {
    pub table: EmbeddingTable,
    pub encoder: KgEncoder,
    pub epoch_losses: Vec<f64>,
}

/// Full-batch tail-prediction loss for one epoch's negative sample.
///
/// `score(h, r, c) = Σ_d e'_h[d] · ρ_r[d] · e'_c[d]`; the candidate multiset
/// per triple is the true tail plus the sampled corruptions.
fn link_loss(
    g: &mut Graph,
    store: &TripleStore,
    p: &BoundParams,
    negatives: &[Vec<usize>],
) -> Result<Var> {
    let encoded = encode_on_graph(g, store, p)?;
    let triples = store.triples();
    let heads = g.gather(encoded, triples.iter().map(|t| t.head).collect())?;
    let rels = g.gather(
        p.var(KgEncoder::RHO),
        triples.iter().map(|t| t.relation).collect(),
    )?;
    let query = g.mul(heads, rels)?;
    let scores = g.matmul_t(query, encoded)?;

    let n_e = store.num_concepts();
    let mut counts = vec![0.0; triples.len() * n_e];
    for (k, t) in triples.iter().enumerate() {
        counts[k * n_e + t.tail] += 1.0;
        for &c in &negatives[k] {
            counts[k * n_e + c] += 1.0;
        }
    }
    let lse = g.weighted_logsumexp_rows(scores, Tensor::matrix(triples.len(), n_e, counts)?)?;
    let pos = g.pick(scores, triples.iter().map(|t| t.tail).collect())?;
    let diff = g.sub(lse, pos)?;
    Ok(g.mean(diff))
}

pub fn train_kg_embeddings(store: &TripleStore, cfg: &KgTrainConfig) -> Result<KgTraining> {
    if store.num_concepts() == 0 {
        return Err(Error::Contract(
            "cannot train embeddings for an empty store".into(),
        ));
    }
    if cfg.dim < 2 {
        return Err(Error::Parameter(format!(
            "embedding dim must be >= 2, got {}",
            cfg.dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = KgEncoder::init(store, cfg.dim, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    if store.num_triples() > 0 {
        for _ in 0..cfg.epochs {
            let negatives: Vec<Vec<usize>> = (0..store.num_triples())
                .map(|_| {
                    (0..cfg.negatives)
                        .map(|_| rng.gen_range(0..store.num_concepts()))
                        .collect()
                })
                .collect();
            let mut g = Graph::new();
            let bound = encoder.params.bind(&mut g);
            let loss = link_loss(&mut g, store, &bound, &negatives)?;
            g.backward(loss)?;
            epoch_losses.push(g.value(loss).item()?);
            opt.step(&mut encoder.params, &bound.grads(&g))?;
        }
    }

    let table = encode_graph(store, &encoder)?;
    if !table.concept_embeddings.is_finite() {
        return Err(Error::NonFinite {
            step: epoch_losses.len(),
            detail: "knowledge graph embeddings".into(),
        });
    }
    Ok(KgTraining {
        table,
        encoder,
        epoch_losses,
    })
}

/// Mean pairwise cosine between two concept groups (pairs with itself skipped).
pub fn mean_group_cosine(table: &EmbeddingTable, a: &[usize], b: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &i in a {
        for &j in b {
            if i == j {
                continue;
            }
            let (x, y) = (table.row(i), table.row(j));
            sum += numerics::dot(x, y)
                / (numerics::norm(x) * numerics::norm(y)).max(numerics::NORM_EPS);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Two disjoint 3-cliques over one relation, every ordered pair linked.
pub fn two_clique_store() -> TripleStore {
    let mut store = TripleStore::new();
    for clique in [["a0", "a1", "a2"], ["b0", "b1", "b2"]] {
        for h in clique {
            for t in clique {
                if h != t {
                    store.add(h, "related_to", t);
                }
            }
        }
    }
    store
}
