//! Per-sample knowledge embeddings and the knowledge similarity matrices.
//!
//! An affirmed mention contributes its concept row of `E`. A negated one
//! contributes `ε·nf + (1 − ε)·ẽ_c`, a mix of a fixed random "no finding"
//! anchor and the concept's row in a random variant table. All rows are
//! unit-normalized so similarities are cosines.
//!
//! Similarities are max-match averages clamped to `[0, 1]` with a zero
//! diagonal. They are plain constants: no gradient flows through them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize, Tensor};
use crate::textkb::ConceptSet;

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeContext {
    pub e: Tensor,
    pub e_tilde: Tensor,
    pub no_finding: Tensor,
    pub epsilon: f64,
}

impl KnowledgeContext {
    /// Draws the variant table and the no-finding anchor (Xavier-uniform).
    pub fn new(e: Tensor, epsilon: f64, rng: &mut impl Rng) -> Result<Self> {
        let e_tilde = Tensor::xavier_uniform(e.rows(), e.cols(), rng);
        let no_finding = Tensor::xavier_uniform(1, e.cols(), rng).reshape(vec![e.cols()])?;
        Self::from_parts(e, e_tilde, no_finding, epsilon)
    }

    pub fn from_parts(
        e: Tensor,
        e_tilde: Tensor,
        no_finding: Tensor,
        epsilon: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Parameter(format!(
                "epsilon must lie in [0, 1], got {epsilon}"
            )));
        }
        if e_tilde.shape() != e.shape() {
            return Err(Error::Shape {
                op: "knowledge context",
                lhs: e.shape().to_vec(),
                rhs: e_tilde.shape().to_vec(),
            });
        }
        if no_finding.len() != e.cols() {
            return Err(Error::Shape {
                op: "knowledge context",
                lhs: e.shape().to_vec(),
                rhs: no_finding.shape().to_vec(),
            });
        }
        Ok(Self {
            e,
            e_tilde,
            no_finding,
            epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.e.cols()
    }

    pub fn num_concepts(&self) -> usize {
        self.e.rows()
    }
}

/// `k_i` for one view of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleKnowledge {
    pub image_view: Tensor,
    pub text_view: Tensor,
}

impl SampleKnowledge {
    pub fn build(
        report: &ConceptSet,
        sentence: &ConceptSet,
        ctx: &KnowledgeContext,
    ) -> Result<Self> {
        Ok(Self {
            image_view: build_sample_knowledge(report, ctx)?,
            text_view: build_sample_knowledge(sentence, ctx)?,
        })
    }

    pub fn report_count(&self) -> usize {
        self.image_view.rows()
    }

    pub fn sentence_count(&self) -> usize {
        self.text_view.rows()
    }
}

/// One unit row per mention; an empty set gives a `0 × D_S` tensor.
pub fn build_sample_knowledge(concepts: &ConceptSet, ctx: &KnowledgeContext) -> Result<Tensor> {
    let d = ctx.dim();
    let mut data = Vec::with_capacity(concepts.len() * d);
    for m in &concepts.mentions {
        if m.concept_id >= ctx.num_concepts() {
            return Err(Error::Contract(format!(
                "concept id {} out of range for {} concepts",
                m.concept_id,
                ctx.num_concepts()
            )));
        }
        if m.negated {
            let eps = ctx.epsilon;
            let variant = ctx.e_tilde.row(m.concept_id);
            data.extend(
                ctx.no_finding
                    .data()
                    .iter()
                    .zip(variant)
                    .map(|(nf, et)| eps * nf + (1.0 - eps) * et),
            );
        } else {
            data.extend_from_slice(ctx.e.row(m.concept_id));
        }
    }
    Ok(l2_normalize(&Tensor::matrix(concepts.len(), d, data)?))
}

/// `(1/p) Σ_s max_{s'} ⟨a_s, b_{s'}⟩`, clamped to `[0, 1]`; zero when either
/// side is empty.
pub fn max_match_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "max_match_similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Ok(0.0);
    }
    // summing the maxima in sorted order makes the result independent of row order
    let mut best: Vec<f64> = a
        .row_iter()
        .map(|ar| {
            b.row_iter()
                .map(|br| dot(ar, br))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    best.sort_by(f64::total_cmp);
    let total: f64 = best.iter().sum();
    Ok((total / a.rows() as f64).clamp(0.0, 1.0))
}

/// `λ^IT` and `λ^TI` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPair {
    pub lambda_it: Tensor,
    pub lambda_ti: Tensor,
}

impl SimilarityPair {
    pub fn zeros(n: usize) -> Self {
        Self {
            lambda_it: Tensor::zeros(&[n, n]),
            lambda_ti: Tensor::zeros(&[n, n]),
        }
    }

    pub fn len(&self) -> usize {
        self.lambda_it.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn similarity_matrices(images: &[Tensor], texts: &[Tensor]) -> Result<SimilarityPair> {
    if images.len() != texts.len() {
        return Err(Error::Contract(format!(
            "{} image-view sets but {} text-view sets",
            images.len(),
            texts.len()
        )));
    }
    let n = images.len();
    let mut it = vec![0.0; n * n];
    let mut ti = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            it[i * n + j] = max_match_similarity(&images[i], &texts[j])?;
            ti[i * n + j] = max_match_similarity(&texts[i], &images[j])?;
        }
    }
    Ok(SimilarityPair {
        lambda_it: Tensor::matrix(n, n, it)?,
        lambda_ti: Tensor::matrix(n, n, ti)?,
    })
}

pub fn batch_similarities(batch: &[SampleKnowledge]) -> Result<SimilarityPair> {
    let images: Vec<Tensor> = batch.iter().map(|k| k.image_view.clone()).collect();
    let texts: Vec<Tensor> = batch.iter().map(|k| k.text_view.clone()).collect();
    similarity_matrices(&images, &texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;
    use crate::textkb::{ConceptMention, View};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx(epsilon: f64) -> KnowledgeContext {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = l2_normalize(&Tensor::xavier_uniform(5, 6, &mut rng));
        KnowledgeContext::new(e, epsilon, &mut rng).unwrap()
    }

    fn set(mentions: &[(usize, bool)]) -> ConceptSet {
        ConceptSet {
            mentions: mentions
                .iter()
                .enumerate()
                .map(|(k, &(concept_id, negated))| ConceptMention {
                    concept_id,
                    negated,
                    span: k..k + 1,
                })
                .collect(),
            view: View::Report,
        }
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let raw: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        l2_normalize(&Tensor::matrix(n, d, raw).unwrap())
    }

    #[test]
    fn affirmed_rows_reproduce_e() {
        let c = ctx(0.1);
        let k = build_sample_knowledge(&set(&[(3, false)]), &c).unwrap();
        assert_eq!(k.row(0), l2_normalize(&c.e.select_rows(&[3])).row(0));
    }

    #[test]
    fn negated_epsilon_boundaries() {
        let c0 = ctx(0.0);
        let k = build_sample_knowledge(&set(&[(2, true)]), &c0).unwrap();
        assert_eq!(k.row(0), l2_normalize(&c0.e_tilde.select_rows(&[2])).row(0));
        let c1 = ctx(1.0);
        let k = build_sample_knowledge(&set(&[(2, true)]), &c1).unwrap();
        assert_eq!(k.row(0), l2_normalize(&c1.no_finding).data());
    }

    #[test]
    fn empty_set_and_bad_id() {
        let c = ctx(0.1);
        let k = build_sample_knowledge(&set(&[]), &c).unwrap();
        assert_eq!(k.shape(), &[0, 6]);
        assert!(matches!(
            build_sample_knowledge(&set(&[(5, false)]), &c),
            Err(Error::Contract(_))
        ));
        assert!(
            KnowledgeContext::new(c.e.clone(), 1.5, &mut ChaCha8Rng::seed_from_u64(0)).is_err()
        );
    }

    #[test]
    fn max_match_examples() {
        let u = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let w = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(max_match_similarity(&u, &u).unwrap(), 1.0);
        assert_eq!(max_match_similarity(&u, &w).unwrap(), 0.0);
        let neg = Tensor::matrix(1, 2, vec![-1.0, 0.0]).unwrap();
        assert_eq!(max_match_similarity(&u, &neg).unwrap(), 0.0);
        assert_eq!(
            max_match_similarity(&Tensor::zeros(&[0, 2]), &u).unwrap(),
            0.0
        );
        assert!(max_match_similarity(&u, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn similarity_matrix_examples() {
        let u = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let w = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let single = similarity_matrices(&[u.clone()], &[u.clone()]).unwrap();
        assert_eq!(single.lambda_it.data(), &[0.0]);
        assert_eq!(single.lambda_ti.data(), &[0.0]);
        let disjoint = similarity_matrices(&[u.clone(), w.clone()], &[u, w]).unwrap();
        assert!(disjoint.lambda_it.data().iter().all(|&v| v == 0.0));
        assert!(disjoint.lambda_ti.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subset_text_view_gives_full_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image_i = unit_rows(&mut rng, 3, 5);
        let text_j = image_i.select_rows(&[2, 0]);
        let filler = unit_rows(&mut rng, 1, 5);
        let sim =
            similarity_matrices(&[image_i.clone(), filler.clone()], &[filler, text_j]).unwrap();
        assert!((sim.lambda_ti.get(1, 0) - 1.0).abs() < 1e-12);
        // the image side averages over its own extra concept, so it stays below 1
        assert!(sim.lambda_it.get(0, 1) < 1.0 - 1e-6);

        let image_small = image_i.select_rows(&[1]);
        let sim = similarity_matrices(
            &[image_small, unit_rows(&mut rng, 1, 5)],
            &[image_i.clone(), image_i],
        )
        .unwrap();
        assert!((sim.lambda_it.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn build_is_pure() {
        let c = ctx(0.3);
        let s = set(&[(0, false), (1, true), (4, true)]);
        let a = build_sample_knowledge(&s, &c).unwrap();
        assert_eq!(a, build_sample_knowledge(&s, &c).unwrap());
        for r in a.row_iter() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn entries_in_unit_interval_with_zero_diagonal(seed in 0u64..1000, n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let images: Vec<Tensor> = (0..n).map(|_| { let p = rng.gen_range(0..4); unit_rows(&mut rng, p, 4) }).collect();
            let texts: Vec<Tensor> = (0..n).map(|_| { let q = rng.gen_range(0..4); unit_rows(&mut rng, q, 4) }).collect();
            let sim = similarity_matrices(&images, &texts).unwrap();
            for i in 0..n {
                prop_assert_eq!(sim.lambda_it.get(i, i), 0.0);
                prop_assert_eq!(sim.lambda_ti.get(i, i), 0.0);
            }
            for v in sim.lambda_it.data().iter().chain(sim.lambda_ti.data()) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = unit_rows(&mut rng, 4, 3);
            let b = unit_rows(&mut rng, 3, 3);
            let base = max_match_similarity(&a, &b).unwrap();
            prop_assert_eq!(base, max_match_similarity(&a, &b.select_rows(&[2, 0, 1])).unwrap());
            prop_assert_eq!(base, max_match_similarity(&a.select_rows(&[3, 1, 0, 2]), &b).unwrap());
        }
    }
}
