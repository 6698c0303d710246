use crate::error::{Error, Result};
use crate::knowledge::SampleKnowledge;
use crate::numerics::{Graph, Tensor, Var};

use super::encoders::EncodedPair;

/// Temperature for the two global fusions against the concept table.
pub const GLOBAL_ATTN_TEMPERATURE: f64 = 1.0;

/// Single-head scaled dot-product attention with a temperature:
/// `l2_normalize(softmax(Q·Kᵀ / (√D · τ)) · V)`.
pub fn attn(g: &mut Graph, q: Var, k: Var, v: Var, temperature: f64) -> Result<Var> {
    let keys = g.value(k);
    if keys.rows() == 0 {
        return Err(Error::Contract("attention over an empty key set".into()));
    }
    if keys.rows() != g.value(v).rows() {
        return Err(Error::Shape {
            op: "attn",
            lhs: keys.shape().to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    let d = keys.cols() as f64;
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let weights = g.softmax_rows(scores, temperature)?;
    let out = g.matmul(weights, v)?;
    Ok(g.l2_normalize(out))
}

/// [`attn`] on plain tensors.
pub fn attn_values(q: &Tensor, k: &Tensor, v: &Tensor, temperature: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let out = attn(&mut g, q, k, v, temperature)?;
    Ok(g.value(out).clone())
}

/// All knowledge-fused tensors for one batch.
///
/// `skipped[i]` marks samples whose sentence produced no concepts; they get
/// no local fusions and are left out of the local losses. `active` lists the
/// other samples in batch order, and the local fusion tables are indexed by
/// position in `active`.
#[derive(Clone, Debug)]
pub struct Fusion {
    /// `[N × D_S]`, image global embedding attending over `E`.
    pub h_ik: Var,
    /// `[N × D_S]`, text global embedding attending over `E`.
    pub h_tk: Var,
    /// `h_si[a][b]`: text-view knowledge of `active[a]` over regions of `active[b]`.
    pub h_si: Vec<Vec<Var>>,
    /// `h_st[a][b]`: text-view knowledge of `active[a]` over tokens of `active[b]`.
    pub h_st: Vec<Vec<Var>>,
    /// `h_is[a]`: regions of `active[a]` over its own text-view knowledge.
    pub h_is: Vec<Var>,
    pub active: Vec<usize>,
    pub skipped: Vec<bool>,
}

impl Fusion {
    /// Text-view concept count of each active sample.
    pub fn concept_counts(&self, g: &Graph) -> Vec<usize> {
        self.h_si.iter().map(|row| g.value(row[0]).rows()).collect()
    }
}

pub struct FuseOptions {
    pub global: bool,
    pub cross_local: bool,
    pub in_sample_local: bool,
}

impl Default for FuseOptions {
    fn default() -> Self {
        Self {
            global: true,
            cross_local: true,
            in_sample_local: true,
        }
    }
}

/// Computes the global and local knowledge fusions for a batch.
///
/// `e` is the (constant) concept table on the same graph. Parts switched off
/// in `opts` are left empty; `h_ik`/`h_tk` are then the raw stacked `v`/`t`.
pub fn fuse_all(
    g: &mut Graph,
    batch: &[EncodedPair],
    knowledge: &[SampleKnowledge],
    e: Var,
    tau_l: f64,
    opts: &FuseOptions,
) -> Result<Fusion> {
    if batch.len() != knowledge.len() {
        return Err(Error::Contract(format!(
            "{} encoded pairs but {} knowledge entries",
            batch.len(),
            knowledge.len()
        )));
    }
    let vs: Vec<Var> = batch.iter().map(|p| p.image.v).collect();
    let ts: Vec<Var> = batch.iter().map(|p| p.text.t).collect();
    let v = g.concat_rows(&vs)?;
    let t = g.concat_rows(&ts)?;
    let (h_ik, h_tk) = if opts.global {
        (
            attn(g, v, e, e, GLOBAL_ATTN_TEMPERATURE)?,
            attn(g, t, e, e, GLOBAL_ATTN_TEMPERATURE)?,
        )
    } else {
        (v, t)
    };

    let skipped: Vec<bool> = knowledge.iter().map(|k| k.text_view.rows() == 0).collect();
    let active: Vec<usize> = (0..batch.len()).filter(|&i| !skipped[i]).collect();
    let k_text: Vec<Var> = active
        .iter()
        .map(|&i| g.constant(knowledge[i].text_view.clone()))
        .collect();

    let mut h_si = Vec::new();
    let mut h_st = Vec::new();
    if opts.cross_local {
        for &kq in &k_text {
            let mut si_row = Vec::with_capacity(active.len());
            let mut st_row = Vec::with_capacity(active.len());
            for &j in &active {
                let (r, l) = (batch[j].image.r, batch[j].text.l);
                si_row.push(attn(g, kq, r, r, tau_l)?);
                st_row.push(attn(g, kq, l, l, tau_l)?);
            }
            h_si.push(si_row);
            h_st.push(st_row);
        }
    }

    let mut h_is = Vec::new();
    if opts.in_sample_local {
        for (a, &i) in active.iter().enumerate() {
            let r = batch[i].image.r;
            h_is.push(attn(g, r, k_text[a], k_text[a], tau_l)?);
        }
    }

    Ok(Fusion {
        h_ik,
        h_tk,
        h_si,
        h_st,
        h_is,
        active,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode_image, encode_text, Model, ModelConfig, Vocab};
    use crate::numerics::{dot, l2_normalize, norm};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_returns_normalized_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_matrix(&mut rng, 3, 4);
        let k = rand_matrix(&mut rng, 1, 4);
        let v = rand_matrix(&mut rng, 1, 4);
        let out = attn_values(&q, &k, &v, 0.1).unwrap();
        let expect = l2_normalize(&v);
        for row in out.row_iter() {
            assert_eq!(row, expect.data());
        }
    }

    #[test]
    fn identical_keys_and_values_return_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_matrix(&mut rng, 2, 3);
        let row = rand_matrix(&mut rng, 1, 3);
        let kv = Tensor::matrix(4, 3, row.data().repeat(4)).unwrap();
        let out = attn_values(&q, &kv, &kv, 0.1).unwrap();
        let expect = l2_normalize(&row);
        for r in out.row_iter() {
            assert!(r
                .iter()
                .zip(expect.data())
                .all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn two_key_case_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (
            rand_matrix(&mut rng, 1, 4),
            rand_matrix(&mut rng, 2, 4),
            rand_matrix(&mut rng, 2, 4),
        );
        let tau = 0.1;
        let s0 = dot(q.row(0), k.row(0)) / (2.0 * tau);
        let s1 = dot(q.row(0), k.row(1)) / (2.0 * tau);
        let w0 = 1.0 / (1.0 + (s1 - s0).exp());
        let mixed: Vec<f64> = (0..4)
            .map(|c| w0 * v.get(0, c) + (1.0 - w0) * v.get(1, c))
            .collect();
        let n = norm(&mixed);
        let out = attn_values(&q, &k, &v, tau).unwrap();
        for c in 0..4 {
            assert!((out.get(0, c) - mixed[c] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_keys_are_rejected() {
        let q = Tensor::zeros(&[1, 3]);
        let k = Tensor::zeros(&[0, 3]);
        assert!(matches!(
            attn_values(&q, &k, &k, 1.0),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn invariant_under_joint_kv_permutation(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, k, v) = (rand_matrix(&mut rng, 2, 3), rand_matrix(&mut rng, 3, 3), rand_matrix(&mut rng, 3, 3));
            let perm = [2, 0, 1];
            let a = attn_values(&q, &k, &v, 0.1).unwrap();
            let b = attn_values(&q, &k.select_rows(&perm), &v.select_rows(&perm), 0.1).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
            for row in a.row_iter() {
                prop_assert!((norm(row) - 1.0).abs() < 1e-9);
            }
        }
    }

    struct Fixture {
        model: Model,
        regions: Vec<Tensor>,
        texts: Vec<Vec<usize>>,
        knowledge: Vec<SampleKnowledge>,
        e: Tensor,
    }

    fn fixture(n_concepts: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vocab = Vocab::from_texts(["there is mild effusion .", "no edema seen ."]);
        let cfg = ModelConfig {
            feature_dim: 5,
            hidden_dim: 6,
            embed_dim: 4,
            vocab_size: vocab.len(),
        };
        let model = Model::init(cfg, vocab, 3).unwrap();
        let regions = (0..3).map(|_| rand_matrix(&mut rng, 3, 5)).collect();
        let texts = vec![
            model.vocab.encode("there is effusion ."),
            model.vocab.encode("no edema ."),
            model.vocab.encode("mild effusion seen"),
        ];
        let e = l2_normalize(&rand_matrix(&mut rng, n_concepts, 4));
        let knowledge = vec![
            SampleKnowledge {
                image_view: l2_normalize(&rand_matrix(&mut rng, 2, 4)),
                text_view: l2_normalize(&rand_matrix(&mut rng, 1, 4)),
            },
            SampleKnowledge {
                image_view: l2_normalize(&rand_matrix(&mut rng, 1, 4)),
                text_view: Tensor::zeros(&[0, 4]),
            },
            SampleKnowledge {
                image_view: l2_normalize(&rand_matrix(&mut rng, 3, 4)),
                text_view: l2_normalize(&rand_matrix(&mut rng, 2, 4)),
            },
        ];
        Fixture {
            model,
            regions,
            texts,
            knowledge,
            e,
        }
    }

    fn run(fx: &Fixture, g: &mut Graph) -> (Vec<EncodedPair>, Fusion) {
        let p = fx.model.params.bind(g);
        let pairs: Vec<EncodedPair> = fx
            .regions
            .iter()
            .zip(&fx.texts)
            .map(|(r, ids)| EncodedPair {
                image: encode_image(g, &p, r).unwrap(),
                text: encode_text(g, &p, ids, fx.model.vocab.len()).unwrap(),
            })
            .collect();
        let e = g.constant(fx.e.clone());
        let f = fuse_all(g, &pairs, &fx.knowledge, e, 0.1, &FuseOptions::default()).unwrap();
        (pairs, f)
    }

    #[test]
    fn single_concept_table_collapses_global_fusion() {
        let fx = fixture(1);
        let mut g = Graph::new();
        let (_, f) = run(&fx, &mut g);
        for row in g.value(f.h_ik).row_iter().chain(g.value(f.h_tk).row_iter()) {
            assert!(row
                .iter()
                .zip(fx.e.row(0))
                .all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn empty_text_knowledge_is_skipped() {
        let fx = fixture(4);
        let mut g = Graph::new();
        let (_, f) = run(&fx, &mut g);
        assert_eq!(f.skipped, [false, true, false]);
        assert_eq!(f.active, [0, 2]);
        assert_eq!(f.h_is.len(), 2);
        assert_eq!(f.h_si.len(), 2);
        assert!(f.h_si.iter().all(|row| row.len() == 2));
        assert_eq!(f.concept_counts(&g), [1, 2]);
    }

    #[test]
    fn fusion_shapes_norms_and_direct_evaluation() {
        let fx = fixture(4);
        let mut g = Graph::new();
        let (pairs, f) = run(&fx, &mut g);
        assert_eq!(g.shape(f.h_ik), &[3, 4]);
        assert_eq!(g.shape(f.h_si[1][0]), &[2, 4]);
        assert_eq!(g.shape(f.h_st[0][1]), &[1, 4]);
        assert_eq!(g.shape(f.h_is[1]), &[3, 4]);
        for (a, &i) in f.active.iter().enumerate() {
            let r = g.value(pairs[i].image.r).clone();
            let k = fx.knowledge[i].text_view.clone();
            let direct = attn_values(&r, &k, &k, 0.1).unwrap();
            assert!(g.value(f.h_is[a]).max_abs_diff(&direct) < 1e-15);
            for row in direct.row_iter() {
                assert!((norm(row) - 1.0).abs() < 1e-9);
            }
        }
    }
}
