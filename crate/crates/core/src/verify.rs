//! Finite-difference check of every training loss, end to end through
//! normalization and attention fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::knowledge::SimilarityPair;
use crate::losses::{loss_kag, loss_kse, loss_sbg, loss_skr, loss_vsr};
use crate::model::{attn, GLOBAL_ATTN_TEMPERATURE};
use crate::numerics::{check_gradients, GradReport, Graph, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSizes {
    pub n: usize,
    pub d_s: usize,
    pub n_i: usize,
    pub n_l: usize,
    pub n_es: usize,
    pub n_concepts: usize,
}

impl SuiteSizes {
    pub fn small() -> Self {
        Self {
            n: 4,
            d_s: 8,
            n_i: 3,
            n_l: 4,
            n_es: 2,
            n_concepts: 5,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            other => Err(Error::Parameter(format!(
                "unknown gradcheck size preset {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub loss: &'static str,
    pub report: GradReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(GRAD_TOLERANCE)
    }
}

const TAU_G: f64 = 0.07;
const TAU_L: f64 = 0.1;

/// Raw (unnormalized) inputs of one synthetic batch.
struct Inputs {
    s: SuiteSizes,
    v: Tensor,
    t: Tensor,
    e: Tensor,
    regions: Vec<Tensor>,
    tokens: Vec<Tensor>,
    knowledge: Vec<Tensor>,
    sim: SimilarityPair,
}

impl Inputs {
    fn draw(s: SuiteSizes, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let v = m(s.n, s.d_s);
        let t = m(s.n, s.d_s);
        let e = m(s.n_concepts, s.d_s);
        let regions = (0..s.n).map(|_| m(s.n_i, s.d_s)).collect();
        let tokens = (0..s.n).map(|_| m(s.n_l, s.d_s)).collect();
        let knowledge = (0..s.n).map(|_| m(s.n_es, s.d_s)).collect();
        let mut lam = |_: ()| {
            let mut x = m(s.n, s.n);
            for (i, val) in x.data_mut().iter_mut().enumerate() {
                *val = if i % (s.n + 1) == 0 {
                    0.0
                } else {
                    0.5 * (*val + 1.0)
                };
            }
            x
        };
        let sim = SimilarityPair {
            lambda_it: lam(()),
            lambda_ti: lam(()),
        };
        Self {
            s,
            v,
            t,
            e,
            regions,
            tokens,
            knowledge,
            sim,
        }
    }
}

fn normalized(g: &mut Graph, xs: &[Var]) -> Vec<Var> {
    xs.iter().map(|&x| g.l2_normalize(x)).collect()
}

/// Runs the suite and returns one entry per loss, in the order
/// SE, KAG, SKR, VSR, SBG.
pub fn gradient_suite(sizes: SuiteSizes, seed: u64) -> Result<Vec<SuiteEntry>> {
    let inp = Inputs::draw(sizes, seed);
    let n = inp.s.n;
    let mut out = Vec::new();

    let sim = inp.sim.clone();
    let report = check_gradients(
        |g, x| {
            let v = g.l2_normalize(x[0]);
            let t = g.l2_normalize(x[1]);
            loss_kse(g, v, t, &sim, TAU_G)
        },
        &[inp.v.clone(), inp.t.clone()],
        FD_STEP,
    )?;
    out.push(SuiteEntry { loss: "se", report });

    let report = check_gradients(
        |g, x| {
            let v = g.l2_normalize(x[0]);
            let t = g.l2_normalize(x[1]);
            let e = g.l2_normalize(x[2]);
            let h_ik = attn(g, v, e, e, GLOBAL_ATTN_TEMPERATURE)?;
            let h_tk = attn(g, t, e, e, GLOBAL_ATTN_TEMPERATURE)?;
            loss_kag(g, h_ik, h_tk, TAU_G)
        },
        &[inp.v.clone(), inp.t.clone(), inp.e.clone()],
        FD_STEP,
    )?;
    out.push(SuiteEntry {
        loss: "kag",
        report,
    });

    // inputs: regions[0..n], tokens[0..n], knowledge[0..n]
    let mut local: Vec<Tensor> = inp.regions.clone();
    local.extend(inp.tokens.iter().cloned());
    local.extend(inp.knowledge.iter().cloned());
    let report = check_gradients(
        |g, x| {
            let r = normalized(g, &x[..n]);
            let l = normalized(g, &x[n..2 * n]);
            let k = normalized(g, &x[2 * n..]);
            let mut h_si = Vec::with_capacity(n);
            let mut h_st = Vec::with_capacity(n);
            for &kq in &k {
                let mut si = Vec::with_capacity(n);
                let mut st = Vec::with_capacity(n);
                for j in 0..n {
                    si.push(attn(g, kq, r[j], r[j], TAU_L)?);
                    st.push(attn(g, kq, l[j], l[j], TAU_L)?);
                }
                h_si.push(si);
                h_st.push(st);
            }
            Ok(loss_skr(g, &h_si, &h_st, TAU_L)?.expect("all samples active"))
        },
        &local,
        FD_STEP,
    )?;
    out.push(SuiteEntry {
        loss: "skr",
        report,
    });

    let mut local: Vec<Tensor> = inp.regions.clone();
    local.extend(inp.knowledge.iter().cloned());
    let report = check_gradients(
        |g, x| {
            let r = normalized(g, &x[..n]);
            let k = normalized(g, &x[n..]);
            let mut h_is = Vec::with_capacity(n);
            for a in 0..n {
                h_is.push(attn(g, r[a], k[a], k[a], TAU_L)?);
            }
            Ok(loss_vsr(g, &h_is, &r, TAU_L)?.expect("all samples active"))
        },
        &local,
        FD_STEP,
    )?;
    out.push(SuiteEntry {
        loss: "vsr",
        report,
    });

    let report = check_gradients(
        |g, x| {
            let v = g.l2_normalize(x[0]);
            let t = g.l2_normalize(x[1]);
            let e = g.l2_normalize(x[2]);
            let h_ik = attn(g, v, e, e, GLOBAL_ATTN_TEMPERATURE)?;
            loss_sbg(g, h_ik, t, TAU_G)
        },
        &[inp.v, inp.t, inp.e],
        FD_STEP,
    )?;
    out.push(SuiteEntry {
        loss: "sbg",
        report,
    });

    Ok(out)
}

/// Plain-text table, one row per loss.
pub fn format_suite(entries: &[SuiteEntry]) -> String {
    let mut s = format!(
        "{:<6}{:>14}{:>14}{:>8}{:>7}\n",
        "loss", "max_rel_err", "max_abs_err", "coords", "pass"
    );
    for e in entries {
        s.push_str(&format!(
            "{:<6}{:>14.3e}{:>14.3e}{:>8}{:>7}\n",
            e.loss,
            e.report.max_rel_err,
            e.report.max_abs_err,
            e.report.coordinates,
            if e.passes() { "ok" } else { "FAIL" }
        ));
    }
    s
}
