//! Training objectives.
//!
//! * `loss_kse`: symmetric contrastive loss whose negatives are discounted by
//!   `1 − λ` from the knowledge similarity matrices.
//! * `loss_kag`: fused image knowledge vs fused text knowledge, both
//!   directions.
//! * `loss_skr`: per-pair local agreement of knowledge-queried region and
//!   token fusions; single direction.
//! * `loss_vsr`: in-sample contrast of concept-queried regions against the
//!   sample's own regions.
//! * `loss_sbg`: fused image knowledge vs text embeddings, both directions.
//!
//! Each takes graph handles and returns a scalar node so gradients flow back
//! into the encoders.

use crate::error::{Error, Result};
use crate::knowledge::SimilarityPair;
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau_g: f64,
    pub tau_l: f64,
    /// Weights of KAG, SKR, VSR, SBG inside the guidance loss.
    pub lambdas: [f64; 4],
    /// Weights of the enhancement and guidance losses in the total.
    pub total_weights: [f64; 2],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_g: 0.07,
            tau_l: 0.1,
            lambdas: [0.25; 4],
            total_weights: [1.0, 1.0],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.tau_g)?;
        check_temperature(self.tau_l)?;
        if self.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Parameter(format!(
                "lambdas must be >= 0, got {:?}",
                self.lambdas
            )));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `Σ_i [log Σ_j w_ij exp(x_ij) − x_ii]` over the rows of square `logits`.
fn weighted_diagonal_ce(g: &mut Graph, logits: Var, weights: Tensor) -> Result<Var> {
    let n = g.value(logits).rows();
    let lse = g.weighted_logsumexp_rows(logits, weights)?;
    let diag = g.pick(logits, (0..n).collect())?;
    let per_row = g.sub(lse, diag)?;
    Ok(g.sum(per_row))
}

fn discount_weights(lambda: &Tensor, n: usize) -> Result<Tensor> {
    if lambda.shape() != [n, n] {
        return Err(Error::Shape {
            op: "similarity weights",
            lhs: vec![n, n],
            rhs: lambda.shape().to_vec(),
        });
    }
    let mut w: Vec<f64> = lambda.data().iter().map(|l| 1.0 - l).collect();
    for i in 0..n {
        if lambda.get(i, i) != 0.0 {
            return Err(Error::Contract(format!(
                "similarity diagonal must be 0, found {} at {i}",
                lambda.get(i, i)
            )));
        }
        w[i * n + i] = 1.0;
    }
    Tensor::matrix(n, n, w)
}

/// Symmetric in-batch contrastive loss between rows of `a` and `b`:
/// `(1/N) Σ_i [ℓ(a_i → b) + ℓ(b_i → a)]`, optionally with discounted negatives.
fn symmetric_contrastive(
    g: &mut Graph,
    a: Var,
    b: Var,
    tau: f64,
    sim: Option<&SimilarityPair>,
) -> Result<Var> {
    check_temperature(tau)?;
    let n = g.value(a).rows();
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op: "contrastive",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let (w_ab, w_ba) = match sim {
        Some(s) => (
            discount_weights(&s.lambda_it, n)?,
            discount_weights(&s.lambda_ti, n)?,
        ),
        None => {
            let ones = Tensor::new(vec![n, n], vec![1.0; n * n])?;
            (ones.clone(), ones)
        }
    };
    let raw = g.matmul_t(a, b)?;
    let logits = g.scale(raw, 1.0 / tau);
    let forward = weighted_diagonal_ce(g, logits, w_ab)?;
    let logits_t = g.transpose(logits);
    let backward = weighted_diagonal_ce(g, logits_t, w_ba)?;
    let both = g.add(forward, backward)?;
    Ok(g.scale(both, 1.0 / n as f64))
}

/// Knowledge-weighted symmetric contrastive loss over global embeddings
/// `v`, `t` (`[N × D_S]`, unit rows).
pub fn loss_kse(g: &mut Graph, v: Var, t: Var, sim: &SimilarityPair, tau_g: f64) -> Result<Var> {
    symmetric_contrastive(g, v, t, tau_g, Some(sim))
}

/// Plain symmetric contrastive loss, i.e. [`loss_kse`] with `λ ≡ 0`.
pub fn loss_clip(g: &mut Graph, v: Var, t: Var, tau_g: f64) -> Result<Var> {
    symmetric_contrastive(g, v, t, tau_g, None)
}

pub fn loss_kag(g: &mut Graph, h_ik: Var, h_tk: Var, tau_g: f64) -> Result<Var> {
    symmetric_contrastive(g, h_ik, h_tk, tau_g, None)
}

pub fn loss_sbg(g: &mut Graph, h_ik: Var, t: Var, tau_g: f64) -> Result<Var> {
    symmetric_contrastive(g, h_ik, t, tau_g, None)
}

/// Local refinement loss over the active samples.
///
/// `h_si[a][b]` and `h_st[a][b]` are `[n_a × D_S]` fusions of sample `a`'s
/// text-view knowledge with the regions and tokens of sample `b`. The logit
/// for `(a, b)` is `Σ_k ⟨h_si[a][b]_k, h_st[a][b]_k⟩ / (n_a · τ_L)` and the
/// target for row `a` is `b = a`. Returns `None` when no sample is active.
pub fn loss_skr(
    g: &mut Graph,
    h_si: &[Vec<Var>],
    h_st: &[Vec<Var>],
    tau_l: f64,
) -> Result<Option<Var>> {
    check_temperature(tau_l)?;
    let m = h_si.len();
    if m == 0 {
        return Ok(None);
    }
    if h_st.len() != m || h_si.iter().chain(h_st).any(|row| row.len() != m) {
        return Err(Error::Contract(
            "local fusion tables must be square and aligned".into(),
        ));
    }
    let mut cells = Vec::with_capacity(m * m);
    for (si_row, st_row) in h_si.iter().zip(h_st) {
        let n_concepts = g.value(si_row[0]).rows();
        if n_concepts == 0 {
            return Err(Error::Contract("refinement row with no concepts".into()));
        }
        for (&si, &st) in si_row.iter().zip(st_row) {
            let prod = g.mul(si, st)?;
            let s = g.sum(prod);
            cells.push(g.scale(s, 1.0 / (n_concepts as f64 * tau_l)));
        }
    }
    let column = g.concat_rows(&cells)?;
    let logits = g.reshape(column, vec![m, m])?;
    let ones = Tensor::new(vec![m, m], vec![1.0; m * m])?;
    let total = weighted_diagonal_ce(g, logits, ones)?;
    Ok(Some(g.scale(total, 1.0 / m as f64)))
}

/// In-sample response loss: for each active sample, every row of `h_is`
/// (`[N_I × D_S]`) must pick out its own region among the sample's regions
/// `r` (`[N_I × D_S]`). Averaged over all region rows. Returns `None` when
/// no sample is active.
pub fn loss_vsr(g: &mut Graph, h_is: &[Var], r: &[Var], tau_l: f64) -> Result<Option<Var>> {
    check_temperature(tau_l)?;
    if h_is.len() != r.len() {
        return Err(Error::Contract(format!(
            "{} fusions for {} region sets",
            h_is.len(),
            r.len()
        )));
    }
    if h_is.is_empty() {
        return Ok(None);
    }
    let mut sums = Vec::with_capacity(h_is.len());
    let mut rows = 0usize;
    for (&h, &regions) in h_is.iter().zip(r) {
        let n_i = g.value(regions).rows();
        if n_i == 0 {
            return Err(Error::Contract(
                "response loss needs at least one region".into(),
            ));
        }
        if g.shape(h) != g.shape(regions) {
            return Err(Error::Shape {
                op: "loss_vsr",
                lhs: g.shape(h).to_vec(),
                rhs: g.shape(regions).to_vec(),
            });
        }
        let raw = g.matmul_t(h, regions)?;
        let logits = g.scale(raw, 1.0 / tau_l);
        let ones = Tensor::new(vec![n_i, n_i], vec![1.0; n_i * n_i])?;
        sums.push(weighted_diagonal_ce(g, logits, ones)?);
        rows += n_i;
    }
    let stacked = g.concat_rows(&sums)?;
    let total = g.sum(stacked);
    Ok(Some(g.scale(total, 1.0 / rows as f64)))
}

/// Loss nodes for one batch; `None` marks a part that was switched off or
/// had no active samples.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub se: Option<Var>,
    pub kag: Option<Var>,
    pub skr: Option<Var>,
    pub vsr: Option<Var>,
    pub sbg: Option<Var>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_se: f64,
    pub l_kag: f64,
    pub l_skr: f64,
    pub l_vsr: f64,
    pub l_sbg: f64,
    pub l_sg: f64,
    pub l_total: f64,
    /// True when the local losses had no active sample.
    pub local_skipped: bool,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.l_se,
            self.l_kag,
            self.l_skr,
            self.l_vsr,
            self.l_sbg,
            self.l_sg,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Plain-number aggregation, shared by [`loss_total`] so the reported
/// values and the graph agree bit for bit.
pub fn aggregate(parts: [f64; 5], cfg: &LossConfig) -> (f64, f64) {
    let [se, kag, skr, vsr, sbg] = parts;
    let [l1, l2, l3, l4] = cfg.lambdas;
    let sg = l1 * kag + l2 * skr + l3 * vsr + l4 * sbg;
    let total = cfg.total_weights[0] * se + cfg.total_weights[1] * sg;
    (sg, total)
}

/// Combines the parts into the guidance loss and the overall objective.
///
/// Returns the total as a graph node (a constant 0 when every part is off).
pub fn loss_total(g: &mut Graph, parts: &LossParts, cfg: &LossConfig) -> Result<(Var, LossReport)> {
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let vals = [
        value(g, parts.se),
        value(g, parts.kag),
        value(g, parts.skr),
        value(g, parts.vsr),
        value(g, parts.sbg),
    ];
    let (l_sg, l_total) = aggregate(vals, cfg);

    let [l1, l2, l3, l4] = cfg.lambdas;
    let weighted = |g: &mut Graph, v: Option<Var>, w: f64| v.map(|v| g.scale(v, w));
    let sg_terms: Vec<Var> = [
        weighted(g, parts.kag, l1),
        weighted(g, parts.skr, l2),
        weighted(g, parts.vsr, l3),
        weighted(g, parts.sbg, l4),
    ]
    .into_iter()
    .flatten()
    .collect();

    let mut terms = Vec::new();
    if let Some(se) = parts.se {
        terms.push(g.scale(se, cfg.total_weights[0]));
    }
    if !sg_terms.is_empty() {
        let mut sg = sg_terms[0];
        for &t in &sg_terms[1..] {
            sg = g.add(sg, t)?;
        }
        terms.push(g.scale(sg, cfg.total_weights[1]));
    }
    let total = match terms.as_slice() {
        [] => g.constant(Tensor::scalar(0.0)),
        [only] => *only,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!(),
    };

    let report = LossReport {
        l_se: vals[0],
        l_kag: vals[1],
        l_skr: vals[2],
        l_vsr: vals[3],
        l_sbg: vals[4],
        l_sg,
        l_total,
        local_skipped: parts.skr.is_none() && parts.vsr.is_none(),
    };
    Ok((total, report))
}
