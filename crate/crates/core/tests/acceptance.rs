//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.

use std::time::{Duration, Instant};

use kobo::kgraph::{mean_group_cosine, train_kg_embeddings, two_clique_store, KgTrainConfig};
use kobo::knowledge::{
    build_sample_knowledge, max_match_similarity, KnowledgeContext, SimilarityPair,
};
use kobo::losses::{loss_kag, loss_kse, loss_sbg, loss_skr, loss_vsr};
use kobo::numerics::{l2_normalize, Graph, Tensor};
use kobo::pipeline::{
    evaluate_retrieval, evaluate_zeroshot, metrics_csv, negation_probe, pretrain, NegationProbe,
    RunConfig,
};
use kobo::synth::{generate_corpus, WorldSpec};
use kobo::textkb::{extract_concepts, ConceptMention, ConceptSet, View};
use kobo::verify::{format_suite, gradient_suite, SuiteSizes};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let raw: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    l2_normalize(&Tensor::matrix(n, d, raw).unwrap())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.row_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Unweighted symmetric InfoNCE, written out with plain loops.
fn plain_symmetric(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let fwd: Vec<f64> = (0..n).map(|j| dot(&a[i], &b[j]) / tau).collect();
        let bwd: Vec<f64> = (0..n).map(|j| dot(&b[i], &a[j]) / tau).collect();
        total += log_sum_exp(&fwd) - fwd[i] + log_sum_exp(&bwd) - bwd[i];
    }
    total / n as f64
}

fn scalar(g: &Graph, v: kobo::numerics::Var) -> f64 {
    g.value(v).item().unwrap()
}

fn gradient_suite_check() -> Outcome {
    let t = Instant::now();
    let entries = gradient_suite(SuiteSizes::small(), 42).unwrap();
    let elapsed = t.elapsed();
    print!("{}", format_suite(&entries));
    let worst = entries
        .iter()
        .map(|e| e.report.max_rel_err)
        .fold(0.0, f64::max);
    let pass = entries.len() == 5
        && entries.iter().all(|e| e.passes())
        && elapsed < Duration::from_secs(60);
    outcome(pass, format!("worst rel err {worst:.2e}, {:.2?}", elapsed))
}

fn reduction_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=8);
        let (v, t) = (unit_rows(&mut rng, n, d), unit_rows(&mut rng, n, d));
        let mut g = Graph::new();
        let (vv, tv) = (g.constant(v.clone()), g.constant(t.clone()));
        let l = loss_kse(&mut g, vv, tv, &SimilarityPair::zeros(n), 0.07).unwrap();
        worst = worst.max((scalar(&g, l) - plain_symmetric(&rows(&v), &rows(&t), 0.07)).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("max diff {worst:.2e} over 20 batches"),
    )
}

fn closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    // single-sample batches
    let (a, b) = (unit_rows(&mut rng, 1, 6), unit_rows(&mut rng, 1, 6));
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let l = loss_kse(&mut g, av, bv, &SimilarityPair::zeros(1), 0.07).unwrap();
    check(scalar(&g, l), 0.0);
    let l = loss_kag(&mut g, av, bv, 0.07).unwrap();
    check(scalar(&g, l), 0.0);
    let l = loss_sbg(&mut g, av, bv, 0.07).unwrap();
    check(scalar(&g, l), 0.0);
    let si = g.constant(unit_rows(&mut rng, 2, 6));
    let st = g.constant(unit_rows(&mut rng, 2, 6));
    let l = loss_skr(&mut g, &[vec![si]], &[vec![st]], 0.1)
        .unwrap()
        .unwrap();
    check(scalar(&g, l), 0.0);

    for n in [2usize, 3, 5, 8] {
        let row = unit_rows(&mut rng, 1, 6);
        let same = Tensor::from_rows(&vec![row.row(0).to_vec(); n]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(same);
        let l = loss_kag(&mut g, x, x, 0.07).unwrap();
        check(scalar(&g, l), 2.0 * (n as f64).ln());
        let l = loss_sbg(&mut g, x, x, 0.07).unwrap();
        check(scalar(&g, l), 2.0 * (n as f64).ln());

        // every (a, b) cell gets the same logit
        let cell = g.constant(unit_rows(&mut rng, 3, 6));
        let table: Vec<Vec<_>> = (0..n).map(|_| vec![cell; n]).collect();
        let l = loss_skr(&mut g, &table, &table, 0.1).unwrap().unwrap();
        check(scalar(&g, l), (n as f64).ln());

        // zero queries score every region alike
        let r = g.constant(unit_rows(&mut rng, n, 6));
        let h = g.constant(Tensor::zeros(&[n, 6]));
        let l = loss_vsr(&mut g, &[h, h], &[r, r], 0.1).unwrap().unwrap();
        check(scalar(&g, l), (n as f64).ln());
    }
    outcome(worst <= 1e-9, format!("max deviation {worst:.2e}"))
}

/// Best mean over every map from rows of `a` to rows of `b`.
fn brute_force_match(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (p, q) = (a.len(), b.len());
    let mut best = f64::NEG_INFINITY;
    for code in 0..q.pow(p as u32) {
        let mut c = code;
        let mut total = 0.0;
        for row in a {
            total += dot(row, &b[c % q]);
            c /= q;
        }
        best = best.max(total / p as f64);
    }
    best.clamp(0.0, 1.0)
}

fn match_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut invariant = true;
    for _ in 0..200 {
        let (p, q) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let a = unit_rows(&mut rng, p, 5);
        let b = unit_rows(&mut rng, q, 5);
        let got = max_match_similarity(&a, &b).unwrap();
        worst = worst.max((got - brute_force_match(&rows(&a), &rows(&b))).abs());

        let mut pa: Vec<usize> = (0..p).collect();
        let mut pb: Vec<usize> = (0..q).collect();
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        let shuffled = max_match_similarity(&a.select_rows(&pa), &b.select_rows(&pb)).unwrap();
        invariant &= shuffled == got;
    }
    outcome(
        worst <= 1e-12 && invariant,
        format!("max diff {worst:.2e}, permutation invariant: {invariant}"),
    )
}

fn mentions(list: &[(usize, bool)]) -> ConceptSet {
    ConceptSet {
        mentions: list
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

fn epsilon_boundaries() -> Outcome {
    let mut ok = true;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Tensor::xavier_uniform(6, 8, &mut rng);
        let e_tilde = Tensor::xavier_uniform(6, 8, &mut rng);
        let nf = Tensor::vector((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let unit = |t: &Tensor, i: usize| l2_normalize(&t.select_rows(&[i])).row(0).to_vec();
        let nf_unit = l2_normalize(&nf.reshape(vec![1, 8]).unwrap())
            .row(0)
            .to_vec();
        for eps in [0.0, 1.0] {
            let ctx =
                KnowledgeContext::from_parts(e.clone(), e_tilde.clone(), nf.clone(), eps).unwrap();
            for c in 0..6 {
                let k = build_sample_knowledge(&mentions(&[(c, true), (c, false)]), &ctx).unwrap();
                let want_neg = if eps == 0.0 {
                    unit(&e_tilde, c)
                } else {
                    nf_unit.clone()
                };
                ok &= k.row(0) == want_neg.as_slice();
                ok &= k.row(1) == unit(&e, c).as_slice();
            }
        }
    }
    outcome(ok, "exact rows for eps 0 and 1 across 10 contexts")
}

fn negation_round_trip() -> Outcome {
    let (mut exact, mut total) = (0usize, 0usize);
    for seed in 1..=5 {
        let spec = WorldSpec {
            negation_rate: 0.5,
            seed,
            ..Default::default()
        };
        let corpus = generate_corpus(&spec, 200).unwrap();
        for r in &corpus.records {
            let mut got = extract_concepts(&r.report, &corpus.lexicon, View::Report)
                .unwrap()
                .keys();
            got.sort_unstable();
            got.dedup();
            exact += usize::from(got == corpus.world.planted_mentions(r));
            total += 1;
        }
    }
    outcome(exact == total, format!("{exact}/{total} records exact"))
}

struct SeedRun {
    seed: u64,
    map_full: f64,
    map_base: f64,
    auroc_full: f64,
    probe: NegationProbe,
}

fn ablation_runs() -> (Vec<SeedRun>, Duration) {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in 1..=5 {
        let mut cfg = RunConfig::desk().with_seed(seed);
        cfg.epochs = 10;
        cfg.wall_clock = false;
        cfg.world.overlap_rate = 0.7;
        cfg.world.noise_sigma = 0.5;
        cfg.world.num_diseases = 4;
        let corpus = generate_corpus(&cfg.world, 512).unwrap();
        let table = train_kg_embeddings(&corpus.triples, &cfg.kg).unwrap().table;

        let full = pretrain(&cfg, &corpus.records, &corpus.lexicon, &table).unwrap();
        let mut base_cfg = cfg.clone();
        base_cfg.ablation.disable_kse = true;
        base_cfg.ablation.disable_ksg = true;
        let base = pretrain(&base_cfg, &corpus.records, &corpus.lexicon, &table).unwrap();

        let run = SeedRun {
            seed,
            map_full: evaluate_retrieval(&full.model, &corpus.records).unwrap(),
            map_base: evaluate_retrieval(&base.model, &corpus.records).unwrap(),
            auroc_full: evaluate_zeroshot(
                &full.model,
                &corpus.records,
                &corpus.world.class_prompts(),
            )
            .unwrap()
            .mean()
            .unwrap_or(f64::NAN),
            probe: negation_probe(&full.model, &corpus.world.diseases).unwrap(),
        };
        println!(
            "  seed {}: mAP full {:.4} base {:.4}  AUROC full {:.4}  cos(no X, X) {:.4}  cos(X, X present) {:.4}",
            run.seed, run.map_full, run.map_base, run.auroc_full, run.probe.negated, run.probe.paraphrase
        );
        runs.push(run);
    }
    (runs, start.elapsed())
}

fn directional_ablation(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let wins = runs.iter().filter(|r| r.map_full >= r.map_base).count();
    let auroc = runs.iter().map(|r| r.auroc_full).sum::<f64>() / runs.len() as f64;
    let pass = wins >= 4 && auroc > 0.8 && elapsed < Duration::from_secs(15 * 60);
    outcome(
        pass,
        format!(
            "full >= baseline in {wins}/5 seeds, mean AUROC {auroc:.4}, {:.1?}",
            elapsed
        ),
    )
}

fn negation_sensitivity(runs: &[SeedRun]) -> Outcome {
    let ok = runs.iter().filter(|r| r.probe.separates()).count();
    outcome(ok >= 4, format!("separates in {ok}/5 seeds"))
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::desk().with_seed(9);
    cfg.epochs = 3;
    cfg.wall_clock = false;
    cfg.kg.epochs = 100;
    let corpus = generate_corpus(&cfg.world, 96).unwrap();
    let run = || {
        let table = train_kg_embeddings(&corpus.triples, &cfg.kg).unwrap().table;
        metrics_csv(
            &pretrain(&cfg, &corpus.records, &corpus.lexicon, &table)
                .unwrap()
                .metrics,
        )
    };
    let (a, b) = (run(), run());
    outcome(
        a == b && a.lines().count() > 1,
        format!("{} bytes, identical: {}", a.len(), a == b),
    )
}

fn kg_sanity() -> Outcome {
    let store = two_clique_store();
    let (ca, cb) = ([0, 1, 2], [3, 4, 5]);
    let (mut separated, mut decreased) = (0, 0);
    let mut margins = Vec::new();
    for seed in 1..=5 {
        let cfg = KgTrainConfig {
            dim: 16,
            seed,
            ..Default::default()
        };
        let t = train_kg_embeddings(&store, &cfg).unwrap();
        let within =
            (mean_group_cosine(&t.table, &ca, &ca) + mean_group_cosine(&t.table, &cb, &cb)) / 2.0;
        let margin = within - mean_group_cosine(&t.table, &ca, &cb);
        margins.push(format!("{margin:.3}"));
        separated += usize::from(margin > 0.05);
        decreased += usize::from(t.epoch_losses.last() < t.epoch_losses.first());
    }
    outcome(
        separated >= 4 && decreased == 5,
        format!(
            "margin > 0.05 in {separated}/5 [{}], loss decreased in {decreased}/5",
            margins.join(" ")
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient suite", gradient_suite_check()),
        (2, "reduction identity", reduction_identity()),
        (3, "closed-form cases", closed_forms()),
        (4, "max-match oracle", match_oracle()),
        (5, "negation mixing boundaries", epsilon_boundaries()),
        (6, "negation round-trip", negation_round_trip()),
    ];
    let (runs, elapsed) = ablation_runs();
    results.push((
        7,
        "directional ablation",
        directional_ablation(&runs, elapsed),
    ));
    results.push((8, "negation sensitivity", negation_sensitivity(&runs)));
    results.push((9, "determinism", determinism()));
    results.push((10, "KG sanity", kg_sanity()));

    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag}  {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
