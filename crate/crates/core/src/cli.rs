//! `kobo` command line: corpus generation, KG training, pre-training,
//! evaluation and the verification suite.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::kgraph::{load_triples, train_kg_embeddings, EmbeddingTable};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::pipeline::{
    evaluate_relatedness, evaluate_retrieval, evaluate_zeroshot, load_or_train_embeddings,
    negation_probe, pretrain, write_metrics, RunConfig,
};
use crate::synth::{
    generate_corpus, read_corpus, read_relatedness, CorpusRecord, WorldInfo, WORLD_FILE,
};
use crate::textkb::Lexicon;
use crate::verify::{format_suite, gradient_suite, SuiteSizes};

pub const SEED_ENV: &str = "KOBO_SEED";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(
    name = "kobo",
    about = "Knowledge-boosted contrastive vision-language pre-training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "kobo-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, lexicon, triples and relatedness pairs.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of records; defaults to `world.n_samples`.
        #[arg(long)]
        n: Option<usize>,
        /// Where to write the corpus files; defaults to `<out>/data`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Train concept embeddings from a triples TSV.
    TrainKg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        triples: PathBuf,
    },
    /// Pre-train the encoders.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Image-to-report retrieval mAP.
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Zero-shot per-class AUROC from prompts.
    EvalZeroshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// World description holding class names and templates; defaults to
        /// `world.json` next to the corpus.
        #[arg(long)]
        world: Option<PathBuf>,
        /// `class_index <TAB> prompt` lines; replaces the world's prompts.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Pearson correlation of text similarity with gold relatedness.
    EvalRelatedness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Finite-difference check of every loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "small")]
        sizes: String,
    },
    /// Matched-seed pre-training with different loss switches.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated arms among full, no_kse, no_ksg, baseline,
        /// no_kag, no_skr, no_vsr, no_sbg.
        #[arg(long, default_value = "full,no_kse,no_ksg,baseline")]
        arms: String,
        /// Comma-separated seeds; defaults to the resolved seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Relatedness pairs to score each arm on.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    /// Saved embedding table or triples TSV (trained on the fly).
    #[arg(long)]
    kg: PathBuf,
}

/// Runs one command line and returns its exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Builds the run config: defaults, then `KOBO_SEED`, then the config
/// file, then `--set` overrides, then `--seed`.
fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::desk();
    let env_seed = std::env::var(SEED_ENV).ok();
    let seed = match env_seed {
        Some(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Parameter(format!("{SEED_ENV}: cannot parse {s:?} as a seed")))?,
        None => DEFAULT_SEED,
    };
    cfg = cfg.with_seed(seed);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text, path)?;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn create(root: &Path) -> Result<Self> {
        for sub in ["config", "checkpoints", "metrics", "reports"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    fn config(&self) -> PathBuf {
        self.root.join("config")
    }
    fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }
    fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `resolved_config` and `seed` into `dir`.
fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write(&dir.join("resolved_config"), &cfg.to_text())?;
    write(&dir.join("seed"), &format!("{}\n", cfg.seed))
}

fn setup(common: &Common) -> Result<(RunConfig, Layout)> {
    let cfg = resolve_config(common)?;
    let layout = Layout::create(&common.out)?;
    echo_config(&layout.config(), &cfg)?;
    Ok((cfg, layout))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            common,
            n,
            data_dir,
        } => {
            let (cfg, layout) = setup(&common)?;
            let n = n.unwrap_or(cfg.n_samples);
            let corpus = generate_corpus(&cfg.world, n)?;
            let dir = data_dir.unwrap_or_else(|| layout.root.join("data"));
            corpus.save(&dir)?;
            println!("wrote {n} records to {}", dir.display());
            Ok(())
        }
        Command::TrainKg { common, triples } => {
            let (cfg, layout) = setup(&common)?;
            let store = load_triples(&triples)?;
            let out = train_kg_embeddings(&store, &cfg.kg)?;
            let path = layout.checkpoints().join("kg.bin");
            out.table.save(&path)?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in out.epoch_losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l}");
            }
            write(&layout.metrics().join("kg_loss.csv"), &csv)?;
            let (first, last) = (out.epoch_losses.first(), out.epoch_losses.last());
            println!(
                "trained {} concept embeddings (dim {}); link loss {} -> {}; saved {}",
                out.table.num_concepts(),
                out.table.dim(),
                first.map_or("n/a".into(), |v| format!("{v:.4}")),
                last.map_or("n/a".into(), |v| format!("{v:.4}")),
                path.display()
            );
            Ok(())
        }
        Command::Pretrain { common, data } => {
            let (cfg, layout) = setup(&common)?;
            let (records, lexicon, table) = load_data(&data, &cfg)?;
            let out = pretrain(&cfg, &records, &lexicon, &table)?;
            let ckpt = layout.checkpoints().join("model.bin");
            save_checkpoint(&out.model, cfg.precision.as_str(), &ckpt)?;
            write_metrics(&out.metrics, &layout.metrics().join("metrics.csv"))?;
            let mut report = String::from("epoch\tmean_l_total\n");
            for (i, m) in out.epoch_means.iter().enumerate() {
                let _ = writeln!(report, "{i}\t{m}");
            }
            write(&layout.reports().join("pretrain.tsv"), &report)?;
            println!(
                "{} steps over {} epochs; checkpoint {}",
                out.metrics.len(),
                out.epoch_means.len(),
                ckpt.display()
            );
            Ok(())
        }
        Command::EvalRetrieval {
            common,
            checkpoint,
            corpus,
        } => {
            let (_, layout) = setup(&common)?;
            let model = load_model(&checkpoint)?;
            let records = read_corpus(&corpus)?;
            let map = evaluate_retrieval(&model, &records)?;
            write(
                &layout.reports().join("retrieval.txt"),
                &format!("map\t{map}\n"),
            )?;
            println!("mAP {map:.4}");
            Ok(())
        }
        Command::EvalZeroshot {
            common,
            checkpoint,
            corpus,
            world,
            prompts,
        } => {
            let (_, layout) = setup(&common)?;
            let model = load_model(&checkpoint)?;
            let records = read_corpus(&corpus)?;
            let (names, class_prompts) = match prompts {
                Some(p) => {
                    let cp = read_prompts(&p)?;
                    ((0..cp.len()).map(|c| format!("class{c}")).collect(), cp)
                }
                None => {
                    let path = world.unwrap_or_else(|| sibling(&corpus, WORLD_FILE));
                    let w = WorldInfo::load(&path)?;
                    (w.diseases.clone(), w.class_prompts())
                }
            };
            let zs = evaluate_zeroshot(&model, &records, &class_prompts)?;
            let mut report = String::from("class\tauroc\n");
            for (name, a) in names.iter().zip(&zs.per_class) {
                let _ = writeln!(
                    report,
                    "{name}\t{}",
                    a.map_or("nan".into(), |v| v.to_string())
                );
                println!(
                    "{name:<16}{}",
                    a.map_or("undefined".into(), |v| format!("{v:.4}"))
                );
            }
            let mean = zs.mean().map_or("nan".into(), |v| v.to_string());
            let _ = writeln!(report, "mean\t{mean}");
            println!("{:<16}{mean}", "mean");
            write(&layout.reports().join("zeroshot.tsv"), &report)
        }
        Command::EvalRelatedness {
            common,
            checkpoint,
            pairs,
        } => {
            let (_, layout) = setup(&common)?;
            let model = load_model(&checkpoint)?;
            let pairs = read_relatedness(&pairs)?;
            let rel = evaluate_relatedness(&model, &pairs)?;
            let mut report = String::from("text_a\ttext_b\tgold\tpredicted\n");
            for (p, s) in pairs.iter().zip(&rel.predicted) {
                let _ = writeln!(report, "{}\t{}\t{}\t{s}", p.text_a, p.text_b, p.gold);
            }
            write(&layout.reports().join("relatedness.tsv"), &report)?;
            write(
                &layout.reports().join("relatedness.txt"),
                &format!("pearson\t{}\n", rel.pearson),
            )?;
            println!("pearson {:.4}", rel.pearson);
            Ok(())
        }
        Command::Gradcheck { common, sizes } => {
            let (cfg, layout) = setup(&common)?;
            let sizes = SuiteSizes::by_name(&sizes)?;
            let entries = gradient_suite(sizes, cfg.seed)?;
            let table = format_suite(&entries);
            print!("{table}");
            write(&layout.reports().join("gradcheck.txt"), &table)?;
            let failed: Vec<&str> = entries
                .iter()
                .filter(|e| !e.passes())
                .map(|e| e.loss)
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                )))
            }
        }
        Command::Ablate {
            common,
            data,
            arms,
            seeds,
            pairs,
        } => {
            let (cfg, layout) = setup(&common)?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => s
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::Parameter(format!("--seeds: bad seed {x:?}")))
                    })
                    .collect::<Result<_>>()?,
                None => vec![cfg.seed],
            };
            let arms: Vec<String> = arms.split(',').map(|a| a.trim().to_string()).collect();
            let relatedness = pairs.as_deref().map(read_relatedness).transpose()?;
            let records = read_corpus(&data.corpus)?;
            let lexicon = Lexicon::load(&data.lexicon)?;
            let world = WorldInfo::load(&sibling(&data.corpus, WORLD_FILE)).ok();

            let mut table =
                String::from("arm\tseed\tmap\tauroc\tpearson\tneg_cos\tpara_cos\tfinal_loss\n");
            for &seed in &seeds {
                let base = cfg.clone().with_seed(seed);
                let emb = load_or_train_embeddings(&data.kg, &base)?;
                for arm in &arms {
                    let arm_cfg = arm_config(&base, arm)?;
                    let tag = format!("{arm}_seed{seed}");
                    echo_config(&layout.config().join(&tag), &arm_cfg)?;
                    let out = pretrain(&arm_cfg, &records, &lexicon, &emb)?;
                    write_metrics(&out.metrics, &layout.metrics().join(format!("{tag}.csv")))?;
                    let map = evaluate_retrieval(&out.model, &records)?;
                    let (auc, probe) = match &world {
                        Some(w) => (
                            evaluate_zeroshot(&out.model, &records, &w.class_prompts())?.mean(),
                            Some(negation_probe(&out.model, &w.diseases)?),
                        ),
                        None => (None, None),
                    };
                    let r = match &relatedness {
                        Some(p) => Some(evaluate_relatedness(&out.model, p)?.pearson),
                        None => None,
                    };
                    let fmt = |x: Option<f64>| x.map_or("nan".to_string(), |v| format!("{v:.4}"));
                    let _ = writeln!(
                        table,
                        "{arm}\t{seed}\t{map:.4}\t{}\t{}\t{}\t{}\t{}",
                        fmt(auc),
                        fmt(r),
                        fmt(probe.map(|p| p.negated)),
                        fmt(probe.map(|p| p.paraphrase)),
                        fmt(out.epoch_means.last().copied()),
                    );
                }
            }
            print!("{table}");
            write(&layout.reports().join("ablation.tsv"), &table)
        }
    }
}

/// Config for one ablation arm; only the switches change.
pub fn arm_config(base: &RunConfig, arm: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    let a = &mut c.ablation;
    match arm {
        "full" => {}
        "no_kse" => a.disable_kse = true,
        "no_ksg" => a.disable_ksg = true,
        "baseline" => {
            a.disable_kse = true;
            a.disable_ksg = true;
        }
        "no_kag" => a.kag = false,
        "no_skr" => a.skr = false,
        "no_vsr" => a.vsr = false,
        "no_sbg" => a.sbg = false,
        other => return Err(Error::Parameter(format!("unknown ablation arm {other:?}"))),
    }
    Ok(c)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)?.0)
}

fn load_data(
    data: &DataArgs,
    cfg: &RunConfig,
) -> Result<(Vec<CorpusRecord>, Lexicon, EmbeddingTable)> {
    let records = read_corpus(&data.corpus)?;
    let lexicon = Lexicon::load(&data.lexicon)?;
    let table = load_or_train_embeddings(&data.kg, cfg)?;
    Ok((records, lexicon, table))
}

/// Reads `class_index <TAB> prompt` lines into per-class prompt lists.
fn read_prompts(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<Vec<String>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let (c, p) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected class_index <TAB> prompt".into()))?;
        let c: usize = c
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad class index {c:?}")))?;
        if out.len() <= c {
            out.resize(c + 1, Vec::new());
        }
        out[c].push(p.to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(seed: Option<u64>, sets: &[&str], config: Option<PathBuf>) -> Common {
        Common {
            config,
            overrides: sets.iter().map(|s| s.to_string()).collect(),
            seed,
            out: PathBuf::from("unused"),
        }
    }

    #[test]
    fn seed_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "seed = 5\n").unwrap();
        // flag beats file
        assert_eq!(
            resolve_config(&common(Some(9), &[], Some(file.clone())))
                .unwrap()
                .seed,
            9
        );
        // file beats default
        assert_eq!(
            resolve_config(&common(None, &[], Some(file))).unwrap().seed,
            5
        );
        // override beats file value of another key
        let cfg = resolve_config(&common(None, &["train.epochs=2"], None)).unwrap();
        assert_eq!(cfg.epochs, 2);
    }

    #[test]
    fn arms_only_flip_switches() {
        let base = RunConfig::desk();
        for arm in [
            "full", "no_kse", "no_ksg", "baseline", "no_kag", "no_skr", "no_vsr", "no_sbg",
        ] {
            let mut c = arm_config(&base, arm).unwrap();
            c.ablation = base.ablation.clone();
            assert_eq!(c, base);
        }
        assert!(arm_config(&base, "everything").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(dispatch(["kobo", "frobnicate"]), 2);
        assert_eq!(dispatch(["kobo", "pretrain"]), 2);
        assert_eq!(dispatch(["kobo", "--help"]), 0);
    }
}
