use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fcp_core::autodiff::GradCheckConfig;
use fcp_core::harness::ablation::{mean_by_variant, parse_variants, run_ablation, CSV_HEADER};
use fcp_core::harness::{
    check_pipeline_gradients, evaluate_episodes, load_checkpoint, sample_episode, save_checkpoint, train, Episode,
    EpisodeImage, EvalEpisodes, Model, Predictor, RunConfig, Variant,
};
use fcp_core::pseudomask::{mask_metrics, Mask, MaskMetrics};
use fcp_core::synth::io::{read_features, read_pgm, write_features, write_pgm};
use fcp_core::synth::{make_dataset, Phase};
use fcp_core::{FcpError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "fcp",
    version,
    about = "Few-shot segmentation with foreground-covering prototypes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "model.fcpc")]
        out: PathBuf,
        /// JSON-lines step log; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on novel-class episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Per-episode JSON records.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Directory for predicted, ground-truth and pseudo masks as PGM.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// How many episodes to write masks for.
        #[arg(long, default_value_t = 8)]
        save: usize,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Coordinates per parameter group; all when omitted.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Conventional vs attention-based pseudo-mask quality.
    ///
    /// Prints one JSON line per episode followed by one summary line per mask.
    PseudomaskCompare {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Directory written by `export`; its episodes replace sampled ones.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train and evaluate variants under shared seeds; CSV on stdout.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma list of `a,e,f`, `loss-a`..`loss-d`, `T<n>`, or `arch`, `loss`, `steps`.
        #[arg(long, default_value = "arch")]
        variants: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write sampled episodes as feature files and PGM masks.
    Export {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        #[arg(long)]
        novel: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    Defaults,
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| FcpError::Config(format!("override '{kv}' is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Vec<String>,
    out: PathBuf,
    log: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config.as_deref(), &overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let rep = match log {
        Some(p) => {
            let mut w = create(&p)?;
            let rep = train(&cfg, Some(&mut w))?;
            w.flush()?;
            rep
        }
        None => train(&cfg, Some(&mut io::stdout().lock()))?,
    };
    save_checkpoint(&out, &rep.model)?;
    eprintln!("wrote {} ({} parameters)", out.display(), rep.model.parameter_count());
    Ok(())
}

fn cmd_eval(
    checkpoint: PathBuf,
    episodes: Option<usize>,
    k: usize,
    records: Option<PathBuf>,
    masks: Option<PathBuf>,
    save: usize,
) -> Result<()> {
    let mut model = load_checkpoint(&checkpoint)?;
    let n = episodes.unwrap_or(model.cfg.eval_episodes);
    let episodes = EvalEpisodes::new(&model.cfg, n, k)?;
    let threshold = model.cfg.threshold;
    let rep = evaluate_episodes(&mut model, episodes, threshold)?;
    if let Some(p) = records {
        let mut w = create(&p)?;
        for r in &rep.records {
            writeln!(w, "{}", r.to_json())?;
        }
        w.flush()?;
    }
    if let Some(dir) = masks {
        fs::create_dir_all(&dir)?;
        for (i, ep) in EvalEpisodes::new(&model.cfg, n.min(save), k)?.enumerate() {
            let ep = ep?;
            let p = model.predict(&ep)?;
            write_pgm(dir.join(format!("{i:04}_gt.pgm")), &ep.query.mask)?;
            write_pgm(dir.join(format!("{i:04}_pred.pgm")), &p.mask)?;
            if let Some(m) = &p.conventional {
                write_pgm(dir.join(format!("{i:04}_conventional.pgm")), m)?;
            }
            if let Some(m) = &p.attention {
                write_pgm(dir.join(format!("{i:04}_attention.pgm")), m)?;
            }
        }
    }
    println!("{}", rep.summary_json());
    Ok(())
}

fn cmd_gradcheck(tol: f64, h: f64, sample: Option<usize>, config: Option<PathBuf>) -> Result<bool> {
    let base = match config {
        Some(p) => RunConfig::load(p)?,
        None => load_config(
            None,
            &["channels=8", "height=8", "width=8", "tokens=3", "hidden=4"].map(String::from),
        )?,
    };
    let gc = GradCheckConfig {
        tol,
        h,
        sample,
        ..GradCheckConfig::default()
    };
    let d = make_dataset(&base.dataset())?;
    let mut ok = true;
    for variant in [Variant::Full, Variant::ConventionalGuide, Variant::PrototypePixel] {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let ep = sample_episode(&d, Phase::Base, cfg.shots, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let rep = check_pipeline_gradients(&Model::init(&cfg)?, &ep, &gc)?;
        for g in &rep.groups {
            println!(
                "{}",
                serde_json::json!({
                    "variant": variant.as_str(),
                    "group": g.name,
                    "checked": g.checked,
                    "max_rel_error": g.max_rel_error,
                })
            );
        }
        eprintln!(
            "{:16} {} coordinates, max relative error {:.3e}: {}",
            variant.as_str(),
            rep.checked,
            rep.max_rel_error,
            if rep.passed { "ok" } else { "FAILED" }
        );
        ok &= rep.passed;
    }
    Ok(ok)
}

/// Episodes from an `export` directory, in index order.
fn read_exported(dir: &Path) -> Result<Vec<Episode>> {
    let image = |stem: String| -> Result<EpisodeImage> {
        Ok(EpisodeImage {
            sam: read_features(dir.join(format!("{stem}_sam.fcpf")))?,
            backbone: read_features(dir.join(format!("{stem}_backbone.fcpf")))?,
            mask: read_pgm(dir.join(format!("{stem}_mask.pgm")))?,
        })
    };
    let mut out = Vec::new();
    while dir.join(format!("{:04}_query_sam.fcpf", out.len())).exists() {
        let i = out.len();
        let mut support = Vec::new();
        while dir.join(format!("{i:04}_support{}_sam.fcpf", support.len())).exists() {
            support.push(image(format!("{i:04}_support{}", support.len()))?);
        }
        if support.is_empty() {
            return Err(FcpError::Format(format!(
                "episode {i} in {} has no support files",
                dir.display()
            )));
        }
        out.push(Episode {
            support,
            query: image(format!("{i:04}_query"))?,
            class: 0,
            phase: Phase::Novel,
        });
    }
    if out.is_empty() {
        return Err(FcpError::Format(format!("no exported episodes in {}", dir.display())));
    }
    Ok(out)
}

fn cmd_pseudomask_compare(checkpoint: PathBuf, episodes: Option<usize>, input: Option<PathBuf>) -> Result<()> {
    let mut model = load_checkpoint(&checkpoint)?;
    if model.cfg.variant == Variant::PrototypePixel {
        return Err(FcpError::Config(
            "the prototype-pixel variant has no attention-based mask".into(),
        ));
    }
    let n = episodes.unwrap_or(model.cfg.eval_episodes);
    let threshold = model.cfg.threshold;
    let eps: Box<dyn Iterator<Item = Result<Episode>>> = match &input {
        Some(dir) => Box::new(read_exported(dir)?.into_iter().take(n).map(Ok)),
        None => Box::new(EvalEpisodes::new(&model.cfg, n, 1)?),
    };
    let mut out = io::stdout().lock();
    let (mut conventional, mut attention) = (Vec::new(), Vec::new());
    for (i, ep) in eps.enumerate() {
        let ep = ep?;
        let pred = model.predict(&ep)?;
        let metrics = |m: &Option<Mask>| {
            m.as_ref()
                .map(|m| mask_metrics(m, &ep.query.mask, threshold))
                .transpose()
        };
        let (c, a) = (metrics(&pred.conventional)?, metrics(&pred.attention)?);
        let js = |m: Option<MaskMetrics>| {
            m.map(|m| serde_json::json!({"iou": m.iou, "precision": m.precision, "recall": m.recall}))
        };
        writeln!(
            out,
            "{}",
            serde_json::json!({"episode": i, "conventional": js(c), "attention": js(a)})
        )?;
        conventional.extend(c);
        attention.extend(a);
    }
    for (name, ms) in [("conventional", conventional), ("attention", attention)] {
        let mean = |f: fn(&MaskMetrics) -> f64| ms.iter().map(f).sum::<f64>() / ms.len().max(1) as f64;
        writeln!(
            out,
            "{}",
            serde_json::json!({
                "mask": name,
                "episodes": ms.len(),
                "miou": mean(|m| m.iou),
                "precision": mean(|m| m.precision),
                "recall": mean(|m| m.recall),
            })
        )?;
    }
    Ok(())
}

fn cmd_ablation(config: Option<PathBuf>, variants: String, seeds: Vec<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config.as_deref(), &[])?;
    let variants = parse_variants(&variants)?;
    let mut w: Box<dyn Write> = match &out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(w, "{CSV_HEADER}")?;
    let mut write_err = None;
    let rows = run_ablation(&cfg, &variants, &seeds, |row| {
        if let Err(e) = writeln!(w, "{}", row.to_csv()).and_then(|_| w.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    for (v, m) in mean_by_variant(&rows) {
        eprintln!("{v:10} mean mIoU {m:.4}");
    }
    Ok(())
}

fn cmd_export(config: Option<PathBuf>, episodes: usize, novel: bool, seed: u64, out: PathBuf) -> Result<()> {
    let cfg = load_config(config.as_deref(), &[])?;
    let d = make_dataset(&cfg.dataset())?;
    let phase = if novel { Phase::Novel } else { Phase::Base };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(&out)?;
    for i in 0..episodes {
        let ep = sample_episode(&d, phase, cfg.shots, &mut rng)?;
        let images = ep
            .support
            .iter()
            .enumerate()
            .map(|(s, img)| (format!("support{s}"), img));
        for (tag, img) in images.chain([("query".to_string(), &ep.query)]) {
            let stem = format!("{i:04}_{tag}");
            write_features(out.join(format!("{stem}_sam.fcpf")), &img.sam)?;
            write_features(out.join(format!("{stem}_backbone.fcpf")), &img.backbone)?;
            write_pgm(out.join(format!("{stem}_mask.pgm")), &img.mask)?;
        }
        println!(
            "{}",
            serde_json::json!({"episode": i, "class": ep.class, "phase": ep.phase.as_str()})
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            seed,
            overrides,
            out,
            log,
        } => cmd_train(config, seed, overrides, out, log)?,
        Command::Eval {
            checkpoint,
            episodes,
            k,
            records,
            masks,
            save,
        } => cmd_eval(checkpoint, episodes, k, records, masks, save)?,
        Command::Gradcheck { tol, h, sample, config } => return cmd_gradcheck(tol, h, sample, config),
        Command::PseudomaskCompare {
            checkpoint,
            episodes,
            input,
        } => cmd_pseudomask_compare(checkpoint, episodes, input)?,
        Command::Ablation {
            config,
            variants,
            seeds,
            out,
        } => cmd_ablation(config, variants, seeds, out)?,
        Command::Export {
            config,
            episodes,
            novel,
            seed,
            out,
        } => cmd_export(config, episodes, novel, seed, out)?,
        Command::Defaults => print!("{}", RunConfig::default().to_text()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
