use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use siamdrop_cli::config::Config;
use siamdrop_cli::{results, run};
use siamdrop_core::train::Stage;

#[derive(Parser)]
#[command(
    name = "siamdrop",
    version,
    about = "Siamese tracker with structured feature dropout, on synthetic occlusion benchmarks"
)]
struct Cli {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Retarget every seeded component (dropout, trainer, synth) at once.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dropout kind: none | channel | segment | slice | mc.
    #[arg(long, global = true)]
    dropout: Option<String>,
    /// Prediction combiner: encoder | explicit.
    #[arg(long, global = true)]
    combiner: Option<String>,
    /// Worker threads for suite-level parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic benchmark suite to a directory tree.
    Synth {
        /// Output directory (falls back to paths.data in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suite profile: easy | occlusion-heavy.
        #[arg(long)]
        profile: Option<String>,
        /// Number of sequences.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on a rendered suite and save a weight store.
    Train {
        /// Suite directory (falls back to paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Weight store to write; also receives per-epoch checkpoints
        /// (falls back to paths.weights).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Comma-separated stage list.
        #[arg(long, default_value = "backbone-pretrain,head-train,joint")]
        stages: String,
        /// Start from an existing weight store instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Track every sequence in a suite; one results file per sequence.
    Track {
        /// Suite directory (falls back to paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Weight store; untrained seeded weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Results directory (falls back to paths.results).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score stored results against the suite that produced them.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
        /// Report file; metrics also print to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Frame-level IoU gain of results B over results A against occlusion.
    AnalyzeOcclusion {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        results_a: PathBuf,
        #[arg(long)]
        results_b: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Optional per-frame CSV of the paired rows.
        #[arg(long)]
        rows: Option<PathBuf>,
    },
    /// Time the inference variants and report per-frame cost ratios.
    BenchSpeed {
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(
    flag: Option<PathBuf>,
    fallback: &Option<String>,
    what: &str,
    flag_name: &str,
) -> Result<PathBuf> {
    flag.or_else(|| fallback.as_ref().map(PathBuf::from))
        .with_context(|| format!("no {what}: pass {flag_name} or set it in the config"))
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(cli.seed, cli.dropout.as_deref(), cli.combiner.as_deref())?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("thread pool")?;
    }

    match cli.command {
        Command::Synth {
            out,
            profile,
            count,
        } => {
            if let Some(p) = profile {
                cfg.synth.profile = p;
            }
            if let Some(c) = count {
                cfg.synth.count = c;
            }
            cfg.validate()?;
            let out = resolve(out, &cfg.paths.data, "output directory", "--out")?;
            let n = run::synth_suite(&cfg, &out)?;
            println!(
                "rendered {n} {} sequences into {}",
                cfg.synth.profile,
                out.display()
            );
        }
        Command::Train {
            data,
            weights,
            stages,
            init,
        } => {
            let data = resolve(data, &cfg.paths.data, "suite directory", "--data")?;
            let weights = resolve(weights, &cfg.paths.weights, "weight store path", "--weights")?;
            let stages: Vec<Stage> = stages
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    Stage::parse(s).with_context(|| {
                        format!("unknown stage {s:?} (want backbone-pretrain|head-train|joint)")
                    })
                })
                .collect::<Result<_>>()?;
            if stages.is_empty() {
                bail!("--stages is empty");
            }
            let outcome = run::train_command(&cfg, &data, &weights, &stages, init.as_deref())?;
            for sr in &outcome {
                for r in &sr.records {
                    match r.val_auc {
                        Some(v) => println!(
                            "stage {} epoch {} loss {:.6} val-auc {:.4}",
                            sr.stage.as_str(),
                            r.epoch + 1,
                            r.mean_loss,
                            v
                        ),
                        None => println!(
                            "stage {} epoch {} loss {:.6}",
                            sr.stage.as_str(),
                            r.epoch + 1,
                            r.mean_loss
                        ),
                    }
                }
            }
            println!("weights saved to {}", weights.display());
        }
        Command::Track { data, weights, out } => {
            let data = resolve(data, &cfg.paths.data, "suite directory", "--data")?;
            let out = resolve(out, &cfg.paths.results, "results directory", "--out")?;
            let model = match weights.or_else(|| cfg.paths.weights.as_ref().map(PathBuf::from)) {
                Some(w) => {
                    let (stored_cfg, model) = run::load_model(&w)?;
                    // runtime settings come from the live config; only the
                    // architecture is pinned by the store
                    if stored_cfg.backbone != cfg.backbone {
                        cfg.backbone = stored_cfg.backbone.clone();
                    }
                    model
                }
                None => run::ModelBundle {
                    backbone: siamdrop_core::Backbone::new(&cfg.backbone_config())?,
                    head: None,
                },
            };
            let model = ensure_head(&cfg, model)?;
            let tracker = run::build_tracker(&cfg, model)?;
            let runs = run::track_suite(&cfg, &tracker, &data, &out)?;
            for r in &runs {
                println!(
                    "{}: {} frames, {:.1} ms/frame",
                    r.id,
                    r.run.len(),
                    r.ms_per_frame
                );
            }
            println!("results written to {}", out.display());
        }
        Command::Eval {
            data,
            results: results_dir,
            report,
        } => {
            let data = resolve(data, &cfg.paths.data, "suite directory", "--data")?;
            let results_dir = resolve(
                results_dir,
                &cfg.paths.results,
                "results directory",
                "--results",
            )?;
            let (per, agg) = run::evaluate(&data, &results_dir)?;
            let mut entries: Vec<(String, String)> =
                vec![("sequences".into(), per.len().to_string())];
            for (id, r) in &per {
                entries.push((format!("{id}.precision"), r.precision.to_string()));
                entries.push((format!("{id}.auc"), r.auc.to_string()));
                entries.push((format!("{id}.ao"), r.ao.to_string()));
            }
            entries.push(("precision".into(), agg.precision.to_string()));
            entries.push(("auc".into(), agg.auc.to_string()));
            entries.push(("ao".into(), agg.ao.to_string()));
            entries.push(("sr50".into(), agg.sr50.to_string()));
            entries.push(("sr75".into(), agg.sr75.to_string()));
            entries.push((
                "success_curve".into(),
                agg.success_curve
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ));
            println!("sequences = {}", per.len());
            println!("precision = {:.4}", agg.precision);
            println!("auc = {:.4}", agg.auc);
            println!("ao = {:.4}", agg.ao);
            println!("sr50 = {:.4}", agg.sr50);
            println!("sr75 = {:.4}", agg.sr75);
            if let Some(path) = report.or_else(|| cfg.paths.report.as_ref().map(PathBuf::from)) {
                results::write_report(&path, &run::config_lines(&cfg), &entries)?;
                println!("report written to {}", path.display());
            }
        }
        Command::AnalyzeOcclusion {
            data,
            results_a,
            results_b,
            report,
            rows,
        } => {
            let data = resolve(data, &cfg.paths.data, "suite directory", "--data")?;
            let (analyses, pooled) = run::analyze(&data, &results_a, &results_b)?;
            let fmt_corr = |c: Option<f64>| match c {
                Some(v) => v.to_string(),
                None => "undefined".to_string(),
            };
            let mut entries: Vec<(String, String)> =
                vec![("sequences".into(), analyses.len().to_string())];
            let mut frames = 0usize;
            for a in &analyses {
                frames += a.rows.len();
                entries.push((
                    format!("{}.rank_correlation", a.sequence_id),
                    fmt_corr(a.rank_correlation),
                ));
            }
            entries.push(("frames".into(), frames.to_string()));
            entries.push(("pooled_rank_correlation".into(), fmt_corr(pooled)));
            println!("sequences = {}", analyses.len());
            println!("frames = {frames}");
            println!("pooled_rank_correlation = {}", fmt_corr(pooled));
            if let Some(path) = report.or_else(|| cfg.paths.report.as_ref().map(PathBuf::from)) {
                results::write_report(&path, &run::config_lines(&cfg), &entries)?;
                println!("report written to {}", path.display());
            }
            if let Some(path) = rows {
                let mut csv = String::from("sequence,frame,iou_a,iou_b,delta,occ\n");
                for a in &analyses {
                    for r in &a.rows {
                        csv.push_str(&format!(
                            "{},{},{},{},{},{}\n",
                            a.sequence_id, r.frame, r.iou_a, r.iou_b, r.delta, r.occ
                        ));
                    }
                }
                siamdrop_cli::write_atomic(&path, csv.as_bytes())?;
                println!("rows written to {}", path.display());
            }
        }
        Command::BenchSpeed { report } => {
            let rows = run::bench_speed(&cfg)?;
            let mut entries = Vec::new();
            for r in &rows {
                println!(
                    "{}: {:.2} ms/frame ({:.2}x), {} masks, {} embeds, {} xcorrs, {} head calls",
                    r.name,
                    r.ms_per_frame,
                    r.ratio,
                    r.masks,
                    r.stats.embed_calls,
                    r.stats.xcorr_calls,
                    r.stats.head_calls
                );
                entries.push((format!("{}.ms_per_frame", r.name), r.ms_per_frame.to_string()));
                entries.push((format!("{}.ratio", r.name), r.ratio.to_string()));
                entries.push((format!("{}.masks", r.name), r.masks.to_string()));
                entries.push((
                    format!("{}.embed_calls", r.name),
                    r.stats.embed_calls.to_string(),
                ));
                entries.push((
                    format!("{}.xcorr_calls", r.name),
                    r.stats.xcorr_calls.to_string(),
                ));
                entries.push((
                    format!("{}.head_calls", r.name),
                    r.stats.head_calls.to_string(),
                ));
            }
            if let Some(path) = report.or_else(|| cfg.paths.report.as_ref().map(PathBuf::from)) {
                results::write_report(&path, &run::config_lines(&cfg), &entries)?;
                println!("report written to {}", path.display());
            }
        }
    }
    Ok(())
}

/// The encoder combiner needs a head; seed a fresh one when the store had
/// none (untrained, but structurally valid).
fn ensure_head(cfg: &Config, mut model: run::ModelBundle) -> Result<run::ModelBundle> {
    use siamdrop_core::track::CombinerKind;
    if CombinerKind::parse(&cfg.combiner.kind) == Some(CombinerKind::Encoder)
        && model.head.is_none()
    {
        model.head = Some(siamdrop_core::combine::EncoderHead::new(
            cfg.mask_spec().count(),
            cfg.dropout.seed ^ 0x6865_6164,
        )?);
    }
    Ok(model)
}
