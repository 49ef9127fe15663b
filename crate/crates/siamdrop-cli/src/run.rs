//! Command implementations. Plain functions over paths and configs so the
//! integration tests can drive every pipeline without spawning the binary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use siamdrop_core::combine::EncoderHead;
use siamdrop_core::metrics::{self, GainAnalysis, MetricsReport, RunResult};
use siamdrop_core::synth::{
    audit_benchmark_sequence, make_benchmark_specs, render, training_pairs, BenchProfile,
    PairConfig, SequenceDataset, TrainingPair,
};
use siamdrop_core::track::{CombinerKind, MaskSpec, OpStats, Tracker, TrackerConfig};
use siamdrop_core::train::{train_stage, LossRecord, Stage};
use siamdrop_core::Backbone;

use crate::config::Config;
use crate::dataset;
use crate::results;
use crate::store::WeightStore;

/// Per-sequence seed offset so streamed (per-directory) and in-memory pair
/// sampling agree pair for pair.
const SEQ_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn config_lines(cfg: &Config) -> Vec<String> {
    cfg.echo().lines().map(String::from).collect()
}

/// Renders the configured suite under `out_dir`: `config.toml` plus one
/// `seq-NNN/` tree per sequence. Fully deterministic in the config.
pub fn synth_suite(cfg: &Config, out_dir: &Path) -> Result<usize> {
    let profile = cfg.bench_profile();
    let specs = make_benchmark_specs(profile, cfg.synth.count, cfg.synth.seed)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    crate::write_atomic(&out_dir.join("config.toml"), cfg.echo().as_bytes())?;
    specs
        .par_iter()
        .enumerate()
        .try_for_each(|(i, spec)| -> Result<()> {
            let ds = render(spec)?;
            audit_benchmark_sequence(profile, i, &ds.occ_fraction)?;
            dataset::save_sequence(&out_dir.join(dataset::sequence_dir_name(i)), &ds)
        })?;
    Ok(specs.len())
}

/// Pair-cutting geometry implied by a config and the backbone it builds.
pub fn pair_config(cfg: &Config, backbone: &Backbone) -> Result<PairConfig> {
    let code_z = backbone.code_side(cfg.tracker.exemplar_size)?;
    let code_x = backbone.code_side(cfg.tracker.search_size)?;
    Ok(PairConfig {
        exemplar_size: cfg.tracker.exemplar_size,
        search_size: cfg.tracker.search_size,
        context: cfg.tracker.context,
        total_stride: backbone.total_stride(),
        response_size: code_x - code_z + 1,
        ..PairConfig::default()
    })
}

pub fn pairs_from_datasets(
    datasets: &[SequenceDataset],
    pairs_per_seq: usize,
    pair_cfg: &PairConfig,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::with_capacity(datasets.len() * pairs_per_seq);
    for (i, ds) in datasets.iter().enumerate() {
        let s = seed.wrapping_add((i as u64).wrapping_mul(SEQ_SEED_STRIDE));
        out.extend(training_pairs(
            core::slice::from_ref(ds),
            pairs_per_seq,
            pair_cfg,
            s,
        )?);
    }
    Ok(out)
}

/// Streams sequences off disk one at a time; only the cut pairs stay
/// resident. Matches `pairs_from_datasets` on the same suite exactly.
pub fn pairs_from_suite(
    suite: &Path,
    pairs_per_seq: usize,
    pair_cfg: &PairConfig,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let dirs = dataset::sequence_dirs(suite)?;
    let mut out = Vec::with_capacity(dirs.len() * pairs_per_seq);
    for (i, dir) in dirs.iter().enumerate() {
        let (_, ds) = dataset::load_sequence(dir)?;
        let s = seed.wrapping_add((i as u64).wrapping_mul(SEQ_SEED_STRIDE));
        out.extend(training_pairs(
            core::slice::from_ref(&ds),
            pairs_per_seq,
            pair_cfg,
            s,
        )?);
    }
    Ok(out)
}

pub struct ModelBundle {
    pub backbone: Backbone,
    pub head: Option<EncoderHead>,
}

pub fn save_model(
    path: &Path,
    cfg: &Config,
    backbone: &Backbone,
    head: Option<&EncoderHead>,
) -> Result<()> {
    WeightStore::from_model(cfg.echo(), backbone, head).save(path)
}

/// Loads weights plus the config they were trained under. The architecture
/// always comes from the stored config; callers may still track with
/// different runtime settings.
pub fn load_model(path: &Path) -> Result<(Config, ModelBundle)> {
    let store = WeightStore::load(path)?;
    let cfg: Config = toml::from_str(&store.config_text)
        .with_context(|| format!("stored config in {}", path.display()))?;
    cfg.validate()?;
    let backbone = store.load_backbone(&cfg.backbone_config())?;
    let head = store.load_head()?;
    Ok((cfg, ModelBundle { backbone, head }))
}

pub fn build_tracker(cfg: &Config, model: ModelBundle) -> Result<Tracker> {
    Ok(Tracker::new(model.backbone, model.head, cfg.tracker_config())?)
}

pub struct SequenceRun {
    pub id: String,
    pub run: RunResult,
    pub stats: OpStats,
    pub ms_per_frame: f64,
}

/// Tracks every sequence in the suite and writes one results file per
/// sequence into `results_dir`. Sequences run in parallel.
pub fn track_suite(
    cfg: &Config,
    tracker: &Tracker,
    suite: &Path,
    results_dir: &Path,
) -> Result<Vec<SequenceRun>> {
    let dirs = dataset::sequence_dirs(suite)?;
    std::fs::create_dir_all(results_dir)
        .with_context(|| format!("creating {}", results_dir.display()))?;
    let lines = config_lines(cfg);
    let mut runs: Vec<SequenceRun> = dirs
        .par_iter()
        .map(|dir| -> Result<SequenceRun> {
            let (id, ds) = dataset::load_sequence(dir)?;
            let tracked = (ds.frames.len() - 1).max(1);
            let t0 = Instant::now();
            let (run, stats) = tracker.run_sequence(&ds, &id)?;
            let ms_per_frame = t0.elapsed().as_secs_f64() * 1e3 / tracked as f64;
            results::write_results(
                &results_dir.join(format!("{id}.csv")),
                &id,
                &lines,
                run.preds(),
            )?;
            Ok(SequenceRun {
                id,
                run,
                stats,
                ms_per_frame,
            })
        })
        .collect::<Result<_>>()?;
    runs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(runs)
}

/// Rebuilds per-sequence runs from a results directory plus the suite that
/// produced it, sorted by sequence id.
pub fn results_against_suite(suite: &Path, results_dir: &Path) -> Result<Vec<RunResult>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(results_dir)
        .with_context(|| format!("reading {}", results_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no result files under {}", results_dir.display());
    }
    files
        .iter()
        .map(|f| {
            let (id, preds) = results::read_results(f)?;
            let (gt, occ) = dataset::load_annotations(&suite.join(&id))?;
            RunResult::new(id, preds, gt, Some(occ))
                .with_context(|| format!("results {} against suite", f.display()))
        })
        .collect()
}

/// Per-sequence reports plus their unweighted aggregate.
pub fn evaluate(
    suite: &Path,
    results_dir: &Path,
) -> Result<(Vec<(String, MetricsReport)>, MetricsReport)> {
    let runs = results_against_suite(suite, results_dir)?;
    let mut per = Vec::with_capacity(runs.len());
    for run in &runs {
        per.push((run.sequence_id().to_string(), metrics::report(run)?));
    }
    let reports: Vec<MetricsReport> = per.iter().map(|(_, r)| r.clone()).collect();
    let agg = metrics::aggregate(&reports)?;
    Ok((per, agg))
}

/// Frame-level gain of run set B over run set A against occlusion level.
pub fn analyze(
    suite: &Path,
    results_a: &Path,
    results_b: &Path,
) -> Result<(Vec<GainAnalysis>, Option<f64>)> {
    let runs_a = results_against_suite(suite, results_a)?;
    let runs_b = results_against_suite(suite, results_b)?;
    if runs_a.len() != runs_b.len() {
        bail!(
            "result sets differ: {} vs {} sequences",
            runs_a.len(),
            runs_b.len()
        );
    }
    let mut analyses = Vec::with_capacity(runs_a.len());
    for (a, b) in runs_a.iter().zip(&runs_b) {
        if a.sequence_id() != b.sequence_id() {
            bail!(
                "sequence sets do not match ({} vs {})",
                a.sequence_id(),
                b.sequence_id()
            );
        }
        analyses.push(metrics::occlusion_gain_analysis(a, b)?);
    }
    let pooled = metrics::pooled_rank_correlation(&analyses);
    Ok((analyses, pooled))
}

pub struct StageResult {
    pub stage: Stage,
    pub records: Vec<LossRecord>,
}

/// Runs the requested stages in order over one shared pair set. A head is
/// created on demand the first time a stage needs one. The hook fires after
/// every epoch with the current weights; its return value lands in the
/// epoch's loss record.
pub fn train_stages(
    cfg: &Config,
    stages: &[Stage],
    pairs: &[TrainingPair],
    backbone: &mut Backbone,
    head: &mut Option<EncoderHead>,
    mut epoch_hook: impl FnMut(Stage, usize, &Backbone, Option<&EncoderHead>) -> Option<f64>,
) -> Result<Vec<StageResult>> {
    let mut out = Vec::with_capacity(stages.len());
    for &stage in stages {
        if stage != Stage::BackbonePretrain && head.is_none() {
            *head = Some(EncoderHead::new(
                cfg.mask_spec().count(),
                cfg.trainer.seed ^ 0x6865_6164,
            )?);
        }
        let tc = cfg.train_config(stage);
        let records = train_stage(backbone, head.as_mut(), pairs, &tc, |epoch, bb, h| {
            epoch_hook(stage, epoch, bb, h)
        })?;
        out.push(StageResult { stage, records });
    }
    Ok(out)
}

/// Tracker settings used to score validation sequences mid-training: the
/// configured combiner once a head of the right width exists, otherwise the
/// single-pass baseline.
fn val_tracker_config(cfg: &Config, head: Option<&EncoderHead>) -> TrackerConfig {
    let mut tc = cfg.tracker_config();
    let head_fits = head.is_some_and(|h| h.n_inputs() == tc.mask.count());
    if tc.combiner == CombinerKind::Encoder && !head_fits {
        tc.combiner = CombinerKind::Explicit;
        tc.mask = MaskSpec::none();
    }
    tc
}

/// Mean success AUC of the current weights over held-out sequences.
pub fn validation_auc(
    cfg: &Config,
    backbone: &Backbone,
    head: Option<&EncoderHead>,
    val: &[SequenceDataset],
) -> Option<f64> {
    let tc = val_tracker_config(cfg, head);
    let tracker = Tracker::new(backbone.clone(), head.cloned(), tc).ok()?;
    let mut aucs = Vec::with_capacity(val.len());
    for (i, ds) in val.iter().enumerate() {
        let (run, _) = tracker.run_sequence(ds, &format!("val-{i:03}")).ok()?;
        let (_, auc) = metrics::success_auc(&run).ok()?;
        aucs.push(auc);
    }
    Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

const VAL_SEED_MIX: u64 = 0x76_616C;

/// Full training command: fresh or restored weights, pairs streamed from a
/// suite directory, per-epoch checkpoints to `weights_out`, optional
/// held-out validation, final save.
pub fn train_command(
    cfg: &Config,
    suite: &Path,
    weights_out: &Path,
    stages: &[Stage],
    init: Option<&Path>,
) -> Result<Vec<StageResult>> {
    let (mut backbone, mut head) = match init {
        Some(p) => {
            let (_, m) = load_model(p)?;
            (m.backbone, m.head)
        }
        None => (Backbone::new(&cfg.backbone_config())?, None),
    };
    let pair_cfg = pair_config(cfg, &backbone)?;
    let pairs = pairs_from_suite(
        suite,
        cfg.trainer.pairs_per_sequence,
        &pair_cfg,
        cfg.trainer.seed,
    )?;
    let val: Vec<SequenceDataset> = if cfg.trainer.val_count > 0 {
        let specs = make_benchmark_specs(
            BenchProfile::Easy,
            cfg.trainer.val_count,
            cfg.synth.seed ^ VAL_SEED_MIX,
        )?;
        specs.iter().map(render).collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let stage_results = train_stages(
        cfg,
        stages,
        &pairs,
        &mut backbone,
        &mut head,
        |_, _, bb, h| {
            if let Err(e) = save_model(weights_out, cfg, bb, h) {
                eprintln!("warning: checkpoint write failed: {e:#}");
            }
            if val.is_empty() {
                None
            } else {
                validation_auc(cfg, bb, h, &val)
            }
        },
    )?;
    save_model(weights_out, cfg, &backbone, head.as_ref())?;
    Ok(stage_results)
}

pub struct BenchRow {
    pub name: String,
    pub masks: usize,
    pub ms_per_frame: f64,
    pub stats: OpStats,
    /// Wall-time ratio against the single-pass baseline.
    pub ratio: f64,
}

fn bench_variants(cfg: &Config) -> Result<Vec<(String, TrackerConfig, Option<EncoderHead>)>> {
    let base = {
        let mut tc = cfg.tracker_config();
        tc.combiner = CombinerKind::Explicit;
        tc.mask = MaskSpec::none();
        tc
    };
    let slice = MaskSpec {
        kind: siamdrop_core::dropout::MaskKind::Slice,
        n: 0,
        rate: 0.0,
        fractions: siamdrop_core::dropout::SLICE_FRACTIONS.to_vec(),
    };
    let mut out = Vec::new();
    out.push(("baseline".to_string(), base.clone(), None));
    {
        let mut tc = base.clone();
        tc.combiner = CombinerKind::Encoder;
        tc.mask = slice.clone();
        let head = EncoderHead::new(slice.count(), cfg.dropout.seed)?;
        out.push((format!("encoder-slice-{}", slice.count()), tc, Some(head)));
    }
    {
        let mut tc = base.clone();
        tc.mask = slice.clone();
        out.push((format!("explicit-slice-{}", slice.count()), tc, None));
    }
    for n in [4usize, 8, 16, 32] {
        let mut tc = base.clone();
        tc.mask = MaskSpec {
            kind: siamdrop_core::dropout::MaskKind::Channel,
            n,
            rate: cfg.dropout.rate,
            fractions: Vec::new(),
        };
        out.push((format!("explicit-channel-{n}"), tc, None));
    }
    Ok(out)
}

/// Times every inference variant over the same rendered sequence. Weights
/// are untrained; cost does not depend on their values.
pub fn bench_speed(cfg: &Config) -> Result<Vec<BenchRow>> {
    let spec = &make_benchmark_specs(BenchProfile::Easy, 1, cfg.synth.seed)?[0];
    let ds = render(spec)?;
    let tracked = (ds.frames.len() - 1).max(1) as f64;
    let backbone = Backbone::new(&cfg.backbone_config())?;
    let mut rows = Vec::new();
    let mut baseline_ms = None;
    for (name, tc, head) in bench_variants(cfg)? {
        let masks = tc.mask.count();
        let tracker = Tracker::new(backbone.clone(), head, tc)?;
        // one warmup frame pulls page faults and lazy init out of the timing
        let mut state = tracker.init(&ds.frames[0], ds.gt[0])?;
        tracker.track_frame(&mut state, &ds.frames[1])?;
        let t0 = Instant::now();
        let (_, stats) = tracker.run_sequence(&ds, "bench")?;
        let ms_per_frame = t0.elapsed().as_secs_f64() * 1e3 / tracked;
        let ratio = match baseline_ms {
            None => {
                baseline_ms = Some(ms_per_frame);
                1.0
            }
            Some(b) => ms_per_frame / b,
        };
        rows.push(BenchRow {
            name,
            masks,
            ms_per_frame,
            stats,
            ratio,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use siamdrop_core::synth::make_benchmark;

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.synth.count = 2;
        cfg.synth.seed = 11;
        cfg
    }

    #[test]
    fn suite_pairs_match_in_memory_pairs() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let suite = dir.path().join("suite");
        synth_suite(&cfg, &suite).unwrap();
        let datasets = make_benchmark(BenchProfile::Easy, 2, 11).unwrap();
        let backbone = Backbone::new(&cfg.backbone_config()).unwrap();
        let pc = pair_config(&cfg, &backbone).unwrap();
        let a = pairs_from_suite(&suite, 3, &pc, 5).unwrap();
        let b = pairs_from_datasets(&datasets, 3, &pc, 5).unwrap();
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.exemplar.data(), pb.exemplar.data());
            assert_eq!(pa.search.data(), pb.search.data());
            assert_eq!(pa.label.data(), pb.label.data());
        }
    }

    #[test]
    fn synth_is_deterministic_across_runs() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (s1, s2) = (dir.path().join("a"), dir.path().join("b"));
        synth_suite(&cfg, &s1).unwrap();
        synth_suite(&cfg, &s2).unwrap();
        for seq in ["seq-000", "seq-001"] {
            for file in ["groundtruth_rect.txt", "occlusion.txt"] {
                let a = std::fs::read(s1.join(seq).join(file)).unwrap();
                let b = std::fs::read(s2.join(seq).join(file)).unwrap();
                assert_eq!(a, b, "{seq}/{file}");
            }
            let a = std::fs::read(s1.join(seq).join("img/0001.png")).unwrap();
            let b = std::fs::read(s2.join(seq).join("img/0001.png")).unwrap();
            assert_eq!(a, b, "{seq} first frame");
        }
    }

    #[test]
    fn track_eval_analyze_pipeline() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let suite = dir.path().join("suite");
        synth_suite(&cfg, &suite).unwrap();
        let backbone = Backbone::new(&cfg.backbone_config()).unwrap();
        let tracker = build_tracker(
            &cfg,
            ModelBundle {
                backbone,
                head: None,
            },
        )
        .unwrap();
        let res_a = dir.path().join("results-a");
        let runs = track_suite(&cfg, &tracker, &suite, &res_a).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].run.len(), siamdrop_core::synth::BENCH_SEQ_LEN);
        let (per, agg) = evaluate(&suite, &res_a).unwrap();
        assert_eq!(per.len(), 2);
        assert!(agg.auc >= 0.0 && agg.auc <= 1.0);
        // analyzing a run against itself: zero deltas, no defined correlation
        let (analyses, pooled) = analyze(&suite, &res_a, &res_a).unwrap();
        assert_eq!(analyses.len(), 2);
        assert!(analyses[0].rows.iter().all(|r| r.delta == 0.0));
        assert!(pooled.is_none());
    }
}
