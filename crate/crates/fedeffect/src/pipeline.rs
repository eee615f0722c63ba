//! End-to-end orchestration: configuration, artifact layout, and the
//! generate / dedup / train / predict / evaluate stages.
//!
//! Every stage is a pure function of (config, input files) and writes its
//! artifacts into one output directory:
//!
//! * `source_<sid>.csv`, `manifest.json` - generated data
//! * `source_<sid>.dedup.csv`, `exclusions.json` - deduplicated data
//! * `model.json`, `trace.csv` - training outputs
//! * `effects.csv`, `ate.json`, `hist.csv` - prediction outputs
//! * `metrics.json`, `metrics.csv` - evaluation outputs
//!
//! Wall-clock seconds appear only in `trace.csv` and the `metrics.csv`
//! aggregation row; every other artifact is a deterministic function of
//! the configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_csv, save_csv, split_source, summarize, DatasetManifest, Split,
    SplitName,
};
use crate::data::SyntheticConfig;
use crate::dedup::{apply_exclusions, hash_keys, match_and_assign, sha256_hex, ExclusionList};
use crate::error::Error;
use crate::eval::{emit_report, MetricsReport, SplitMetrics};
use crate::fedrun::{train, TrainConfig, TrainTrace};
use crate::mathcore::mix_seed;
use crate::model::{PriorConfig, SourceData, SourceSummary};
use crate::predictor::{
    ate_distribution, estimate_effects, predict_missing, EffectEstimate, PredictConfig,
};
use crate::variational::{GlobalParams, VariationalConfig};
use crate::Result;

/// Which splits the evaluate stage scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub splits: Vec<SplitName>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            splits: vec![SplitName::Train, SplitName::Test, SplitName::Val],
        }
    }
}

/// Knobs of the hashed-key deduplication stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    /// Maximum number of sources that keep a shared record.
    pub k_keep: usize,
    pub seed: u64,
    /// Shared salt mixed into every digest when set.
    pub salt: Option<String>,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            k_keep: 1,
            seed: 0,
            salt: None,
        }
    }
}

/// Full run configuration, one section per stage. Every field has a
/// default, so a config file only needs the values it changes; unknown
/// keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub priors: PriorConfig,
    pub variational: VariationalConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub dedup: DedupConfig,
}

// Stream tags for deriving stage seeds from one replication seed. Chosen
// far from the per-source data streams (seed mixed with sid + 1) and the
// per-source split streams (seed mixed with SPLIT_SEED_BASE + sid).
const TRAIN_SEED_TAG: u64 = 0x100001;
const PREDICT_SEED_TAG: u64 = 0x100002;
const DEDUP_SEED_TAG: u64 = 0x100003;
const SPLIT_SEED_BASE: u64 = 1000;

impl RunConfig {
    /// Parse a config from JSON text; `label` names the source in errors.
    pub fn from_json(text: &str, label: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::SchemaError {
            path: label.to_string(),
            detail: format!("invalid run config: {e}"),
        })
    }

    /// Load a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Re-seed every stage from one replication seed: the data section
    /// takes it directly and each stage derives its own stream from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = mix_seed(seed, TRAIN_SEED_TAG);
        self.predict.seed = mix_seed(seed, PREDICT_SEED_TAG);
        self.dedup.seed = mix_seed(seed, DEDUP_SEED_TAG);
    }

    /// Hex digest of the canonical serialized config; recorded in the
    /// model file and the metrics report so artifacts name their inputs.
    pub fn digest(&self) -> String {
        let body = serde_json::to_string(self).expect("run config serializes");
        sha256_hex(body.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.predict.draws == 0 {
            return Err(Error::InvalidConfig {
                detail: "predict.draws must be positive".into(),
            });
        }
        if self.eval.splits.is_empty() {
            return Err(Error::InvalidConfig {
                detail: "eval.splits must name at least one split".into(),
            });
        }
        let mut seen = Vec::new();
        for s in &self.eval.splits {
            if seen.contains(s) {
                return Err(Error::InvalidConfig {
                    detail: format!("eval.splits repeats {s}"),
                });
            }
            seen.push(*s);
        }
        if self.dedup.k_keep == 0 {
            return Err(Error::InvalidConfig {
                detail: "dedup.k_keep must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Serialized training outcome: everything prediction needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub d_x: usize,
    pub theta: Vec<f64>,
    pub priors: PriorConfig,
    pub variational: VariationalConfig,
    /// Training-split summaries of every source, ascending source id.
    pub summaries: Vec<SourceSummary>,
    pub train_seed: u64,
    pub rounds_run: usize,
    pub ablate_g: bool,
    pub config_digest: String,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        read_json(path)
    }

    /// Parameter vector as typed global parameters.
    pub fn params(&self) -> Result<GlobalParams> {
        GlobalParams::from_values(DVector::from_column_slice(&self.theta), self.d_x)
    }
}

/// Pooled-effect summary written as `ate.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AteReport {
    pub ate_mean: f64,
    pub ate_sd: f64,
    pub interval_low: f64,
    pub interval_high: f64,
    pub n_draws: usize,
}

/// Outcome of the dedup stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupOutcome {
    pub exclusions: Vec<ExclusionList>,
    /// Deduplicated CSV file names, ascending source position.
    pub files: Vec<String>,
    pub rows_dropped: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig {
        detail: format!("serialization failed: {e}"),
    })?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&body).map_err(|e| Error::SchemaError {
        path: path.display().to_string(),
        detail: format!("malformed artifact: {e}"),
    })
}

/// Load sources from CSV files; source ids follow file order.
pub fn load_sources(paths: &[PathBuf]) -> Result<Vec<SourceData>> {
    paths
        .iter()
        .enumerate()
        .map(|(sid, path)| load_csv(path, sid))
        .collect()
}

/// Resolve the source file list: explicit paths win, otherwise the
/// manifest in the output directory names them.
pub fn resolve_sources(out_dir: &Path, explicit: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if !explicit.is_empty() {
        return Ok(explicit.to_vec());
    }
    let manifest: DatasetManifest = read_json(&out_dir.join("manifest.json"))?;
    Ok(manifest.files.iter().map(|f| out_dir.join(f)).collect())
}

/// Per-source row splits, derived from the data seed so every stage
/// reproduces the same assignment.
fn source_splits(cfg: &RunConfig, sources: &[SourceData]) -> Result<Vec<Split>> {
    sources
        .iter()
        .map(|src| {
            split_source(
                src.n(),
                &cfg.data.split,
                mix_seed(cfg.data.seed, SPLIT_SEED_BASE + src.source_id as u64),
            )
        })
        .collect()
}

/// Restrict every source to the named split.
fn select_split(
    sources: &[SourceData],
    splits: &[Split],
    name: SplitName,
) -> Result<Vec<SourceData>> {
    sources
        .iter()
        .zip(splits)
        .map(|(src, split)| src.select(split.rows(name)))
        .collect()
}

/// Generate the configured synthetic dataset: one CSV per source plus a
/// manifest, all under `out_dir`.
pub fn run_generate(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let sources = generate_synthetic(&cfg.data)?;
    let manifest = DatasetManifest::from_config(&cfg.data);
    for (src, file) in sources.iter().zip(&manifest.files) {
        save_csv(src, out_dir.join(file))?;
    }
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Run the hashed-key dedup protocol over the given sources and write the
/// surviving rows as `source_<sid>.dedup.csv` plus an exclusion record.
pub fn run_dedup(cfg: &RunConfig, paths: &[PathBuf], out_dir: &Path) -> Result<DedupOutcome> {
    cfg.validate()?;
    let sources = load_sources(paths)?;
    let mut lists = Vec::with_capacity(sources.len());
    for src in &sources {
        let ids = src.ids.as_ref().ok_or_else(|| Error::InvalidConfig {
            detail: format!("source {} has no id column to deduplicate on", src.source_id),
        })?;
        lists.push(hash_keys(src.source_id, ids, cfg.dedup.salt.as_deref())?);
    }
    let exclusions = match_and_assign(&lists, cfg.dedup.k_keep, cfg.dedup.seed)?;
    let mut files = Vec::with_capacity(sources.len());
    let mut rows_dropped = 0;
    for (src, ex) in sources.iter().zip(&exclusions) {
        let kept = apply_exclusions(src, ex)?;
        let file = format!("source_{}.dedup.csv", src.source_id);
        save_csv(&kept, out_dir.join(&file))?;
        files.push(file);
        rows_dropped += ex.rows.len();
    }
    let outcome = DedupOutcome {
        exclusions,
        files,
        rows_dropped,
    };
    write_json(&out_dir.join("exclusions.json"), &outcome)?;
    Ok(outcome)
}

/// Train on the training split of the given sources; writes `model.json`
/// and `trace.csv` into `out_dir`.
pub fn run_train(
    cfg: &RunConfig,
    paths: &[PathBuf],
    out_dir: &Path,
) -> Result<(ModelFile, TrainTrace)> {
    cfg.validate()?;
    let sources = load_sources(paths)?;
    let splits = source_splits(cfg, &sources)?;
    let train_sources = select_split(&sources, &splits, SplitName::Train)?;
    let summaries: Vec<SourceSummary> = train_sources
        .iter()
        .map(summarize)
        .collect::<Result<_>>()?;
    let (theta, trace) = train(
        train_sources,
        &summaries,
        &cfg.priors,
        &cfg.variational,
        &cfg.train,
    )?;
    trace.write_csv(out_dir.join("trace.csv"))?;
    let model = ModelFile {
        d_x: theta.layout.d_x,
        theta: theta.values.iter().copied().collect(),
        priors: cfg.priors.clone(),
        variational: cfg.variational,
        summaries,
        train_seed: cfg.train.seed,
        rounds_run: trace.rows.len(),
        ablate_g: cfg.train.ablate_g,
        config_digest: cfg.digest(),
    };
    model.save(&out_dir.join("model.json"))?;
    Ok((model, trace))
}

/// Impute counterfactuals for the configured split and write `effects.csv`,
/// `ate.json`, and `hist.csv`. The model's ablation flag wins over the
/// predict section so prediction always matches how the model was trained.
pub fn run_predict(cfg: &RunConfig, paths: &[PathBuf], out_dir: &Path) -> Result<EffectEstimate> {
    cfg.validate()?;
    let model = ModelFile::load(&out_dir.join("model.json"))?;
    let sources = load_sources(paths)?;
    let splits = source_splits(cfg, &sources)?;
    let subs = select_split(&sources, &splits, cfg.predict.split)?;
    let (estimate, dist) = predict_split(cfg, &model, &subs)?;
    write_effects_csv(&out_dir.join("effects.csv"), &subs, &estimate)?;
    let ate = AteReport {
        ate_mean: estimate.ate_mean,
        ate_sd: estimate.ate_var.sqrt(),
        interval_low: estimate.interval.0,
        interval_high: estimate.interval.1,
        n_draws: estimate.per_draw_ate.len(),
    };
    write_json(&out_dir.join("ate.json"), &ate)?;
    write_hist_csv(&out_dir.join("hist.csv"), &dist.bins)?;
    Ok(estimate)
}

fn predict_split(
    cfg: &RunConfig,
    model: &ModelFile,
    subs: &[SourceData],
) -> Result<(EffectEstimate, crate::predictor::AteDistribution)> {
    let pcfg = PredictConfig {
        ablate_g: model.ablate_g,
        ..cfg.predict
    };
    if model.config_digest != cfg.digest() {
        log::warn!("model.json was trained under a different configuration");
    }
    let theta = model.params()?;
    let draws = predict_missing(subs, &model.summaries, &theta, &model.variational, &pcfg)?;
    let estimate = estimate_effects(subs, &draws)?;
    let dist = ate_distribution(subs, &draws, None)?;
    Ok((estimate, dist))
}

fn write_effects_csv(path: &Path, subs: &[SourceData], est: &EffectEstimate) -> Result<()> {
    use std::io::Write as _;
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(out, "unit,source_id,ite_mean,ite_var").map_err(io_err)?;
    for (src, effects) in subs.iter().zip(&est.per_source) {
        for row in 0..src.n() {
            let unit = match &src.ids {
                Some(ids) => ids[row].clone(),
                None => row.to_string(),
            };
            writeln!(
                out,
                "{},{},{},{}",
                unit, src.source_id, effects.ite_mean[row], effects.ite_var[row]
            )
            .map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

fn write_hist_csv(path: &Path, bins: &[crate::predictor::HistBin]) -> Result<()> {
    use std::io::Write as _;
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(out, "bin_left,bin_right,count").map_err(io_err)?;
    for bin in bins {
        writeln!(out, "{},{},{}", bin.left, bin.right, bin.count).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Score the model on every configured split and write `metrics.json`
/// plus one `metrics.csv` row. The row's wall time is `base_wall_s` (time
/// already spent by earlier stages, zero when run standalone) plus this
/// stage's own elapsed time.
pub fn run_evaluate(
    cfg: &RunConfig,
    paths: &[PathBuf],
    out_dir: &Path,
    base_wall_s: f64,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let started = Instant::now();
    let model = ModelFile::load(&out_dir.join("model.json"))?;
    let sources = load_sources(paths)?;
    let splits = source_splits(cfg, &sources)?;
    let mut per_split = BTreeMap::new();
    for &name in &cfg.eval.splits {
        let subs = select_split(&sources, &splits, name)?;
        let (estimate, _) = predict_split(cfg, &model, &subs)?;
        let truth: Vec<DVector<f64>> =
            subs.iter().map(|s| s.true_ite()).collect::<Result<_>>()?;
        let est_ite: Vec<DVector<f64>> = estimate
            .per_source
            .iter()
            .map(|e| DVector::from_column_slice(&e.ite_mean))
            .collect();
        per_split.insert(name.to_string(), SplitMetrics::compute(&truth, &est_ite)?);
    }
    let report = MetricsReport::new(
        cfg.data.seed,
        cfg.data.variant,
        sources.len(),
        cfg.digest(),
        per_split,
    )?;
    emit_report(
        &report,
        base_wall_s + started.elapsed().as_secs_f64(),
        out_dir,
    )?;
    Ok(report)
}

/// Full pipeline: generate, train, predict, evaluate, all into `out_dir`.
/// The metrics row's wall time covers the whole run.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<MetricsReport> {
    let started = Instant::now();
    let manifest = run_generate(cfg, out_dir)?;
    let paths: Vec<PathBuf> = manifest.files.iter().map(|f| out_dir.join(f)).collect();
    run_train(cfg, &paths, out_dir)?;
    run_predict(cfg, &paths, out_dir)?;
    run_evaluate(cfg, &paths, out_dir, started.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Variant;
    use crate::data::SplitCounts;

    /// Small but non-trivial config that trains in well under a second.
    fn tiny_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig {
            data: SyntheticConfig {
                variant: Variant::Data1,
                n: 48,
                m: 2,
                d_x: 2,
                seed,
                split: SplitCounts {
                    train: 8,
                    test: 8,
                    val: 6,
                },
                with_ids: false,
            },
            ..RunConfig::default()
        };
        cfg.train.rounds = 3;
        cfg.train.mc_samples = 1;
        cfg.predict.draws = 16;
        cfg.apply_seed(seed);
        cfg
    }

    #[test]
    fn default_config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&json, "<inline>").unwrap();
        assert_eq!(back, cfg);

        let partial = RunConfig::from_json(r#"{"data": {"seed": 3}}"#, "<inline>").unwrap();
        assert_eq!(partial.data.seed, 3);
        assert_eq!(partial.data.n, 5000);
        assert_eq!(partial.train.rounds, cfg.train.rounds);

        let err = RunConfig::from_json(r#"{"bogus": 1}"#, "<inline>").unwrap_err();
        assert!(matches!(err, Error::SchemaError { .. }));
        let err =
            RunConfig::from_json(r#"{"train": {"learning_rte": 0.1}}"#, "<inline>").unwrap_err();
        assert!(matches!(err, Error::SchemaError { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn seed_override_translates_every_stage() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(42);
        assert_eq!(cfg.data.seed, 42);
        let stage_seeds = [cfg.train.seed, cfg.predict.seed, cfg.dedup.seed];
        for (i, a) in stage_seeds.iter().enumerate() {
            assert_ne!(*a, 42);
            for b in &stage_seeds[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let mut again = RunConfig::default();
        again.apply_seed(42);
        assert_eq!(again.train.seed, cfg.train.seed);
    }

    #[test]
    fn config_digest_tracks_content() {
        let a = tiny_config(0);
        let mut b = tiny_config(0);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        b.train.learning_rate += 1e-3;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn validate_rejects_bad_sections() {
        let mut cfg = tiny_config(0);
        cfg.eval.splits.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(0);
        cfg.eval.splits = vec![SplitName::Test, SplitName::Test];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(0);
        cfg.predict.draws = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(0);
        cfg.dedup.k_keep = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn generate_writes_sources_and_manifest_deterministically() {
        let cfg = tiny_config(5);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let manifest = run_generate(&cfg, dir_a.path()).unwrap();
        run_generate(&cfg, dir_b.path()).unwrap();
        assert_eq!(manifest.files, vec!["source_0.csv", "source_1.csv"]);
        for file in manifest.files.iter().chain([&"manifest.json".to_string()]) {
            let a = std::fs::read(dir_a.path().join(file)).unwrap();
            let b = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
        let resolved = resolve_sources(dir_a.path(), &[]).unwrap();
        assert_eq!(resolved.len(), 2);
        let loaded = load_sources(&resolved).unwrap();
        assert_eq!(loaded[1].source_id, 1);
        assert_eq!(loaded[0].n(), 24);
    }

    #[test]
    fn train_emits_model_and_trace() {
        let cfg = tiny_config(1);
        let dir = tempfile::tempdir().unwrap();
        let manifest = run_generate(&cfg, dir.path()).unwrap();
        let paths: Vec<PathBuf> = manifest.files.iter().map(|f| dir.path().join(f)).collect();
        let (model, trace) = run_train(&cfg, &paths, dir.path()).unwrap();
        assert_eq!(model.rounds_run, 3);
        assert_eq!(trace.rows.len(), 3);
        assert_eq!(model.summaries.len(), 2);
        assert!(model.theta.iter().all(|v| v.is_finite()));
        let reloaded = ModelFile::load(&dir.path().join("model.json")).unwrap();
        assert_eq!(reloaded, model);
        let trace_body = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert!(trace_body.starts_with("round,elbo,grad_norm,wall_s\n"));
        assert_eq!(trace_body.lines().count(), 4);
    }

    #[test]
    fn predict_writes_effect_artifacts() {
        let cfg = tiny_config(2);
        let dir = tempfile::tempdir().unwrap();
        let manifest = run_generate(&cfg, dir.path()).unwrap();
        let paths: Vec<PathBuf> = manifest.files.iter().map(|f| dir.path().join(f)).collect();
        run_train(&cfg, &paths, dir.path()).unwrap();
        let est = run_predict(&cfg, &paths, dir.path()).unwrap();
        assert_eq!(est.per_draw_ate.len(), 16);

        let effects = std::fs::read_to_string(dir.path().join("effects.csv")).unwrap();
        let lines: Vec<&str> = effects.lines().collect();
        assert_eq!(lines[0], "unit,source_id,ite_mean,ite_var");
        // Train split of both sources: 8 rows each.
        assert_eq!(lines.len(), 1 + 16);

        let ate: AteReport = read_json(&dir.path().join("ate.json")).unwrap();
        assert!(ate.interval_low <= ate.ate_mean && ate.ate_mean <= ate.interval_high);
        assert_eq!(ate.n_draws, 16);

        let hist = std::fs::read_to_string(dir.path().join("hist.csv")).unwrap();
        assert!(hist.starts_with("bin_left,bin_right,count\n"));
        let total: usize = hist
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 16);
    }

    #[test]
    fn evaluate_scores_each_requested_split() {
        let mut cfg = tiny_config(3);
        cfg.eval.splits = vec![SplitName::Train, SplitName::Test];
        let dir = tempfile::tempdir().unwrap();
        let manifest = run_generate(&cfg, dir.path()).unwrap();
        let paths: Vec<PathBuf> = manifest.files.iter().map(|f| dir.path().join(f)).collect();
        run_train(&cfg, &paths, dir.path()).unwrap();
        let report = run_evaluate(&cfg, &paths, dir.path(), 0.0).unwrap();
        assert_eq!(report.per_split.len(), 2);
        assert_eq!(report.m_used, 2);
        assert_eq!(report.seed, 3);
        let test = &report.per_split["test"];
        assert_eq!(test.n_units, 16);
        assert_eq!(report.sqrt_pehe, test.sqrt_pehe);
        assert!(report.sqrt_pehe.is_finite());
        let body = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(body.lines().count(), 2);
    }

    #[test]
    fn pipeline_artifacts_are_reproducible() {
        let cfg = tiny_config(4);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let report_a = run_pipeline(&cfg, dir_a.path()).unwrap();
        let report_b = run_pipeline(&cfg, dir_b.path()).unwrap();
        assert_eq!(report_a, report_b);
        // Deterministic artifacts must match byte for byte.
        for file in [
            "source_0.csv",
            "source_1.csv",
            "manifest.json",
            "model.json",
            "effects.csv",
            "ate.json",
            "hist.csv",
            "metrics.json",
        ] {
            let a = std::fs::read(dir_a.path().join(file)).unwrap();
            let b = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
        // Timed artifacts match apart from the wall column.
        for file in ["trace.csv", "metrics.csv"] {
            let a = std::fs::read_to_string(dir_a.path().join(file)).unwrap();
            let b = std::fs::read_to_string(dir_b.path().join(file)).unwrap();
            let strip = |body: &str| -> Vec<String> {
                body.lines()
                    .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                    .collect()
            };
            assert_eq!(strip(&a), strip(&b), "{file} differs beyond wall time");
        }
    }

    #[test]
    fn dedup_stage_drops_cross_source_copies() {
        let dir = tempfile::tempdir().unwrap();
        // Two hand-written sources sharing the id "dup".
        let header = "id,w,y_obs,x1";
        std::fs::write(
            dir.path().join("a.csv"),
            format!("{header}\ndup,0,1.0,0.1\nona,1,2.0,0.2\n"),
        )
        .unwrap();
        std::fs::write(
            dir.path().join("b.csv"),
            format!("{header}\nbee,1,3.0,0.3\ndup,0,4.0,0.4\n"),
        )
        .unwrap();
        let cfg = RunConfig::default();
        let paths = vec![dir.path().join("a.csv"), dir.path().join("b.csv")];
        let outcome = run_dedup(&cfg, &paths, dir.path()).unwrap();
        assert_eq!(outcome.rows_dropped, 1);
        let survivors: usize = outcome
            .files
            .iter()
            .map(|f| {
                std::fs::read_to_string(dir.path().join(f))
                    .unwrap()
                    .lines()
                    .count()
                    - 1
            })
            .sum();
        assert_eq!(survivors, 3);

        // Sources without ids cannot be deduplicated.
        std::fs::write(dir.path().join("c.csv"), "w,y_obs,x1\n0,1.0,0.1\n").unwrap();
        let err = run_dedup(&cfg, &[dir.path().join("c.csv")], dir.path()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { .. }));
    }

    #[test]
    fn evaluate_without_truth_reports_missing_truth() {
        let cfg = tiny_config(6);
        let dir = tempfile::tempdir().unwrap();
        let manifest = run_generate(&cfg, dir.path()).unwrap();
        let paths: Vec<PathBuf> = manifest.files.iter().map(|f| dir.path().join(f)).collect();
        run_train(&cfg, &paths, dir.path()).unwrap();
        // Strip the truth columns from both sources.
        for path in &paths {
            let src = load_csv(path, 0).unwrap();
            let bare = SourceData::new(
                src.source_id,
                None,
                src.x.clone(),
                src.w.clone(),
                src.y_obs.clone(),
                None,
                None,
            )
            .unwrap();
            save_csv(&bare, path).unwrap();
        }
        let err = run_evaluate(&cfg, &paths, dir.path(), 0.0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(matches!(err, Error::MissingTruth { .. }));
    }
}
