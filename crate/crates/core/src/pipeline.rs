//! Warm-up, then rounds of predict -> transport -> filter -> train, then
//! evaluation on the test split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetBundle;
use crate::error::{Error, ErrorKind, Result};
use crate::eval::{kmeans, MetricsReport};
use crate::filter::{self, FilterConfig, PseudoLabelSet};
use crate::learner::{
    init_head, predict, save_head, supervised_warmup, train_epoch, HeadParameters, LossBreakdown, Optimizer,
    TrainConfig, TrainingSet,
};
use crate::longtail::{group_assignment, sample_longtail, LongTailSpec};
use crate::rot::{self, PredictionMatrix, RotConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub rot: RotConfig,
    pub filter: FilterConfig,
    /// `train.seed` is ignored; the pipeline seed drives everything.
    pub train: TrainConfig,
    pub rounds: usize,
    pub warmup_epochs: usize,
    pub eval_each_round: bool,
    /// Stop after a round whose clean set differs from the previous one in
    /// fewer than this fraction of samples.
    pub early_stop_fraction: f64,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rot: RotConfig::default(),
            filter: FilterConfig::default(),
            train: TrainConfig::default(),
            rounds: 15,
            warmup_epochs: 300,
            eval_each_round: true,
            early_stop_fraction: 0.01,
            seed: 0,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.early_stop_fraction) {
            return Err(Error::Config("early_stop_fraction must be in [0, 1]".into()));
        }
        self.rot.check()?;
        self.filter.check()?;
        self.train.check()
    }

    /// Parses a JSON document; unknown keys are errors, missing keys take
    /// their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded. The output directory
    /// is not part of the hash.
    pub fn config_hash(&self) -> String {
        let canonical = Self { output_dir: None, ..self.clone() };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn train_for_round(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub metrics: Option<MetricsReport>,
    pub clean_count: usize,
    /// Samples whose clean flag differs from the previous round.
    pub clean_changed: usize,
    pub beta: Vec<f64>,
    pub loss: LossBreakdown,
    pub solver_warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub warmup_s: f64,
    pub predict_s: f64,
    pub solve_s: f64,
    pub filter_s: f64,
    pub train_s: f64,
    pub evaluate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub round: usize,
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    pub final_report: Option<MetricsReport>,
    pub checkpoint: Option<PathBuf>,
    pub timings: StageTimings,
    pub failure: Option<Failure>,
}

/// Evaluation inputs: test rows, their labels and the head/medium/tail tags.
struct TestSet {
    x: Array2<f64>,
    labels: Vec<usize>,
    groups: Vec<crate::longtail::Group>,
}

fn test_set(bundle: &DatasetBundle) -> Result<TestSet> {
    let rows = bundle.test_rows();
    if rows.is_empty() {
        return Err(Error::InvalidBundle("bundle has no TEST rows to evaluate".into()));
    }
    Ok(TestSet {
        x: bundle.gather(&rows),
        labels: bundle.test_labels(),
        groups: group_assignment(&bundle.train_class_frequencies_for_evaluation()),
    })
}

fn evaluate_head(head: &HeadParameters, test: &TestSet, k: usize, seed: u64, hash: &str) -> Result<MetricsReport> {
    let pred = predict(head, test.x.view())?;
    MetricsReport::compute(&test.labels, &pred, &test.groups, k, seed, hash.to_string())
}

fn check_bundle(bundle: &DatasetBundle) -> Result<()> {
    let diagnostics = bundle.validate();
    if let Some(d) = diagnostics.first() {
        return Err(Error::InvalidBundle(format!("{d} ({} diagnostics)", diagnostics.len())));
    }
    Ok(())
}

/// Outcome of one round's labeling stage.
struct Labeling {
    pseudo: PseudoLabelSet,
    beta: Vec<f64>,
    warnings: Vec<String>,
}

/// Predict, solve, pin the labeled rows, filter.
fn label_round(
    head: &HeadParameters,
    x: &Array2<f64>,
    labeled: &[(usize, usize)],
    cfg: &PipelineConfig,
    timings: &mut StageTimings,
) -> std::result::Result<Labeling, (&'static str, Error)> {
    let t = Instant::now();
    let fwd = head.forward(x.view()).map_err(|e| ("predict", e))?;
    if let Some(i) = fwd.p.iter().position(|v| !v.is_finite()) {
        return Err(("predict", Error::NonfiniteOutput { row: i / fwd.p.ncols().max(1) }));
    }
    timings.predict_s += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let p = PredictionMatrix::new(fwd.p.clone()).map_err(|e| ("solve", e))?;
    let (plan, trace) = rot::solve(&p, &cfg.rot).map_err(|e| ("solve", e))?;
    timings.solve_s += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut pseudo = rot::pseudo_labels_from_plan(&plan);
    for &(i, c) in labeled {
        pseudo.pin(i, c);
    }
    let beta = plan.beta.to_vec();
    let mut pseudo =
        filter::apply(fwd.p.view(), pseudo, &beta, &cfg.filter, cfg.rot.prob_floor).map_err(|e| ("filter", e))?;
    for &(i, c) in labeled {
        pseudo.pin(i, c);
    }
    timings.filter_s += t.elapsed().as_secs_f64();
    Ok(Labeling { pseudo, beta, warnings: trace.warnings })
}

/// Runs the full loop. Failures inside a round return the record so far
/// with [`RunRecord::failure`] set; setup failures are errors.
pub fn run_pipeline(bundle: &DatasetBundle, cfg: &PipelineConfig) -> Result<RunRecord> {
    cfg.check()?;
    check_bundle(bundle)?;
    let hash = cfg.config_hash();
    let k = bundle.num_classes();
    let train_cfg = cfg.train_for_round();

    let train_rows = bundle.train_rows();
    let data = TrainingSet { x: bundle.gather(&train_rows), x_aug: bundle.gather_augmented(&train_rows) };
    let view = bundle.labeled_known();
    if view.rows.is_empty() {
        return Err(Error::InvalidBundle("no LABELED_KNOWN rows for the warm-up".into()));
    }
    let position: std::collections::HashMap<usize, usize> =
        train_rows.iter().enumerate().map(|(pos, &row)| (row, pos)).collect();
    let labeled: Vec<(usize, usize)> = view.rows.iter().zip(&view.labels).map(|(r, &c)| (position[r], c)).collect();
    let test = test_set(bundle)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = init_head(train_cfg.head_shape(bundle.dim(), k), &mut rng)?;
    let mut record = RunRecord {
        config_hash: hash.clone(),
        seed: cfg.seed,
        rounds: Vec::new(),
        final_report: None,
        checkpoint: None,
        timings: StageTimings::default(),
        failure: None,
    };

    let t = Instant::now();
    let x_labeled = bundle.gather(&view.rows);
    supervised_warmup(&mut head, &mut Optimizer::default(), x_labeled.view(), &view.labels, &train_cfg, cfg.warmup_epochs)?;
    record.timings.warmup_s = t.elapsed().as_secs_f64();
    log::info!("warm-up done on {} labeled rows", view.rows.len());

    let mut opt = Optimizer::default();
    let mut previous_clean: Option<Vec<bool>> = None;
    let mut epoch = 0;
    for round in 0..cfg.rounds {
        let labeling = match label_round(&head, &data.x, &labeled, cfg, &mut record.timings) {
            Ok(l) => l,
            Err((stage, e)) => {
                record.failure = Some(Failure { round, stage: stage.into(), kind: e.kind(), message: e.to_string() });
                return Ok(record);
            }
        };
        for w in &labeling.warnings {
            log::warn!("round {round}: {w}");
        }
        let clean = labeling.pseudo.clean.clone();
        let clean_changed = previous_clean
            .as_ref()
            .map_or(clean.len(), |prev| prev.iter().zip(&clean).filter(|(a, b)| a != b).count());

        let t = Instant::now();
        let mut loss = LossBreakdown::default();
        for _ in 0..train_cfg.epochs {
            match train_epoch(&mut head, &mut opt, &data, &labeling.pseudo, &train_cfg, epoch) {
                Ok(l) => loss = l,
                Err(e) => {
                    record.failure =
                        Some(Failure { round, stage: "train".into(), kind: e.kind(), message: e.to_string() });
                    return Ok(record);
                }
            }
            epoch += 1;
        }
        record.timings.train_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let metrics = if cfg.eval_each_round { Some(evaluate_head(&head, &test, k, cfg.seed, &hash)?) } else { None };
        record.timings.evaluate_s += t.elapsed().as_secs_f64();
        log::info!(
            "round {round}: clean {}/{} (changed {clean_changed}), loss {:.4}, acc {}",
            labeling.pseudo.clean_count(),
            clean.len(),
            loss.l_total,
            metrics.as_ref().map_or("-".to_string(), |m| format!("{:.4}", m.acc))
        );
        record.rounds.push(RoundRecord {
            round,
            metrics,
            clean_count: labeling.pseudo.clean_count(),
            clean_changed,
            beta: labeling.beta,
            loss,
            solver_warnings: labeling.warnings,
        });
        if previous_clean.is_some() && (clean_changed as f64) < cfg.early_stop_fraction * clean.len() as f64 {
            log::info!("clean set stable after round {round}; stopping");
            break;
        }
        previous_clean = Some(clean);
    }

    let t = Instant::now();
    record.final_report = Some(evaluate_head(&head, &test, k, cfg.seed, &hash)?);
    record.timings.evaluate_s += t.elapsed().as_secs_f64();
    if let Some(dir) = &cfg.output_dir {
        let path = dir.join("head");
        save_head(&head, &path)?;
        record.checkpoint = Some(path);
    }
    Ok(record)
}

/// k-means on the raw test embeddings with `k` clusters, scored like the
/// pipeline.
pub fn run_baseline_kmeans(bundle: &DatasetBundle, k: usize, seed: u64, config_hash: &str) -> Result<MetricsReport> {
    check_bundle(bundle)?;
    let test = test_set(bundle)?;
    let km = kmeans(test.x.view(), k, seed, 300, 1e-8)?;
    MetricsReport::compute(
        &test.labels,
        &km.partition.assignment,
        &test.groups,
        bundle.num_classes(),
        seed,
        config_hash.to_string(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Omega,
    Lambda2,
    Gamma,
    KnownRatio,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omega" => Ok(SweepAxis::Omega),
            "lambda2" => Ok(SweepAxis::Lambda2),
            "gamma" => Ok(SweepAxis::Gamma),
            "known_ratio" => Ok(SweepAxis::KnownRatio),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Omega => "omega",
            SweepAxis::Lambda2 => "lambda2",
            SweepAxis::Gamma => "gamma",
            SweepAxis::KnownRatio => "known_ratio",
        }
    }

    /// Whether each value needs a freshly sampled benchmark.
    pub fn resamples(self) -> bool {
        matches!(self, SweepAxis::Gamma | SweepAxis::KnownRatio)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub axis: SweepAxis,
    pub value: f64,
    pub record: RunRecord,
}

/// One run per value with a shared seed. For `gamma` and `known_ratio` the
/// bundle is the balanced source and `spec` the sampler settings; each value
/// draws its own long-tailed split.
pub fn sweep(
    bundle: &DatasetBundle,
    cfg: &PipelineConfig,
    axis: SweepAxis,
    values: &[f64],
    spec: Option<&LongTailSpec>,
) -> Result<Vec<SweepEntry>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if axis.resamples() && spec.is_none() {
        return Err(Error::Config(format!("sweeping {} needs long-tail sampler settings", axis.as_str())));
    }
    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        let mut run_cfg = cfg.clone();
        if let Some(dir) = &cfg.output_dir {
            run_cfg.output_dir = Some(dir.join(format!("{}={value}", axis.as_str())));
        }
        let sampled;
        let target = match axis {
            SweepAxis::Omega => {
                run_cfg.train.omega = value;
                bundle
            }
            SweepAxis::Lambda2 => {
                run_cfg.rot.lambda2 = value;
                bundle
            }
            SweepAxis::Gamma | SweepAxis::KnownRatio => {
                let mut s = spec.expect("checked above").clone();
                if axis == SweepAxis::Gamma {
                    s.gamma = value;
                } else {
                    s.known_ratio = value;
                }
                sampled = sample_longtail(bundle, &s)?;
                &sampled
            }
        };
        log::info!("sweep {}={value}", axis.as_str());
        let record = run_pipeline(target, &run_cfg)?;
        out.push(SweepEntry { axis, value, record });
    }
    Ok(out)
}

pub const REPORT_JSON: &str = "report.json";
pub const RECORD_JSON: &str = "record.json";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const CURVES_TSV: &str = "curves.tsv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

/// Per-round table: one line per round.
pub fn rounds_csv(record: &RunRecord) -> String {
    let mut out = String::from("round,acc,nmi,ari,head_acc,medium_acc,tail_acc,clean_count,clean_changed,l_cwcl,l_iwcl,l_ce,l_total\n");
    for r in &record.rounds {
        let m = r.metrics.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            fmt_opt(m.map(|m| m.acc)),
            fmt_opt(m.map(|m| m.nmi)),
            fmt_opt(m.map(|m| m.ari)),
            fmt_opt(m.and_then(|m| m.group_acc.head)),
            fmt_opt(m.and_then(|m| m.group_acc.medium)),
            fmt_opt(m.and_then(|m| m.group_acc.tail)),
            r.clean_count,
            r.clean_changed,
            r.loss.l_cwcl,
            r.loss.l_iwcl,
            r.loss.l_ce,
            r.loss.l_total
        );
    }
    out
}

/// Plot-ready long format: `series<TAB>x<TAB>y`.
pub fn curves_tsv(record: &RunRecord) -> String {
    let mut out = String::from("series\tx\ty\n");
    let series: [(&str, fn(&RoundRecord) -> Option<f64>); 5] = [
        ("acc", |r| r.metrics.as_ref().map(|m| m.acc)),
        ("nmi", |r| r.metrics.as_ref().map(|m| m.nmi)),
        ("ari", |r| r.metrics.as_ref().map(|m| m.ari)),
        ("clean_count", |r| Some(r.clean_count as f64)),
        ("l_total", |r| Some(r.loss.l_total)),
    ];
    for (name, f) in series {
        for r in &record.rounds {
            if let Some(y) = f(r) {
                let _ = writeln!(out, "{name}\t{}\t{y}", r.round);
            }
        }
    }
    out
}

/// Collated sweep table, one row per (metric, value).
pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut out = String::from("metric,axis,value,score\n");
    let metrics: [(&str, fn(&MetricsReport) -> Option<f64>); 6] = [
        ("acc", |m| Some(m.acc)),
        ("nmi", |m| Some(m.nmi)),
        ("ari", |m| Some(m.ari)),
        ("head_acc", |m| m.group_acc.head),
        ("medium_acc", |m| m.group_acc.medium),
        ("tail_acc", |m| m.group_acc.tail),
    ];
    for (name, f) in metrics {
        for e in entries {
            let score = e.record.final_report.as_ref().and_then(f);
            let _ = writeln!(out, "{name},{},{},{}", e.axis.as_str(), e.value, fmt_opt(score));
        }
    }
    out
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes `record.json`, `report.json` (final metrics only), `rounds.csv`
/// and `curves.tsv`.
pub fn write_run_report(record: &RunRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RECORD_JSON), to_json(record)?)?;
    if let Some(report) = &record.final_report {
        fs::write(dir.join(REPORT_JSON), to_json(report)?)?;
    }
    fs::write(dir.join(ROUNDS_CSV), rounds_csv(record))?;
    fs::write(dir.join(CURVES_TSV), curves_tsv(record))?;
    Ok(())
}

/// Writes `sweep.json` (all entries) and the collated `sweep.csv`.
pub fn write_sweep_report(entries: &[SweepEntry], dir: &Path) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Config("nothing to report".into()));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SWEEP_JSON), to_json(&entries)?)?;
    fs::write(dir.join(SWEEP_CSV), sweep_csv(entries))?;
    Ok(())
}

/// Saved results, as found in a run or sweep output directory.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedResults {
    Run(RunRecord),
    Sweep(Vec<SweepEntry>),
}

pub fn load_results(dir: &Path) -> Result<SavedResults> {
    let sweep = dir.join(SWEEP_JSON);
    if sweep.exists() {
        return Ok(SavedResults::Sweep(serde_json::from_str(&fs::read_to_string(sweep)?)?));
    }
    let record = dir.join(RECORD_JSON);
    if record.exists() {
        return Ok(SavedResults::Run(serde_json::from_str(&fs::read_to_string(record)?)?));
    }
    Err(Error::MissingFile(record))
}

/// Regenerates every report file from saved results.
pub fn report(results: &SavedResults, dir: &Path) -> Result<()> {
    match results {
        SavedResults::Run(r) => write_run_report(r, dir),
        SavedResults::Sweep(e) => write_sweep_report(e, dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(PipelineConfig::from_json(r#"{"rounds": 2, "bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_json(r#"{"rot": {"lambda3": 1}}"#), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_json(r#"{"rounds": 0}"#), Err(Error::Config(_))));
        let cfg = PipelineConfig::from_json(r#"{"rounds": 2, "train": {"omega": 0.25}}"#).unwrap();
        assert_eq!(cfg.rounds, 2);
        assert_eq!(cfg.train.omega, 0.25);
        assert_eq!(cfg.rot, RotConfig::default());
    }

    #[test]
    fn hash_tracks_content_not_output_dir() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { output_dir: Some("/tmp/x".into()), ..a.clone() };
        let c = PipelineConfig { seed: 1, ..a.clone() };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn sweep_axis_names() {
        for axis in [SweepAxis::Omega, SweepAxis::Lambda2, SweepAxis::Gamma, SweepAxis::KnownRatio] {
            assert_eq!(axis.as_str().parse::<SweepAxis>().unwrap(), axis);
        }
    }
}
