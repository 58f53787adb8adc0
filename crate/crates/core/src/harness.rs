//! Experiment grids: methods × (n, k) cells × seeds, with CSV reports.
//!
//! Every `(cell, seed)` pair generates its own dataset and split. All methods
//! in that pair share the split, the evaluation set and the initialization,
//! so method comparisons are paired. CFKD starts from the CE+BB classifier
//! of the same pair. Sub-seeds come from [`derive_seed`] with a purpose tag
//! that names the cell.
//!
//! Failures never abort a grid: a failing `(cell, seed, method)` becomes an
//! error row.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfkd::{self, detect_ch, CfkdConfig, CfkdReport, ChDetection, SubsetStrategy, TeacherMode};
use crate::evalmetrics::{evaluate, GroupedEval, MetricRow, METRIC_COLUMNS};
use crate::explainer::ExplainerConfig;
use crate::learner::{train, Architecture, Classifier, Loss, ModelConfig, TrainConfig};
use crate::rng::{derive_seed, rng_from_seed};
use crate::synthdata::{
    generate, oracle_label_fn, split, DatasetSpec, FeatureMode, LabeledDataset, Split, SplitFractions,
};
use crate::teacher::OracleTeacher;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "CE+BB")]
    CeBb,
    #[serde(rename = "FL")]
    Fl,
    #[serde(rename = "CFKD")]
    Cfkd,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ce, Method::CeBb, Method::Fl, Method::Cfkd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ce => "CE",
            Method::CeBb => "CE+BB",
            Method::Fl => "FL",
            Method::Cfkd => "CFKD",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n: Vec<usize>,
    pub k: Vec<usize>,
    pub prevalence_pos: f64,
    pub prevalence_neg: f64,
    pub feature_mode: FeatureMode,
    pub dim: usize,
    #[serde(default)]
    pub causal_index: usize,
    pub spurious_indices: Vec<usize>,
    pub noise_std: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n: vec![100],
            k: vec![10, 20, 30],
            prevalence_pos: 0.9,
            prevalence_neg: 0.1,
            feature_mode: FeatureMode::Continuous,
            dim: 6,
            causal_index: 0,
            spurious_indices: vec![1, 2, 3],
            noise_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    /// The test part of the cell's split.
    Split,
    /// An independent draw from the cell's distribution, `fresh_multiplier`
    /// times the size of the generated dataset.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub source: EvalSource,
    #[serde(default = "default_multiplier")]
    pub fresh_multiplier: usize,
    /// Evaluate on equally many positives and negatives.
    #[serde(default)]
    pub balanced_test: bool,
}

fn default_multiplier() -> usize {
    10
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            source: EvalSource::Fresh,
            fresh_multiplier: default_multiplier(),
            balanced_test: false,
        }
    }
}

/// CFKD settings of a grid. Unset explainer and fine-tune configs fall back
/// to the architecture default and the base recipe at a tenth of its
/// learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCfkdConfig {
    pub subset_size: usize,
    pub subset_strategy: SubsetStrategy,
    #[serde(default)]
    pub explainer: Option<ExplainerConfig>,
    #[serde(default)]
    pub finetune: Option<TrainConfig>,
    #[serde(default = "default_replication")]
    pub replication: usize,
    #[serde(default = "default_warm_start")]
    pub warm_start: bool,
    #[serde(default = "default_ch_threshold")]
    pub ch_threshold: f64,
}

fn default_replication() -> usize {
    1
}

fn default_warm_start() -> bool {
    true
}

fn default_ch_threshold() -> f64 {
    0.5
}

impl Default for GridCfkdConfig {
    fn default() -> Self {
        Self {
            subset_size: 1000,
            subset_strategy: SubsetStrategy::Stratified,
            explainer: None,
            finetune: None,
            replication: default_replication(),
            warm_start: default_warm_start(),
            ch_threshold: default_ch_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub grid: GridConfig,
    pub split: SplitFractions,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub model: Architecture,
    /// Base recipe for CE; CE+BB turns on balanced batches and FL swaps in
    /// the focal loss.
    pub train: TrainConfig,
    pub focal_gamma: f64,
    pub cfkd: GridCfkdConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            grid: GridConfig::default(),
            split: SplitFractions::default(),
            methods: Method::ALL.to_vec(),
            seeds: (0..10).collect(),
            model: Architecture::Linear,
            train: TrainConfig::default(),
            focal_gamma: crate::learner::loss::DEFAULT_FOCAL_GAMMA,
            cfkd: GridCfkdConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid("experiment config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("experiment config", r));
        if self.grid.n.is_empty() || self.grid.k.is_empty() {
            return bad("grid needs at least one n and one k");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be finite and non-negative");
        }
        if self.eval.source == EvalSource::Fresh && self.eval.fresh_multiplier == 0 {
            return bad("fresh_multiplier must be positive");
        }
        if !(0.0..=1.0).contains(&self.cfkd.ch_threshold) {
            return bad("ch_threshold must lie in [0, 1]");
        }
        self.train.validate()?;
        self.cell_spec(self.grid.n[0], self.grid.k[0], 0).validate()?;
        self.cfkd_config(&ModelConfig {
            architecture: self.model.clone(),
            input_dim: self.grid.dim,
            init_seed: 0,
        })
        .validate()
    }

    /// Canonical form used for the snapshot and digest.
    pub fn snapshot(&self) -> String {
        self.to_toml()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot().as_bytes()))
    }

    fn cell_spec(&self, n: usize, k: usize, seed: u64) -> DatasetSpec {
        let g = &self.grid;
        DatasetSpec {
            n,
            k,
            dim: g.dim,
            causal_index: g.causal_index,
            spurious_indices: g.spurious_indices.clone(),
            prevalence_pos: g.prevalence_pos,
            prevalence_neg: g.prevalence_neg,
            noise_std: g.noise_std,
            feature_mode: g.feature_mode,
            seed,
        }
    }

    fn method_train(&self, method: Method, seed: u64) -> TrainConfig {
        let mut t = TrainConfig {
            seed,
            ..self.train.clone()
        };
        match method {
            Method::Ce => t.balanced_batches = false,
            Method::CeBb | Method::Cfkd => t.balanced_batches = true,
            Method::Fl => {
                t.balanced_batches = false;
                t.loss = Loss::Focal {
                    gamma: self.focal_gamma,
                };
            }
        }
        t
    }

    fn cfkd_config(&self, model: &ModelConfig) -> CfkdConfig {
        let c = &self.cfkd;
        CfkdConfig {
            subset_size: c.subset_size,
            subset_strategy: c.subset_strategy,
            explainer: c
                .explainer
                .clone()
                .unwrap_or_else(|| cfkd::default_explainer_for(model)),
            finetune: c
                .finetune
                .clone()
                .unwrap_or_else(|| self.method_train(Method::CeBb, 0).for_finetune()),
            teacher_mode: TeacherMode::Oracle,
            seed: 0,
            replication: c.replication,
            warm_start: c.warm_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metrics: MetricRow,
    /// `ok`, or `error: <reason>`.
    pub status: String,
}

impl ReportRow {
    pub fn is_error(&self) -> bool {
        self.status != "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CfkdSummary {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub report: CfkdReport,
    pub detection: ChDetection,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub test_set: &'static str,
    pub rows: Vec<ReportRow>,
    pub cfkd: Vec<CfkdSummary>,
}

impl ExperimentReport {
    pub fn error_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.is_error()).count()
    }

    pub fn row(&self, n: usize, k: usize, method: Method, seed: u64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.metrics.n == n && r.metrics.k == k && r.metrics.method == method.as_str() && r.metrics.seed == seed
        })
    }

    pub fn eval(&self, n: usize, k: usize, method: Method, seed: u64) -> Option<&GroupedEval> {
        self.row(n, k, method, seed).and_then(|r| r.metrics.eval.as_ref())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = METRIC_COLUMNS.to_vec();
        header.extend(["test_set", "config_digest", "status"]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut fields = r.metrics.fields();
            fields.extend([self.test_set.to_string(), self.config_digest.clone(), r.status.clone()]);
            w.write_record(&fields)?;
        }
        Ok(
            String::from_utf8(w.into_inner().map_err(|e| Error::invalid("report", e.to_string()))?)
                .expect("csv output is UTF-8"),
        )
    }

    pub fn cfkd_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "n",
            "k",
            "seed",
            "explained",
            "counterfactuals",
            "not_found",
            "skipped",
            "unresolved",
            "true_cf",
            "false_cf",
            "false_cf_rate",
            "ch_flag",
            "implicated",
            "pre_f1",
            "pre_aga",
            "pre_worst_group",
            "post_f1",
            "post_aga",
            "post_worst_group",
        ])?;
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.cfkd {
            let r = &s.report;
            let (flag, implicated) = match &s.detection {
                ChDetection::NoEvidence => ("no_evidence".to_string(), String::new()),
                ChDetection::Clean { .. } => ("clean".into(), String::new()),
                ChDetection::CleverHans { implicated, .. } => (
                    "clever_hans".into(),
                    implicated.iter().map(|j| format!("f{j}")).collect::<Vec<_>>().join(" "),
                ),
            };
            w.write_record([
                s.n.to_string(),
                s.k.to_string(),
                s.seed.to_string(),
                r.explained_count.to_string(),
                r.counterfactual_count.to_string(),
                r.notfound_count.to_string(),
                r.skipped_count.to_string(),
                r.unresolved_count.to_string(),
                r.true_cf_count.to_string(),
                r.false_cf_count.to_string(),
                num(r.false_cf_rate),
                flag,
                implicated,
                num(r.pre.as_ref().map(|e| e.f1)),
                num(r.pre.as_ref().map(|e| e.aga)),
                num(r.pre.as_ref().map(|e| e.worst_group)),
                num(r.post.as_ref().map(|e| e.f1)),
                num(r.post.as_ref().map(|e| e.aga)),
                num(r.post.as_ref().map(|e| e.worst_group)),
            ])?;
        }
        Ok(
            String::from_utf8(w.into_inner().map_err(|e| Error::invalid("report", e.to_string()))?)
                .expect("csv output is UTF-8"),
        )
    }
}

/// Training, validation and evaluation data of one `(cell, seed)` pair.
pub struct CellData {
    pub split: Split,
    pub eval: LabeledDataset,
}

fn cell_tag(n: usize, k: usize) -> String {
    format!("n{n}/k{k}")
}

/// Builds the data for one `(cell, seed)` pair.
pub fn cell_data(cfg: &ExperimentConfig, n: usize, k: usize, seed: u64) -> Result<CellData> {
    let tag = cell_tag(n, k);
    let spec = cfg.cell_spec(n, k, derive_seed(seed, &format!("harness/data/{tag}")));
    let data = generate(&spec)?;
    let split = split(
        &data,
        cfg.split,
        derive_seed(seed, &format!("harness/split/{tag}")),
        true,
    )?;
    let eval = match cfg.eval.source {
        EvalSource::Split => {
            if cfg.eval.balanced_test {
                balance(&split.test, derive_seed(seed, &format!("harness/balance/{tag}")))?
            } else {
                split.test.clone()
            }
        }
        EvalSource::Fresh => {
            let m = cfg.eval.fresh_multiplier;
            let mut eval_spec = cfg.cell_spec(n * m, k, derive_seed(seed, &format!("harness/eval/{tag}")));
            if cfg.eval.balanced_test {
                eval_spec.k = 1;
            }
            let mut eval = generate(&eval_spec)?;
            // Keep ids disjoint from the training data.
            let offset = data.max_id().map_or(0, |x| x + 1);
            eval.samples.iter_mut().for_each(|s| s.id += offset);
            eval
        }
    };
    if eval.is_empty() {
        return Err(Error::Precondition(format!("empty evaluation set for {tag}")));
    }
    Ok(CellData { split, eval })
}

/// Subsamples the larger class down to the size of the smaller one.
fn balance(data: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let keep = data.group_counts.class(0).min(data.group_counts.class(1));
    let mut rng = rng_from_seed(seed);
    let mut picked = Vec::new();
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].label == label).collect();
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..keep]);
    }
    picked.sort_unstable();
    LabeledDataset::from_samples(
        data.spec.clone(),
        picked.into_iter().map(|i| data.samples[i].clone()).collect(),
    )
}

struct PairOutcome {
    rows: Vec<ReportRow>,
    cfkd: Option<CfkdSummary>,
}

fn run_pair(cfg: &ExperimentConfig, n: usize, k: usize, seed: u64, runs_dir: Option<&Path>) -> PairOutcome {
    let row = |method: Method, outcome: Result<GroupedEval>| {
        let (eval, status) = match outcome {
            Ok(e) => (Some(e), "ok".to_string()),
            Err(e) => {
                warn!("n={n} k={k} seed={seed} {}: {e}", method.as_str());
                (None, format!("error: {e}"))
            }
        };
        ReportRow {
            metrics: MetricRow {
                dataset: cfg.dataset.clone(),
                n,
                k,
                method: method.as_str().into(),
                seed,
                eval,
            },
            status,
        }
    };

    let data = match cell_data(cfg, n, k, seed) {
        Ok(d) => d,
        Err(e) => {
            let msg = e.to_string();
            return PairOutcome {
                rows: cfg
                    .methods
                    .iter()
                    .map(|&m| row(m, Err(Error::Precondition(msg.clone()))))
                    .collect(),
                cfkd: None,
            };
        }
    };

    let tag = cell_tag(n, k);
    let model = ModelConfig {
        architecture: cfg.model.clone(),
        input_dim: cfg.grid.dim,
        init_seed: derive_seed(seed, &format!("harness/init/{tag}")),
    };
    let batch_seed = derive_seed(seed, &format!("harness/batches/{tag}"));
    let fit = |method: Method| {
        train(
            &model,
            &data.split.train,
            &data.split.val,
            &cfg.method_train(method, batch_seed),
        )
    };

    let mut bb: Option<Result<Classifier>> = None;
    let mut rows = Vec::new();
    let mut summary = None;
    for &method in &cfg.methods {
        let outcome = match method {
            Method::Ce | Method::Fl => fit(method).and_then(|c| evaluate(&c, &data.eval)),
            Method::CeBb => {
                let base = bb.get_or_insert_with(|| fit(Method::CeBb));
                clone_result(base).and_then(|c| evaluate(&c, &data.eval))
            }
            Method::Cfkd => {
                let base = bb.get_or_insert_with(|| fit(Method::CeBb));
                clone_result(base).and_then(|base| {
                    let teacher = OracleTeacher {
                        labeler: oracle_label_fn(&data.split.train.spec),
                    };
                    let mut ccfg = cfg.cfkd_config(&model);
                    ccfg.seed = derive_seed(seed, &format!("harness/cfkd/{tag}"));
                    ccfg.finetune.seed = derive_seed(seed, &format!("harness/finetune/{tag}"));
                    let eval_split = Split {
                        train: data.split.train.clone(),
                        val: data.split.val.clone(),
                        test: data.eval.clone(),
                    };
                    let run = cfkd::run_cfkd(&base, &eval_split, &ccfg.explainer, &teacher, &ccfg)?;
                    if let Some(dir) = runs_dir {
                        let d = dir.join(format!("n{n}_k{k}_seed{seed}"));
                        cfkd::write_run_record(&d, &ccfg, &base, &run, &data.split.train)?;
                    }
                    let post = run
                        .report
                        .post
                        .clone()
                        .ok_or_else(|| Error::Precondition("CFKD run without evaluation".into()))?;
                    summary = Some(CfkdSummary {
                        n,
                        k,
                        seed,
                        detection: detect_ch(&run.report, cfg.cfkd.ch_threshold),
                        report: run.report,
                    });
                    Ok(post)
                })
            }
        };
        rows.push(row(method, outcome));
    }
    PairOutcome { rows, cfkd: summary }
}

fn clone_result(r: &Result<Classifier>) -> Result<Classifier> {
    match r {
        Ok(c) => Ok(c.clone()),
        Err(e) => Err(Error::Precondition(format!("base classifier failed: {e}"))),
    }
}

fn method_rank(name: &str) -> usize {
    Method::ALL
        .iter()
        .position(|m| m.as_str() == name)
        .unwrap_or(usize::MAX)
}

/// Runs every `(n, k, seed)` pair in parallel. Rows come back sorted by
/// `(n, k, method, seed)`. When `runs_dir` is given, each CFKD run writes its
/// run record under it.
pub fn run_grid(cfg: &ExperimentConfig, runs_dir: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let config_digest = cfg.digest();
    let mut jobs = Vec::new();
    for &n in &cfg.grid.n {
        for &k in &cfg.grid.k {
            for &seed in &cfg.seeds {
                jobs.push((n, k, seed));
            }
        }
    }
    let methods: Vec<Method> = {
        let mut m = cfg.methods.clone();
        m.sort();
        m.dedup();
        m
    };
    let cfg = &ExperimentConfig { methods, ..cfg.clone() };
    info!("running {} grid pairs", jobs.len());
    let outcomes: Vec<PairOutcome> = if cfg.methods.is_empty() {
        Vec::new()
    } else {
        jobs.par_iter()
            .map(|&(n, k, seed)| run_pair(cfg, n, k, seed, runs_dir))
            .collect()
    };

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for o in outcomes {
        rows.extend(o.rows);
        summaries.extend(o.cfkd);
    }
    rows.sort_by(|a, b| {
        let (a, b) = (&a.metrics, &b.metrics);
        (a.n, a.k, method_rank(&a.method), a.seed)
            .cmp(&(b.n, b.k, method_rank(&b.method), b.seed))
            .then_with(|| a.method.cmp(&b.method))
    });
    summaries.sort_by_key(|s| (s.n, s.k, s.seed));
    Ok(ExperimentReport {
        config_digest,
        test_set: if cfg.eval.balanced_test {
            "balanced"
        } else {
            "imbalanced"
        },
        rows,
        cfkd: summaries,
    })
}

/// Writes `report.csv`, `cfkd_summary.csv` and `config.snapshot` into `out`,
/// plus CFKD run records under `out/runs`.
pub fn run_grid_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    fs::create_dir_all(out)?;
    let runs = out.join("runs");
    let report = run_grid(cfg, cfg.methods.contains(&Method::Cfkd).then_some(runs.as_path()))?;
    fs::write(out.join("config.snapshot"), cfg.snapshot())?;
    fs::write(out.join("report.csv"), report.to_csv()?)?;
    if !report.cfkd.is_empty() {
        fs::write(out.join("cfkd_summary.csv"), report.cfkd_csv()?)?;
    }
    Ok(report)
}

/// Checks that a report's digest matches the snapshot stored beside it.
pub fn verify_digest(snapshot_path: &Path, digest: &str) -> Result<bool> {
    let text = fs::read_to_string(snapshot_path)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())) == digest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationPoint {
    pub k: usize,
    pub seed: u64,
    pub aga: Option<f64>,
    pub worst_group: Option<f64>,
    pub status: String,
}

/// Per-seed trend signs: `rise` is AGA(k_mid) − AGA(k_min) and `drop` is
/// AGA(k_max) − AGA(k_mid). Undefined (None) with fewer than three distinct
/// k values or a missing point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedTrend {
    pub seed: u64,
    pub rise: Option<f64>,
    pub drop: Option<f64>,
}

impl SeedTrend {
    pub fn matches_expected_shape(&self) -> bool {
        matches!((self.rise, self.drop), (Some(r), Some(d)) if r > 0.0 && d < 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KAblation {
    pub n: usize,
    pub k_min: usize,
    pub k_mid: usize,
    pub k_max: usize,
    pub points: Vec<AblationPoint>,
    pub trends: Vec<SeedTrend>,
}

impl KAblation {
    pub fn points_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "k", "seed", "aga", "worst_group", "status"])?;
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.points {
            w.write_record([
                self.n.to_string(),
                p.k.to_string(),
                p.seed.to_string(),
                num(p.aga),
                num(p.worst_group),
                p.status.clone(),
            ])?;
        }
        Ok(
            String::from_utf8(w.into_inner().map_err(|e| Error::invalid("report", e.to_string()))?)
                .expect("csv output is UTF-8"),
        )
    }

    pub fn trend_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "k_min", "k_mid", "k_max", "rise", "drop", "expected_shape"])?;
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into());
        for t in &self.trends {
            w.write_record([
                t.seed.to_string(),
                self.k_min.to_string(),
                self.k_mid.to_string(),
                self.k_max.to_string(),
                num(t.rise),
                num(t.drop),
                t.matches_expected_shape().to_string(),
            ])?;
        }
        Ok(
            String::from_utf8(w.into_inner().map_err(|e| Error::invalid("report", e.to_string()))?)
                .expect("csv output is UTF-8"),
        )
    }
}

/// AGA of the CE+BB classifier for each `(k, seed)` at the grid's first n.
pub fn run_k_ablation(cfg: &ExperimentConfig) -> Result<KAblation> {
    let mut ks = cfg.grid.k.clone();
    ks.sort_unstable();
    ks.dedup();
    let n = *cfg
        .grid
        .n
        .first()
        .ok_or_else(|| Error::invalid("experiment config", "grid needs an n"))?;
    let sub = ExperimentConfig {
        methods: vec![Method::CeBb],
        grid: GridConfig {
            n: vec![n],
            k: ks.clone(),
            ..cfg.grid.clone()
        },
        ..cfg.clone()
    };
    let report = run_grid(&sub, None)?;
    let points: Vec<AblationPoint> = report
        .rows
        .iter()
        .map(|r| AblationPoint {
            k: r.metrics.k,
            seed: r.metrics.seed,
            aga: r.metrics.eval.as_ref().map(|e| e.aga),
            worst_group: r.metrics.eval.as_ref().map(|e| e.worst_group),
            status: r.status.clone(),
        })
        .collect();
    let (k_min, k_mid, k_max) = (ks[0], ks[ks.len() / 2], ks[ks.len() - 1]);
    let aga_at = |k: usize, seed: u64| points.iter().find(|p| p.k == k && p.seed == seed).and_then(|p| p.aga);
    let defined = ks.len() >= 3;
    let trends = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let (lo, mid, hi) = (aga_at(k_min, seed), aga_at(k_mid, seed), aga_at(k_max, seed));
            SeedTrend {
                seed,
                rise: lo.zip(mid).filter(|_| defined).map(|(a, b)| b - a),
                drop: mid.zip(hi).filter(|_| defined).map(|(a, b)| b - a),
            }
        })
        .collect();
    Ok(KAblation {
        n,
        k_min,
        k_mid,
        k_max,
        points,
        trends,
    })
}

/// Median of the finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

/// Output directory layout of a CLI `run`.
pub fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("report.csv"), out.join("config.snapshot"))
}
