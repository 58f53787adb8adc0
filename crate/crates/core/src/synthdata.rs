//! Imbalanced binary datasets with a planted confounder.
//!
//! Each sample carries a label `Y`, a confounder indicator `C` and a feature
//! vector. One feature is causal and encodes `Y`; the spurious features encode
//! `C`; any remaining features are inert noise. The confounder is assigned to
//! an exact number of samples per class (`round(prevalence · class_size)`),
//! so the observed prevalence is exact rather than sampled.
//!
//! Feature encodings:
//!
//! * binary: causal = `Y`, spurious = `C`, inert = fair coin.
//! * continuous: causal = `±1 + ε`, spurious = `±1 + ε`, inert = `ε` with
//!   `ε ~ N(0, noise_std²)`. The causal noise is redrawn whenever `|ε| ≥ 1`
//!   so the sign of the causal feature always equals the label.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, rng_from_seed, LabRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub causal_index: usize,
    pub spurious_indices: Vec<usize>,
    pub prevalence_pos: f64,
    pub prevalence_neg: f64,
    pub noise_std: f64,
    pub feature_mode: FeatureMode,
    pub seed: u64,
}

impl DatasetSpec {
    /// Two binary features: causal at index 0, spurious at index 1.
    pub fn two_feature_binary(n: usize, k: usize, prevalence_pos: f64, prevalence_neg: f64, seed: u64) -> Self {
        Self {
            n,
            k,
            dim: 2,
            causal_index: 0,
            spurious_indices: vec![1],
            prevalence_pos,
            prevalence_neg,
            noise_std: 0.0,
            feature_mode: FeatureMode::Binary,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("dataset spec", r));
        if self.n == 0 || self.k == 0 {
            return bad(format!("n and k must be positive (n={}, k={})", self.n, self.k));
        }
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.causal_index >= self.dim {
            return bad(format!(
                "causal index {} out of range for dim {}",
                self.causal_index, self.dim
            ));
        }
        let mut seen = vec![false; self.dim];
        seen[self.causal_index] = true;
        for &j in &self.spurious_indices {
            if j >= self.dim {
                return bad(format!("spurious index {j} out of range for dim {}", self.dim));
            }
            if j == self.causal_index {
                return bad(format!("index {j} is both causal and spurious"));
            }
            if seen[j] {
                return bad(format!("spurious index {j} listed twice"));
            }
            seen[j] = true;
        }
        for (name, p) in [
            ("prevalence_pos", self.prevalence_pos),
            ("prevalence_neg", self.prevalence_neg),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            ));
        }
        Ok(())
    }

    pub fn negatives(&self) -> usize {
        self.n * self.k
    }

    /// Number of positives and negatives carrying the confounder.
    pub fn confounded_counts(&self) -> Result<(usize, usize)> {
        let pos = exact_count(self.prevalence_pos, self.n)?;
        let neg = exact_count(self.prevalence_neg, self.negatives())?;
        Ok((pos, neg))
    }

    /// Feature threshold separating the two causal class means.
    pub fn causal_threshold(&self) -> f64 {
        match self.feature_mode {
            FeatureMode::Binary => 0.5,
            FeatureMode::Continuous => 0.0,
        }
    }
}

fn exact_count(prevalence: f64, count: usize) -> Result<usize> {
    let c = (prevalence * count as f64).round();
    if !(0.0..=count as f64).contains(&c) {
        return Err(Error::invalid(
            "dataset spec",
            format!("round({prevalence} · {count}) = {c} is not a valid count"),
        ));
    }
    Ok(c as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Counterfactual,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Original => "original",
            Origin::Counterfactual => "counterfactual",
        }
    }
}

impl std::str::FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "original" => Ok(Origin::Original),
            "counterfactual" => Ok(Origin::Counterfactual),
            other => Err(format!("unknown origin {other:?}")),
        }
    }
}

/// A `(label, confounder)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub label: u8,
    pub confounder: u8,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group {
            label: 0,
            confounder: 0,
        },
        Group {
            label: 0,
            confounder: 1,
        },
        Group {
            label: 1,
            confounder: 0,
        },
        Group {
            label: 1,
            confounder: 1,
        },
    ];

    pub fn new(label: u8, confounder: u8) -> Self {
        Self { label, confounder }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "y{}c{}", self.label, self.confounder)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: u8,
    pub confounder: u8,
    pub origin: Origin,
}

impl Sample {
    pub fn group(&self) -> Group {
        Group::new(self.label, self.confounder)
    }
}

/// Sample counts per `(label, confounder)` group, indexed `[label][confounder]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts(pub [[usize; 2]; 2]);

impl GroupCounts {
    pub fn get(&self, g: Group) -> usize {
        self.0[g.label as usize][g.confounder as usize]
    }

    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }

    pub fn class(&self, label: u8) -> usize {
        self.0[label as usize].iter().sum()
    }

    fn of(samples: &[Sample]) -> Self {
        let mut counts = GroupCounts::default();
        for s in samples {
            counts.0[s.label as usize][s.confounder as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
    pub group_counts: GroupCounts,
}

impl LabeledDataset {
    pub fn from_samples(spec: DatasetSpec, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.features.len() != spec.dim {
                return Err(Error::invalid(
                    "sample",
                    format!(
                        "sample {} has {} features, expected {}",
                        s.id,
                        s.features.len(),
                        spec.dim
                    ),
                ));
            }
            if s.label > 1 || s.confounder > 1 {
                return Err(Error::invalid(
                    "sample",
                    format!("sample {} has a non-binary label or confounder", s.id),
                ));
            }
        }
        let group_counts = GroupCounts::of(&samples);
        Ok(Self {
            spec,
            samples,
            group_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn confounders(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.confounder).collect()
    }

    pub fn max_id(&self) -> Option<u64> {
        self.samples.iter().map(|s| s.id).max()
    }

    /// Concatenation with `extra`; ids must stay unique.
    pub fn union(&self, extra: &[Sample]) -> Result<LabeledDataset> {
        let mut ids: std::collections::HashSet<u64> = self.samples.iter().map(|s| s.id).collect();
        for s in extra {
            if !ids.insert(s.id) {
                return Err(Error::invalid("dataset union", format!("duplicate sample id {}", s.id)));
            }
        }
        let mut samples = self.samples.clone();
        samples.extend_from_slice(extra);
        LabeledDataset::from_samples(self.spec.clone(), samples)
    }
}

/// Generates the dataset described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let (pos_confounded, neg_confounded) = spec.confounded_counts()?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, "synthdata/generate"));
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid("dataset spec", e.to_string()))?;

    let mut samples = Vec::with_capacity(spec.n + spec.negatives());
    for (label, count, confounded) in [(1u8, spec.n, pos_confounded), (0u8, spec.negatives(), neg_confounded)] {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        let mut confounder = vec![0u8; count];
        for &i in order.iter().take(confounded) {
            confounder[i] = 1;
        }
        for c in confounder {
            let features = draw_features(spec, label, c, &noise, &mut rng);
            samples.push(Sample {
                id: 0,
                features,
                label,
                confounder: c,
                origin: Origin::Original,
            });
        }
    }
    samples.shuffle(&mut rng);
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = i as u64;
    }
    LabeledDataset::from_samples(spec.clone(), samples)
}

fn draw_features(spec: &DatasetSpec, label: u8, confounder: u8, noise: &Normal<f64>, rng: &mut LabRng) -> Vec<f64> {
    let sign = |bit: u8| if bit == 1 { 1.0 } else { -1.0 };
    let continuous = spec.feature_mode == FeatureMode::Continuous;
    let eps = |rng: &mut LabRng| if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };

    let mut features = vec![0.0; spec.dim];
    for slot in features.iter_mut() {
        *slot = if continuous {
            eps(rng)
        } else {
            f64::from(u8::from(rng.random::<bool>()))
        };
    }
    if continuous {
        let mut e = eps(rng);
        while e.abs() >= 1.0 {
            e = eps(rng);
        }
        features[spec.causal_index] = sign(label) + e;
        for &j in &spec.spurious_indices {
            features[j] += sign(confounder);
        }
    } else {
        features[spec.causal_index] = f64::from(label);
        for &j in &spec.spurious_indices {
            features[j] = f64::from(confounder);
        }
    }
    features
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self::new(0.8, 0.1, 0.1)
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Group-stratified train/validation/test split.
///
/// Within each `(Y, C)` group the members are shuffled, `round(m·val)` go to
/// validation, `round(m·test)` to test and the rest to training. With
/// `require_validation`, any nonempty group left without a validation member
/// is an error, since early stopping needs every group represented.
pub fn split(
    dataset: &LabeledDataset,
    fractions: SplitFractions,
    seed: u64,
    require_validation: bool,
) -> Result<Split> {
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "split fractions",
            format!("({train}, {val}, {test}) must lie in [0, 1] and sum to 1"),
        ));
    }

    let mut by_group: BTreeMap<Group, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_group.entry(s.group()).or_default().push(i);
    }

    let mut rng = rng_from_seed(derive_seed(seed, "synthdata/split"));
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (group, mut members) in by_group {
        members.shuffle(&mut rng);
        let m = members.len();
        let n_val = ((m as f64) * val).round() as usize;
        let n_test = (((m as f64) * test).round() as usize).min(m - n_val.min(m));
        let n_val = n_val.min(m);
        if require_validation && n_val == 0 {
            return Err(Error::invalid(
                "split fractions",
                format!("group {group} ({m} samples) would have no validation members"),
            ));
        }
        va.extend_from_slice(&members[..n_val]);
        te.extend_from_slice(&members[n_val..n_val + n_test]);
        tr.extend_from_slice(&members[n_val + n_test..]);
    }

    let take = |mut idx: Vec<usize>| {
        idx.sort_unstable();
        let samples = idx.into_iter().map(|i| dataset.samples[i].clone()).collect();
        LabeledDataset::from_samples(dataset.spec.clone(), samples)
    };
    Ok(Split {
        train: take(tr)?,
        val: take(va)?,
        test: take(te)?,
    })
}

/// A pure labeling function over feature vectors.
pub trait Labeler: Send + Sync {
    fn label(&self, features: &[f64]) -> u8;
}

/// Ground-truth labeler: thresholds the causal feature and ignores the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalOracle {
    pub causal_index: usize,
    pub threshold: f64,
}

impl Labeler for CausalOracle {
    fn label(&self, features: &[f64]) -> u8 {
        u8::from(features[self.causal_index] > self.threshold)
    }
}

pub fn oracle_label_fn(spec: &DatasetSpec) -> CausalOracle {
    CausalOracle {
        causal_index: spec.causal_index,
        threshold: spec.causal_threshold(),
    }
}

fn spec_sidecar(path: &Path) -> PathBuf {
    path.with_extension("spec.json")
}

/// Writes the dataset as CSV plus a `.spec.json` sidecar holding the spec.
pub fn store(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["id".to_string(), "label".into(), "confounder".into(), "origin".into()];
    header.extend((0..dataset.dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for s in &dataset.samples {
        w.write_record(sample_record(s))?;
    }
    w.flush()?;
    let mut sidecar = BufWriter::new(File::create(spec_sidecar(path))?);
    serde_json::to_writer_pretty(&mut sidecar, &dataset.spec)?;
    sidecar.write_all(b"\n")?;
    Ok(())
}

pub(crate) fn sample_record(s: &Sample) -> Vec<String> {
    let mut row = vec![
        s.id.to_string(),
        s.label.to_string(),
        s.confounder.to_string(),
        s.origin.as_str().to_string(),
    ];
    // `Display` for f64 is the shortest representation that round-trips.
    row.extend(s.features.iter().map(|v| v.to_string()));
    row
}

pub fn load(path: &Path) -> Result<LabeledDataset> {
    let spec: DatasetSpec = serde_json::from_reader(BufReader::new(File::open(spec_sidecar(path))?))?;
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let header = r.headers()?.clone();
    let dim = header.len().saturating_sub(4);
    if header.iter().take(4).ne(["id", "label", "confounder", "origin"]) || dim != spec.dim {
        return Err(Error::format(path, "unexpected header"));
    }
    let bad = |line: usize, what: &str| Error::format(path, format!("line {line}: bad {what}"));
    let mut samples = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let features = (4..4 + dim)
            .map(|j| field(j).parse::<f64>().map_err(|_| bad(line, "feature")))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id: field(0).parse().map_err(|_| bad(line, "id"))?,
            label: field(1).parse().map_err(|_| bad(line, "label"))?,
            confounder: field(2).parse().map_err(|_| bad(line, "confounder"))?,
            origin: field(3).parse().map_err(|_| bad(line, "origin"))?,
            features,
        });
    }
    LabeledDataset::from_samples(spec, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn confounded(n: usize, k: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            n,
            k,
            dim: 6,
            causal_index: 0,
            spurious_indices: vec![1, 2],
            prevalence_pos: 0.9,
            prevalence_neg: 0.1,
            noise_std: 0.5,
            feature_mode: FeatureMode::Continuous,
            seed,
        }
    }

    #[test]
    fn class_counts_are_exact() {
        let d = generate(&confounded(100, 30, 1)).unwrap();
        assert_eq!(d.group_counts.class(1), 100);
        assert_eq!(d.group_counts.class(0), 3000);
        assert_eq!(d.len(), 3100);
    }

    #[test]
    fn group_counts_follow_prevalence() {
        let d = generate(&confounded(100, 10, 1)).unwrap();
        let c = d.group_counts;
        assert_eq!(c.get(Group::new(1, 1)), 90);
        assert_eq!(c.get(Group::new(1, 0)), 10);
        assert_eq!(c.get(Group::new(0, 1)), 100);
        assert_eq!(c.get(Group::new(0, 0)), 900);
        assert_eq!(c.total(), 1100);
    }

    #[test]
    fn degenerate_allocation() {
        let d = generate(&DatasetSpec::two_feature_binary(1, 1, 1.0, 0.0, 0)).unwrap();
        let pos = d.samples.iter().find(|s| s.label == 1).unwrap();
        let neg = d.samples.iter().find(|s| s.label == 0).unwrap();
        assert_eq!((pos.confounder, neg.confounder), (1, 0));
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = confounded(10, 2, 0);
        s.spurious_indices = vec![0];
        assert!(generate(&s).is_err());
        let mut s = confounded(10, 2, 0);
        s.prevalence_pos = 1.2;
        assert!(generate(&s).is_err());
        let mut s = confounded(10, 2, 0);
        s.dim = 2;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn binary_mode_prevalence_is_exact() {
        let spec = DatasetSpec {
            dim: 5,
            ..DatasetSpec::two_feature_binary(40, 5, 0.75, 0.2, 3)
        };
        let d = generate(&spec).unwrap();
        for (label, p) in [(1u8, 0.75), (0u8, 0.2)] {
            let members: Vec<_> = d.samples.iter().filter(|s| s.label == label).collect();
            let on = members.iter().filter(|s| s.features[1] == 1.0).count();
            assert_eq!(on as f64 / members.len() as f64, p);
        }
    }

    #[test]
    fn causal_feature_is_perfect_under_oracle() {
        for mode in [FeatureMode::Binary, FeatureMode::Continuous] {
            let spec = DatasetSpec {
                feature_mode: mode,
                ..confounded(50, 20, 9)
            };
            let d = generate(&spec).unwrap();
            let oracle = oracle_label_fn(&spec);
            assert!(d.samples.iter().all(|s| oracle.label(&s.features) == s.label));
        }
    }

    #[test]
    fn oracle_ignores_spurious_features() {
        let spec = confounded(10, 1, 0);
        let o = oracle_label_fn(&spec);
        assert_eq!(o.label(&[0.8, -1.0, -1.0, 0.0, 0.0, 0.0]), 1);
        assert_eq!(o.label(&[-0.8, 1.0, 1.0, 0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate(&confounded(30, 4, 77)).unwrap();
        let b = generate(&confounded(30, 4, 77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stratified_split_sizes() {
        let d = generate(&confounded(100, 30, 2)).unwrap();
        let s = split(&d, SplitFractions::default(), 4, true).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2480, 310, 310));

        let mut ids: Vec<u64> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|p| p.samples.iter().map(|x| x.id))
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..3100).collect::<Vec<u64>>());

        for g in Group::ALL {
            let whole = d.group_counts.get(g) as f64;
            assert!((s.val.group_counts.get(g) as f64 - 0.1 * whole).abs() <= 0.5);
        }
    }

    #[test]
    fn split_rejects_empty_validation() {
        let d = generate(&confounded(100, 3, 2)).unwrap();
        assert!(split(&d, SplitFractions::new(1.0, 0.0, 0.0), 4, true).is_err());
        assert!(split(&d, SplitFractions::new(0.5, 0.2, 0.2), 4, true).is_err());
        assert!(split(&d, SplitFractions::new(1.0, 0.0, 0.0), 4, false).is_ok());
    }

    #[test]
    fn split_is_deterministic() {
        let d = generate(&confounded(20, 5, 2)).unwrap();
        let ids = |s: &Split| s.val.samples.iter().map(|x| x.id).collect::<Vec<_>>();
        let a = split(&d, SplitFractions::default(), 8, false).unwrap();
        let b = split(&d, SplitFractions::default(), 8, false).unwrap();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = generate(&confounded(20, 3, 5)).unwrap();
        store(&d, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(d, back);
    }
}
