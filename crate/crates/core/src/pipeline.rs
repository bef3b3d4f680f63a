//! Orchestration: scene generation, candidate detection and labelling,
//! examinee-level splits, both training stages, evaluation and persistence.
//!
//! Output directory layout:
//!
//! ```text
//! config.json          config echo
//! manifest.json        seed, config hash, artifact list
//! dataset/samples.json sample records, split assignment, detection stats
//! dataset/patches.bin  raw RGB patches, one after another in sample order
//! models/*.ckpt        checkpoints
//! reports/*            deterministic reports
//! timing.json          wall-clock measurements (not reproducible)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdtnet::{
    combined_hash, image_tensor, load_submodel, predict_images, save_submodel, train_fusion_head, train_submodel,
    train_submodels, Example, FeatureTable, MDTNetConfig, MDTNetModel, TrainConfig, TrainLog,
};
use crate::metrics::{evaluate, ConfusionMatrix, EvalOptions, EvalSample, EvaluationReport, TimingReport};
use crate::nn::{argmax, softmax, AdamConfig, Architecture, LossSpec, SubModel, SubModelSpec};
use crate::raster::{save_png, Grid, Pixel, RgbImage};
use crate::synthgen::{corrupt_labels, generate_scene, OverVessel, SceneSpec, Severity};
use crate::vesselgraph::{detect_crossing_candidates, refine_av_map, skeletonize, DetectParams};

/// Allowed deviation of a split's sample share from its target ratio.
pub const SPLIT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Which examinee went where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub examinees: BTreeMap<u64, Split>,
    /// Sample counts in train, val, test order.
    pub sizes: [usize; 3],
    pub ratios: [f64; 3],
    /// Ratio violations beyond [`SPLIT_TOLERANCE`].
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn split_of(&self, examinee: u64) -> Option<Split> {
        self.examinees.get(&examinee).copied()
    }

    pub fn examinees_in(&self, split: Split) -> BTreeSet<u64> {
        self.examinees.iter().filter(|(_, &s)| s == split).map(|(&e, _)| e).collect()
    }
}

/// Assigns whole examinees to train/val/test. Examinees are shuffled with
/// `seed`, ordered by sample count (largest first, shuffle order breaking
/// ties) and each goes to the split furthest below its target count
/// (lowest split index on ties). `examinees` holds one id per sample.
pub fn split_by_examinee(examinees: &[u64], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|&r| !(r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &e in examinees {
        *counts.entry(e).or_default() += 1;
    }
    if counts.len() < ratios.len() {
        return Err(Error::TooFewExaminees {
            examinees: counts.len(),
            splits: ratios.len(),
        });
    }
    let mut order: Vec<(u64, usize)> = counts.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|a, b| b.1.cmp(&a.1));

    let total = examinees.len() as f64;
    let mut sizes = [0usize; 3];
    let mut assigned = BTreeMap::new();
    for (e, n) in order {
        let mut pick = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &r) in ratios.iter().enumerate() {
            let deficit = r * total - sizes[i] as f64;
            if deficit > best {
                best = deficit;
                pick = i;
            }
        }
        sizes[pick] += n;
        assigned.insert(e, Split::ALL[pick]);
    }
    let warnings = Split::ALL
        .iter()
        .zip(sizes.iter().zip(ratios))
        .filter_map(|(s, (&n, r))| {
            let share = n as f64 / total;
            ((share - r).abs() > SPLIT_TOLERANCE).then(|| {
                format!(
                    "split `{}` holds {:.1}% of samples, target {:.1}% (tolerance {:.0}%)",
                    s.name(),
                    share * 100.0,
                    r * 100.0,
                    SPLIT_TOLERANCE * 100.0
                )
            })
        })
        .collect();
    Ok(SplitAssignment {
        examinees: assigned,
        sizes,
        ratios,
        warnings,
    })
}

/// Fails if any examinee occurs in two of the named groups.
pub fn check_disjoint(groups: &[(&str, &BTreeSet<u64>)]) -> Result<()> {
    for (i, (a_name, a)) in groups.iter().enumerate() {
        for (b_name, b) in &groups[i + 1..] {
            if let Some(&examinee) = a.intersection(b).next() {
                return Err(Error::Contamination {
                    examinee,
                    first: a_name.to_string(),
                    second: b_name.to_string(),
                });
            }
        }
    }
    Ok(())
}

/// A detected crossing candidate with its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: usize,
    pub scene: usize,
    pub examinee: u64,
    /// Candidate centre on the canvas.
    pub center: Pixel,
    /// Canvas coordinate of the patch's top-left pixel.
    pub origin: Pixel,
    pub skeleton_degree: usize,
    /// `true` iff the candidate matches an artery-over crossing.
    pub valid: bool,
    pub severity: Option<Severity>,
    /// Position of the matched ground-truth crossing, if any.
    pub truth: Option<Pixel>,
    /// Stored separately in `patches.bin`.
    #[serde(skip, default = "empty_patch")]
    pub patch: RgbImage,
}

fn empty_patch() -> RgbImage {
    Grid::new(0, 0, [0; 3])
}

impl LabeledSample {
    /// Matched crossing in patch coordinates.
    pub fn truth_in_patch(&self) -> Option<Pixel> {
        self.truth.map(|t| Pixel::new(t.x - self.origin.x, t.y - self.origin.y))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub scenes: usize,
    pub crossings: usize,
    pub candidates: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl DetectionStats {
    fn merge(&mut self, o: &DetectionStats) {
        self.scenes += o.scenes;
        self.crossings += o.crossings;
        self.candidates += o.candidates;
        self.true_positives += o.true_positives;
        self.false_positives += o.false_positives;
        self.missed += o.missed;
    }

    fn finish(&mut self) {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        self.precision = ratio(self.true_positives, self.true_positives + self.false_positives);
        self.recall = ratio(self.crossings - self.missed, self.crossings);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain struct")
    }

    /// Fails unless `found` names the same seed and config hash.
    pub fn check(&self, what: &str, found: &serde_json::Value) -> Result<()> {
        let other: Provenance = serde_json::from_value(found.clone())
            .map_err(|_| Error::Provenance(format!("{what} carries no provenance record")))?;
        if &other != self {
            return Err(Error::Provenance(format!(
                "{what} was produced with seed {} / config {}, expected seed {} / config {}",
                other.seed, other.config_hash, self.seed, self.config_hash
            )));
        }
        Ok(())
    }
}

/// Labelled candidates plus their examinee-level split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub split: SplitAssignment,
    pub detection: DetectionStats,
    pub patch_size: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    provenance: Provenance,
    patch_size: usize,
    detection: DetectionStats,
    split: SplitAssignment,
    samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn split_of(&self, sample: &LabeledSample) -> Split {
        self.split.split_of(sample.examinee).expect("every examinee is assigned")
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.split_of(&self.samples[i]) == split).collect()
    }

    /// Examinee ids of the samples at `indices`.
    pub fn examinees(&self, indices: &[usize]) -> BTreeSet<u64> {
        indices.iter().map(|&i| self.samples[i].examinee).collect()
    }

    /// Contamination guard for a hand-off between stages.
    pub fn check_handoff(&self, train: &[usize], val: &[usize], test: &[usize]) -> Result<()> {
        check_disjoint(&[
            ("train", &self.examinees(train)),
            ("val", &self.examinees(val)),
            ("test", &self.examinees(test)),
        ])
    }

    pub fn save(&self, dir: &Path, provenance: &Provenance) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = DatasetFile {
            provenance: provenance.clone(),
            patch_size: self.patch_size,
            detection: self.detection.clone(),
            split: self.split.clone(),
            samples: self.samples.clone(),
        };
        write_json(&dir.join("samples.json"), &file)?;
        let mut bytes = Vec::with_capacity(self.samples.len() * self.patch_size * self.patch_size * 3);
        for s in &self.samples {
            bytes.extend(s.patch.data().iter().flatten());
        }
        let path = dir.join("patches.bin");
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a dataset and checks it was built under `expected`.
    pub fn load(dir: &Path, expected: &Provenance) -> Result<Self> {
        let file: DatasetFile = read_json(&dir.join("samples.json"))?;
        expected.check("dataset", &file.provenance.to_json())?;
        let path = dir.join("patches.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let s = file.patch_size;
        let per = s * s * 3;
        if bytes.len() != per * file.samples.len() {
            return Err(Error::InvalidConfig(format!(
                "{} holds {} bytes, expected {}",
                path.display(),
                bytes.len(),
                per * file.samples.len()
            )));
        }
        let mut samples = file.samples;
        for (sample, chunk) in samples.iter_mut().zip(bytes.chunks_exact(per)) {
            let px = chunk.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            sample.patch = Grid::from_vec(s, s, px).expect("chunk length matches");
        }
        Ok(Self {
            samples,
            split: file.split,
            detection: file.detection,
            patch_size: s,
        })
    }
}

/// How the grading stage picks its training crossings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradingSource {
    /// Candidates whose validity label is true.
    Annotated,
    /// Candidates the trained validation model accepts (and that carry a
    /// severity label).
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationStage {
    pub model: SubModelSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingStage {
    pub model: MDTNetConfig,
    pub train: TrainConfig,
    pub source: GradingSource,
    /// Focal counts whose fusion is also trained and reported.
    pub ablation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Not part of the config hash.
    pub output_dir: PathBuf,
    pub scenes: usize,
    pub scenes_per_examinee: usize,
    /// Template for every scene; `seed` and `examinee_id` are overwritten.
    pub scene: SceneSpec,
    /// Fraction of vessel pixels whose A/V label is dropped before refinement.
    pub label_noise: f64,
    pub detect: DetectParams,
    pub split_ratios: [f64; 3],
    pub validation: ValidationStage,
    pub grading: GradingStage,
    pub timed_inferences: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let train = TrainConfig {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut mdt = MDTNetConfig::standard(Severity::ALL.len(), 3, 0);
        mdt.fusion.adam.lr = 1e-3;
        Self {
            seed: 0,
            output_dir: PathBuf::from("av-grade-out"),
            scenes: 600,
            scenes_per_examinee: 3,
            scene: SceneSpec::default(),
            label_noise: 0.03,
            detect: DetectParams::for_canvas(512, 64),
            split_ratios: [0.8, 0.1, 0.1],
            validation: ValidationStage {
                model: SubModelSpec::new(Architecture::ConvnetA, LossSpec::cross_entropy(), 31),
                train: train.clone(),
            },
            grading: GradingStage {
                model: mdt,
                train,
                source: GradingSource::Annotated,
                ablation: vec![0, 1, 3],
            },
            timed_inferences: 100,
        }
    }
}

pub const VALIDITY_CLASSES: [&str; 2] = ["false", "true"];

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.scenes == 0 || self.scenes_per_examinee == 0 {
            return bad("scenes and scenes_per_examinee must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!("label_noise must lie in [0, 1], got {}", self.label_noise));
        }
        if self.detect.patch_size < 16 {
            return bad(format!("patch_size must be at least 16, got {}", self.detect.patch_size));
        }
        self.scene.validate()?;
        self.validation.train.validate()?;
        self.validation.model.loss.validate(VALIDITY_CLASSES.len())?;
        self.grading.train.validate()?;
        self.grading.model.validate()?;
        if self.grading.model.num_classes != Severity::ALL.len() {
            return bad("the grading model must have one class per severity grade".into());
        }
        for &n in &self.grading.ablation {
            if n > self.grading.model.focal_specs.len() {
                return bad(format!("ablation n = {n} exceeds the focal sub-model count"));
            }
        }
        if self.split_ratios.iter().any(|&r| !(r >= 0.0)) || (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios must sum to 1, got {:?}", self.split_ratios));
        }
        Ok(())
    }

    /// SHA-256 of the JSON encoding with `output_dir` blanked.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        format!("{:x}", Sha256::digest(bytes))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            config_hash: self.config_hash(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Mixes a salt into the global seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn reseed_spec(spec: &SubModelSpec, seed: u64) -> SubModelSpec {
    SubModelSpec {
        rng_seed: derive_seed(seed, spec.rng_seed),
        ..spec.clone()
    }
}

fn reseed_train(cfg: &TrainConfig, seed: u64, salt: u64) -> TrainConfig {
    let mut c = cfg.clone();
    c.seed = derive_seed(seed, cfg.seed ^ salt);
    c.augment.rng_seed = derive_seed(seed, cfg.augment.rng_seed ^ salt ^ 0xa5);
    c
}

/// The grading ensemble config with every seed mixed with `seed`.
pub fn reseed_mdtnet(cfg: &MDTNetConfig, seed: u64) -> MDTNetConfig {
    let mut c = cfg.clone();
    for s in c.base_specs.iter_mut().chain(c.focal_specs.iter_mut()) {
        *s = reseed_spec(s, seed);
    }
    c.fusion.seed = derive_seed(seed, cfg.fusion.seed);
    c
}

struct SceneOutcome {
    samples: Vec<LabeledSample>,
    stats: DetectionStats,
}

fn process_scene(cfg: &PipelineConfig, index: usize) -> Result<SceneOutcome> {
    let spec = SceneSpec {
        seed: derive_seed(cfg.seed, index as u64),
        examinee_id: (index / cfg.scenes_per_examinee) as u64,
        ..cfg.scene.clone()
    };
    let (map, truth) = generate_scene(&spec)?;
    let raw = corrupt_labels(&map, cfg.label_noise, spec.seed);
    let refined = refine_av_map(&raw, &raw.vessel_mask)?;
    let skel = skeletonize(&refined.vessel_mask);
    let candidates = detect_crossing_candidates(&refined, &skel, spec.cup(), &cfg.detect);
    let d = cfg.detect.merge_distance;
    let eligible: Vec<_> = truth.crossings.iter().filter(|c| !c.in_cup_zone).collect();
    let mut stats = DetectionStats {
        scenes: 1,
        crossings: eligible.len(),
        candidates: candidates.len(),
        ..DetectionStats::default()
    };
    stats.missed = eligible
        .iter()
        .filter(|c| !candidates.iter().any(|k| k.center.dist(c.position) <= d))
        .count();
    let samples = candidates
        .into_iter()
        .map(|cand| {
            let matched = eligible
                .iter()
                .filter(|c| c.position.dist(cand.center) <= d)
                .min_by(|a, b| a.position.dist2(cand.center).cmp(&b.position.dist2(cand.center)));
            if matched.is_some() {
                stats.true_positives += 1;
            } else {
                stats.false_positives += 1;
            }
            let valid = matched.is_some_and(|c| c.over_vessel == OverVessel::Artery);
            LabeledSample {
                id: 0,
                scene: index,
                examinee: spec.examinee_id,
                center: cand.center,
                origin: cand.patch.origin,
                skeleton_degree: cand.skeleton_degree,
                valid,
                severity: if valid { matched.and_then(|c| c.severity) } else { None },
                truth: matched.map(|c| c.position),
                patch: cand.patch.rgb,
            }
        })
        .collect();
    Ok(SceneOutcome { samples, stats })
}

/// Generates every scene, detects and labels candidates, and splits by
/// examinee. Scenes are processed in parallel; the result does not depend
/// on the thread count.
pub fn build_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    cfg.validate()?;
    let outcomes = (0..cfg.scenes)
        .into_par_iter()
        .map(|i| process_scene(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut detection = DetectionStats::default();
    let mut samples = Vec::new();
    for o in outcomes {
        detection.merge(&o.stats);
        samples.extend(o.samples);
    }
    detection.finish();
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = i;
    }
    let ids: Vec<u64> = samples.iter().map(|s| s.examinee).collect();
    let split = split_by_examinee(&ids, cfg.split_ratios, derive_seed(cfg.seed, 0x5917))?;
    Ok(Dataset {
        samples,
        split,
        detection,
        patch_size: cfg.detect.patch_size,
    })
}

fn examples<'a>(ds: &'a Dataset, idx: &[usize], label: impl Fn(&LabeledSample) -> usize) -> Vec<Example<'a>> {
    idx.iter().map(|&i| (&ds.samples[i].patch, label(&ds.samples[i]))).collect()
}

fn validity_label(s: &LabeledSample) -> usize {
    s.valid as usize
}

fn severity_label(s: &LabeledSample) -> usize {
    s.severity.map_or(0, Severity::index)
}

/// Train, val and test indices with the contamination guard applied.
pub fn split_indices(ds: &Dataset) -> Result<[Vec<usize>; 3]> {
    let [a, b, c] = Split::ALL.map(|s| ds.indices(s));
    ds.check_handoff(&a, &b, &c)?;
    Ok([a, b, c])
}

/// Stage: crossing-validation classifier (binary, single sub-model).
pub fn train_validation(cfg: &PipelineConfig, ds: &Dataset) -> Result<(SubModel, TrainLog)> {
    let [train, val, _] = split_indices(ds)?;
    let spec = reseed_spec(&cfg.validation.model, cfg.seed);
    let tc = reseed_train(&cfg.validation.train, cfg.seed, 0x7a1);
    train_submodel(
        &spec,
        VALIDITY_CLASSES.len(),
        &examples(ds, &train, validity_label),
        &examples(ds, &val, validity_label),
        &tc,
    )
}

/// Indices of grading samples within `idx`: annotated-true crossings, or
/// those `validator` accepts when the source is [`GradingSource::Predicted`].
pub fn grading_indices(
    ds: &Dataset,
    idx: &[usize],
    source: GradingSource,
    validator: Option<&mut SubModel>,
) -> Result<Vec<usize>> {
    match (source, validator) {
        (GradingSource::Annotated, _) => Ok(idx.iter().copied().filter(|&i| ds.samples[i].valid).collect()),
        (GradingSource::Predicted, Some(v)) => {
            let imgs: Vec<&RgbImage> = idx.iter().map(|&i| &ds.samples[i].patch).collect();
            if imgs.is_empty() {
                return Ok(Vec::new());
            }
            let p = predict_images(v, &imgs)?;
            Ok(idx
                .iter()
                .enumerate()
                .filter(|&(k, &i)| argmax(p.row(k)) == 1 && ds.samples[i].severity.is_some())
                .map(|(_, &i)| i)
                .collect())
        }
        (GradingSource::Predicted, None) => Err(Error::InvalidConfig(
            "grading source `predicted` needs a trained validation model".into(),
        )),
    }
}

/// Grading train/val/test indices. Test is always the annotated-true test
/// crossings so that reports are comparable across sources.
pub fn grading_splits(cfg: &PipelineConfig, ds: &Dataset, mut validator: Option<&mut SubModel>) -> Result<[Vec<usize>; 3]> {
    let [train, val, test] = split_indices(ds)?;
    let source = cfg.grading.source;
    let train = grading_indices(ds, &train, source, validator.as_deref_mut())?;
    let val = grading_indices(ds, &val, source, validator.as_deref_mut())?;
    let test = grading_indices(ds, &test, GradingSource::Annotated, None)?;
    ds.check_handoff(&train, &val, &test)?;
    Ok([train, val, test])
}

/// Stage one of grading: every base and focal sub-model, trained
/// independently. `seed` replaces the global seed.
pub fn train_grading_submodels(
    cfg: &PipelineConfig,
    ds: &Dataset,
    splits: &[Vec<usize>; 3],
    seed: u64,
) -> Result<Vec<(SubModel, TrainLog)>> {
    let mdt = reseed_mdtnet(&cfg.grading.model, seed);
    let specs: Vec<SubModelSpec> = mdt.base_specs.iter().chain(&mdt.focal_specs).cloned().collect();
    let tc = reseed_train(&cfg.grading.train, seed, 0x96ad);
    train_submodels(
        &specs,
        mdt.num_classes,
        &examples(ds, &splits[0], severity_label),
        &examples(ds, &splits[1], severity_label),
        &tc,
    )
}

/// Test-set scores of one fusion variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub n: usize,
    pub accuracy: f64,
    pub kappa: Option<f64>,
    pub val_kappa: Option<f64>,
    pub best_epoch: usize,
}

/// Result of stage two of grading.
pub struct GradingOutcome {
    pub model: MDTNetModel,
    pub fusion_log: TrainLog,
    pub ablation: Vec<AblationPoint>,
}

fn grade_names() -> Vec<String> {
    Severity::ALL.iter().map(|s| s.name().to_string()).collect()
}

/// Stage two of grading: freezes `subs` (base specs then focal specs, as
/// produced by [`train_grading_submodels`]), trains the fusion head for the
/// configured `n` and for every ablation `n` on shared precomputed features.
pub fn train_grading_fusion(
    cfg: &PipelineConfig,
    ds: &Dataset,
    splits: &[Vec<usize>; 3],
    mut subs: Vec<SubModel>,
    seed: u64,
) -> Result<GradingOutcome> {
    let mdt = reseed_mdtnet(&cfg.grading.model, seed);
    let n_base = mdt.base_specs.len();
    if subs.len() != n_base + mdt.focal_specs.len() {
        return Err(Error::InvalidConfig(format!(
            "expected {} grading sub-models, got {}",
            n_base + mdt.focal_specs.len(),
            subs.len()
        )));
    }
    let frozen = combined_hash(&mut subs);
    let tables = splits
        .iter()
        .map(|idx| {
            let imgs: Vec<&RgbImage> = idx.iter().map(|&i| &ds.samples[i].patch).collect();
            FeatureTable::compute(&mut subs, &imgs)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<usize>> = splits
        .iter()
        .map(|idx| idx.iter().map(|&i| severity_label(&ds.samples[i])).collect())
        .collect();

    let mut variants: Vec<usize> = cfg.grading.ablation.clone();
    if !variants.contains(&mdt.n) {
        variants.push(mdt.n);
    }
    let mut ablation = Vec::new();
    let mut chosen = None;
    for &n in &variants {
        let take: Vec<usize> = (0..n_base + n).collect();
        let mut guard = || {
            let now = combined_hash(&mut subs);
            if now != frozen {
                return Err(Error::FrozenParametersChanged {
                    before: frozen.clone(),
                    after: now,
                });
            }
            Ok(())
        };
        let (mut head, log) = train_fusion_head(
            &tables[0].fused(&take)?,
            &labels[0],
            &tables[1].fused(&take)?,
            &labels[1],
            mdt.num_classes,
            &mdt.fusion,
            &mut guard,
        )?;
        let (accuracy, kappa) = if labels[2].is_empty() {
            (0.0, None)
        } else {
            let p = softmax(&head.forward(&tables[2].fused(&take)?)?);
            let preds: Vec<usize> = (0..p.batch()).map(|i| argmax(p.row(i))).collect();
            let cm = ConfusionMatrix::from_predictions(grade_names(), &labels[2], &preds);
            (cm.accuracy().unwrap_or(0.0), crate::metrics::cohens_kappa(&cm)?)
        };
        if cfg.grading.ablation.contains(&n) {
            ablation.push(AblationPoint {
                n,
                accuracy,
                kappa,
                val_kappa: log.epochs[log.best_epoch].val_kappa,
                best_epoch: log.best_epoch,
            });
        }
        if n == mdt.n {
            chosen = Some((head, log));
        }
    }
    let (head, fusion_log) = chosen.expect("configured n is always trained");
    let kept: Vec<SubModel> = subs
        .into_iter()
        .enumerate()
        .filter(|&(i, _)| i < n_base + mdt.n)
        .map(|(_, s)| s)
        .collect();
    let model = MDTNetModel::from_parts(mdt, kept, head)?;
    Ok(GradingOutcome {
        model,
        fusion_log,
        ablation,
    })
}

/// Evaluates a classifier on `idx` through [`evaluate`], with the
/// contamination guard against `train_examinees`.
pub fn evaluate_split<C: crate::metrics::Classifier + ?Sized>(
    model: &mut C,
    ds: &Dataset,
    idx: &[usize],
    label: impl Fn(&LabeledSample) -> usize,
    train_examinees: &BTreeSet<u64>,
    opts: &EvalOptions,
) -> Result<(EvaluationReport, TimingReport)> {
    let inputs = idx
        .iter()
        .map(|&i| image_tensor(&[&ds.samples[i].patch]))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<EvalSample<'_>> = idx
        .iter()
        .zip(&inputs)
        .map(|(&i, input)| EvalSample {
            examinee: ds.samples[i].examinee,
            input,
            label: label(&ds.samples[i]),
        })
        .collect();
    evaluate(model, &samples, train_examinees, opts)
}

/// Grad-CAM localisation over correctly graded crossings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub window: usize,
    pub evaluated: usize,
    pub correct: usize,
    /// Correct patches whose mean heat inside the window beats the outside.
    pub concentrated: usize,
    pub fraction: Option<f64>,
}

/// Side of the square window around the true crossing.
pub const SALIENCY_WINDOW: usize = 21;

pub fn saliency_report(model: &mut MDTNetModel, ds: &Dataset, idx: &[usize]) -> Result<SaliencyReport> {
    let mut correct = 0;
    let mut concentrated = 0;
    for &i in idx {
        let s = &ds.samples[i];
        let Some(center) = s.truth_in_patch() else { continue };
        let (pred, _) = model.predict(&s.patch)?;
        if pred != severity_label(s) {
            continue;
        }
        correct += 1;
        let heat = model.grad_cam(&s.patch, pred)?;
        let (inside, outside) = crate::mdtnet::heat_inside_outside(&heat, center, SALIENCY_WINDOW);
        if inside > outside {
            concentrated += 1;
        }
    }
    Ok(SaliencyReport {
        window: SALIENCY_WINDOW,
        evaluated: idx.len(),
        correct,
        concentrated,
        fraction: (correct > 0).then(|| concentrated as f64 / correct as f64),
    })
}

/// How the validation model and the grader perform in sequence on the
/// test split: true crossings the validator rejects are lost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub true_crossings: usize,
    pub accepted: usize,
    pub graded_correctly: usize,
    pub end_to_end_accuracy: Option<f64>,
}

/// Headline numbers of one run. Contains no timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub provenance: Provenance,
    pub samples: usize,
    pub split_sizes: [usize; 3],
    pub split_warnings: Vec<String>,
    pub detection: DetectionStats,
    pub validation: EvaluationReport,
    pub grading: EvaluationReport,
    pub ablation: Vec<AblationPoint>,
    pub cascade: CascadeReport,
    pub saliency: SaliencyReport,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunTiming {
    pub stage_seconds: BTreeMap<String, f64>,
    pub validation_inference: Option<TimingReport>,
    pub grading_inference: Option<TimingReport>,
}

/// Everything produced by [`run_end_to_end`].
pub struct RunOutcome {
    pub summary: RunSummary,
    pub timing: RunTiming,
    pub dataset: Dataset,
    pub validator: SubModel,
    pub grader: MDTNetModel,
}

/// Fixed paths inside an output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn validator(&self) -> PathBuf {
        self.models().join("validation.ckpt")
    }
    pub fn grading_submodel(&self, i: usize) -> PathBuf {
        self.models().join(format!("grading_sub{i}.ckpt"))
    }
    pub fn grader(&self) -> PathBuf {
        self.models().join("mdtnet.ckpt")
    }
    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.json")
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    use std::io::Write as _;
    crate::error::create_file(path)?
        .write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Loads the persisted dataset when it matches the config, otherwise builds
/// and persists a fresh one.
pub fn prepare_dataset(cfg: &PipelineConfig, layout: &Layout) -> Result<Dataset> {
    let prov = cfg.provenance();
    if layout.dataset().join("samples.json").exists() {
        if let Ok(ds) = Dataset::load(&layout.dataset(), &prov) {
            return Ok(ds);
        }
    }
    let ds = build_dataset(cfg)?;
    ds.save(&layout.dataset(), &prov)?;
    Ok(ds)
}

fn eval_options(cfg: &PipelineConfig, task: &str, class_names: Vec<String>) -> EvalOptions {
    EvalOptions {
        task: task.into(),
        class_names,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        timed_inferences: cfg.timed_inferences,
        contamination_guard: true,
    }
}

/// Evaluates both models on the test split and writes the reports.
pub fn evaluate_models(
    cfg: &PipelineConfig,
    layout: &Layout,
    ds: &Dataset,
    validator: &mut SubModel,
    grader: &mut MDTNetModel,
    ablation: Vec<AblationPoint>,
    timing: &mut RunTiming,
) -> Result<RunSummary> {
    let prov = cfg.provenance();
    let [train, val, test] = split_indices(ds)?;
    let seen: BTreeSet<u64> = ds.examinees(&train).union(&ds.examinees(&val)).copied().collect();
    let names = VALIDITY_CLASSES.iter().map(|s| s.to_string()).collect();
    let (validation, vt) = evaluate_split(
        validator,
        ds,
        &test,
        validity_label,
        &seen,
        &eval_options(cfg, "validation", names),
    )?;
    let [_, _, grade_test] = grading_splits(cfg, ds, Some(validator))?;
    let (grading, gt) = evaluate_split(
        grader,
        ds,
        &grade_test,
        severity_label,
        &seen,
        &eval_options(cfg, "grading", grade_names()),
    )?;
    timing.validation_inference = Some(vt);
    timing.grading_inference = Some(gt);

    let accepted_idx = grading_indices(ds, &grade_test, GradingSource::Predicted, Some(validator))?;
    let mut graded_correctly = 0;
    for &i in &accepted_idx {
        if grader.predict(&ds.samples[i].patch)?.0 == severity_label(&ds.samples[i]) {
            graded_correctly += 1;
        }
    }
    let cascade = CascadeReport {
        true_crossings: grade_test.len(),
        accepted: accepted_idx.len(),
        graded_correctly,
        end_to_end_accuracy: (!grade_test.is_empty()).then(|| graded_correctly as f64 / grade_test.len() as f64),
    };
    let saliency = saliency_report(grader, ds, &grade_test)?;
    let summary = RunSummary {
        provenance: prov,
        samples: ds.samples.len(),
        split_sizes: ds.split.sizes,
        split_warnings: ds.split.warnings.clone(),
        detection: ds.detection.clone(),
        validation,
        grading,
        ablation,
        cascade,
        saliency,
    };
    let dir = layout.reports();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("validation.json"), &summary.validation)?;
    write_text(&dir.join("validation.txt"), &summary.validation.to_text())?;
    write_json(&dir.join("grading.json"), &summary.grading)?;
    write_text(&dir.join("grading.txt"), &summary.grading.to_text())?;
    save_png(&summary.grading.confusion.to_image(24), &dir.join("grading_confusion.png"))?;
    save_png(&summary.validation.confusion.to_image(24), &dir.join("validation_confusion.png"))?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn timed<T>(timing: &mut RunTiming, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    timing.stage_seconds.insert(stage.to_string(), t0.elapsed().as_secs_f64());
    Ok(out)
}

/// generate → detect → label → split → train validation model → train
/// grading sub-models → train fusion → evaluate. Artifacts are written as
/// each stage finishes, so a failure leaves the earlier ones in place; the
/// error names the failing stage.
pub fn run_end_to_end(cfg: &PipelineConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let prov = cfg.provenance();
    let mut timing = RunTiming::default();
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    cfg.save(&layout.root.join("config.json"))?;
    write_json(
        &layout.root.join("manifest.json"),
        &serde_json::json!({
            "provenance": prov,
            "artifacts": ["config.json", "dataset/samples.json", "dataset/patches.bin", "models/validation.ckpt",
                "models/grading_sub*.ckpt", "models/mdtnet.ckpt", "reports/", "timing.json"],
        }),
    )?;

    let ds = timed(&mut timing, "dataset", || {
        let ds = build_dataset(cfg)?;
        ds.save(&layout.dataset(), &prov)?;
        write_json(&layout.reports().join("detection.json"), &ds.detection)?;
        Ok(ds)
    })?;
    let (mut validator, vlog) = timed(&mut timing, "train-validation", || {
        let (mut m, log) = train_validation(cfg, &ds)?;
        save_submodel(&mut m, &layout.validator(), &prov.to_json())?;
        Ok((m, log))
    })?;
    let splits = timed(&mut timing, "grading-split", || grading_splits(cfg, &ds, Some(&mut validator)))?;
    let (subs, sub_logs) = timed(&mut timing, "train-grading", || {
        let trained = train_grading_submodels(cfg, &ds, &splits, cfg.seed)?;
        let mut subs = Vec::new();
        let mut logs = Vec::new();
        for (i, (mut m, log)) in trained.into_iter().enumerate() {
            save_submodel(&mut m, &layout.grading_submodel(i), &prov.to_json())?;
            subs.push(m);
            logs.push(log);
        }
        Ok((subs, logs))
    })?;
    let outcome = timed(&mut timing, "fuse", || {
        let mut o = train_grading_fusion(cfg, &ds, &splits, subs, cfg.seed)?;
        o.model.save(&layout.grader(), &prov.to_json())?;
        Ok(o)
    })?;
    let GradingOutcome {
        model: mut grader,
        fusion_log,
        ablation,
    } = outcome;
    write_json(
        &layout.reports().join("training_log.json"),
        &serde_json::json!({
            "provenance": prov,
            "validation": vlog,
            "grading_sub_models": sub_logs,
            "fusion": fusion_log,
        }),
    )?;
    write_json(&layout.reports().join("ablation.json"), &ablation)?;
    let mut inference = RunTiming::default();
    let summary = timed(&mut timing, "evaluate", || {
        evaluate_models(cfg, &layout, &ds, &mut validator, &mut grader, ablation, &mut inference)
    })?;
    timing.validation_inference = inference.validation_inference;
    timing.grading_inference = inference.grading_inference;
    write_json(&layout.timing(), &timing)?;
    Ok(RunOutcome {
        summary,
        timing,
        dataset: ds,
        validator,
        grader,
    })
}

/// Loads the persisted validation model and checks its provenance.
pub fn load_validator(cfg: &PipelineConfig, layout: &Layout) -> Result<SubModel> {
    let (m, p) = load_submodel(&layout.validator())?;
    cfg.provenance().check("validation checkpoint", &p)?;
    Ok(m)
}

/// Loads the persisted ensemble and checks its provenance.
pub fn load_grader(cfg: &PipelineConfig, layout: &Layout) -> Result<MDTNetModel> {
    let (m, p) = MDTNetModel::load(&layout.grader())?;
    cfg.provenance().check("grading checkpoint", &p)?;
    Ok(m)
}

/// Loads the persisted stage-one grading sub-models.
pub fn load_grading_submodels(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<SubModel>> {
    let count = cfg.grading.model.base_specs.len() + cfg.grading.model.focal_specs.len();
    (0..count)
        .map(|i| {
            let (m, p) = load_submodel(&layout.grading_submodel(i))?;
            cfg.provenance().check("grading sub-model checkpoint", &p)?;
            Ok(m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_single_sample_examinees_split_exactly() {
        let ids: Vec<u64> = (0..10).collect();
        let s = split_by_examinee(&ids, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(s.sizes, [8, 1, 1]);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn dominant_examinee_stays_whole_and_warns() {
        // Examinee 0 owns 30 of 100 samples.
        let mut ids = vec![0u64; 30];
        ids.extend((1..=70).map(|i| i as u64));
        let s = split_by_examinee(&ids, [0.8, 0.1, 0.1], 1).unwrap();
        let split0 = s.split_of(0).unwrap();
        let n0 = ids.iter().filter(|&&e| s.split_of(e) == Some(split0)).count();
        assert!(n0 >= 30);
        assert_eq!(s.sizes.iter().sum::<usize>(), 100);
        let exact = (s.sizes[0] as f64 / 100.0 - 0.8).abs() <= SPLIT_TOLERANCE
            && (s.sizes[1] as f64 / 100.0 - 0.1).abs() <= SPLIT_TOLERANCE
            && (s.sizes[2] as f64 / 100.0 - 0.1).abs() <= SPLIT_TOLERANCE;
        assert_eq!(s.warnings.is_empty(), exact);
    }

    #[test]
    fn dominant_examinee_outside_tolerance_is_reported() {
        // Only two small examinees besides the big one: val or test must miss.
        let mut ids = vec![0u64; 30];
        ids.extend([1, 1, 2]);
        let s = split_by_examinee(&ids, [0.8, 0.1, 0.1], 0).unwrap();
        assert!(!s.warnings.is_empty());
    }

    #[test]
    fn too_few_examinees() {
        let err = split_by_examinee(&[4, 4, 5], [0.8, 0.1, 0.1], 0).err().unwrap();
        assert!(matches!(err, Error::TooFewExaminees { examinees: 2, splits: 3 }));
    }

    #[test]
    fn split_is_deterministic() {
        let ids: Vec<u64> = (0..200).map(|i| i / 3).collect();
        let a = split_by_examinee(&ids, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!(a, split_by_examinee(&ids, [0.8, 0.1, 0.1], 9).unwrap());
    }

    #[test]
    fn overlap_is_detected() {
        let a: BTreeSet<u64> = [1, 2, 3].into();
        let b: BTreeSet<u64> = [4, 5].into();
        let c: BTreeSet<u64> = [6, 3].into();
        assert!(check_disjoint(&[("train", &a), ("val", &b)]).is_ok());
        let err = check_disjoint(&[("train", &a), ("val", &b), ("test", &c)]).err().unwrap();
        assert!(matches!(err, Error::Contamination { examinee: 3, .. }));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn default_config_validates_and_round_trips() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 5, "scenes": 10}"#).unwrap();
        assert_eq!(partial.scenes, 10);
        assert_eq!(partial.grading, c.grading);
    }

    #[test]
    fn provenance_mismatch_is_rejected() {
        let p = Provenance {
            seed: 1,
            config_hash: "ab".into(),
        };
        assert!(p.check("x", &p.to_json()).is_ok());
        let q = Provenance {
            seed: 2,
            config_hash: "ab".into(),
        };
        assert!(matches!(p.check("x", &q.to_json()), Err(Error::Provenance(_))));
        assert!(p.check("x", &serde_json::Value::Null).is_err());
    }

    #[test]
    fn small_dataset_labels_follow_ground_truth() {
        let cfg = PipelineConfig {
            scenes: 12,
            ..PipelineConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        assert!(!ds.samples.is_empty());
        for s in &ds.samples {
            assert_eq!(s.patch.dims(), (64, 64));
            assert_eq!(s.valid, s.severity.is_some());
            if s.valid {
                assert!(s.truth.unwrap().dist(s.center) <= cfg.detect.merge_distance);
            }
        }
        split_indices(&ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), &cfg.provenance()).unwrap();
        assert_eq!(Dataset::load(dir.path(), &cfg.provenance()).unwrap(), ds);
        let other = PipelineConfig { seed: 9, ..cfg };
        assert!(Dataset::load(dir.path(), &other.provenance()).is_err());
    }
}
