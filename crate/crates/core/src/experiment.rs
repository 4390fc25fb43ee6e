//! Multi-seed experiment orchestration: train a preset, hard-prune with a
//! chosen scoring method, fine-tune, and bucket the final accuracy into
//! clusters. Sweeps are deterministic: an identical plan produces a
//! byte-identical report.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connectivity::{normalize, phi_total, Mode};
use crate::data::{generate_toy, ToyDataset, DEFAULT_TEST, DEFAULT_TRAIN};
use crate::error::{Error, Result};
use crate::model_io;
use crate::network::LayeredNetwork;
use crate::pruning::{
    aggregate_node_groups, build_mask, score_channels, score_loss_aware, score_magnitude,
    score_synflow, Granularity, ImportanceTable, LossAwareConfig, PruneSpec, Scope,
};
use crate::training::{evaluate, fine_tune, train, RegularizerConfig, RunMetrics, TrainConfig};

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMethod {
    Magnitude,
    Synflow,
    Channel,
    LossAware,
}

impl PruneMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Synflow => "synflow",
            PruneMethod::Channel => "channel",
            PruneMethod::LossAware => "loss-aware",
        }
    }
}

impl std::str::FromStr for PruneMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(PruneMethod::Magnitude),
            "synflow" => Ok(PruneMethod::Synflow),
            "channel" => Ok(PruneMethod::Channel),
            "loss-aware" => Ok(PruneMethod::LossAware),
            other => Err(Error::Config(format!("unknown prune method {other:?}"))),
        }
    }
}

/// A named coefficient set for the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetSpec {
    pub name: String,
    pub reg: RegularizerConfig,
}

/// The standard presets: no sparsity term, L1, and the connectivity barrier.
pub fn default_presets() -> Vec<PresetSpec> {
    vec![
        PresetSpec {
            name: "none".into(),
            reg: RegularizerConfig {
                l1: 0.0,
                connect: 0.0,
                l2: 5e-4,
            },
        },
        PresetSpec {
            name: "l1".into(),
            reg: RegularizerConfig {
                l1: 1e-3,
                connect: 0.0,
                l2: 5e-4,
            },
        },
        PresetSpec {
            name: "connect".into(),
            reg: RegularizerConfig {
                l1: 0.0,
                connect: 0.1,
                l2: 5e-4,
            },
        },
    ]
}

/// The four coefficient grids of the strength ablation.
pub fn ablation_presets(experiment: usize) -> Option<Vec<PresetSpec>> {
    let make = |l2: f64, l1: f64, connect: f64| {
        vec![
            PresetSpec {
                name: "none".into(),
                reg: RegularizerConfig {
                    l1: 0.0,
                    connect: 0.0,
                    l2,
                },
            },
            PresetSpec {
                name: "l1".into(),
                reg: RegularizerConfig {
                    l1,
                    connect: 0.0,
                    l2,
                },
            },
            PresetSpec {
                name: "connect".into(),
                reg: RegularizerConfig {
                    l1: 0.0,
                    connect,
                    l2,
                },
            },
        ]
    };
    match experiment {
        1 => Some(make(5e-4, 1e-2, 1.0)),
        2 => Some(make(5e-3, 1e-3, 1e-1)),
        3 => Some(make(5e-2, 1e-3, 1e-1)),
        4 => Some(make(5e-3, 5e-4, 5e-2)),
        _ => None,
    }
}

/// One (preset, method, fraction) combination to sweep over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub preset: String,
    pub method: PruneMethod,
    pub fraction: f64,
}

/// Accuracy boundaries of the outcome clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterThresholds {
    pub full_min: f64,
    pub partial_min: f64,
    pub partial_max: f64,
}

impl Default for ClusterThresholds {
    fn default() -> Self {
        ClusterThresholds {
            full_min: 0.95,
            partial_min: 0.625,
            partial_max: 0.875,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub version: u32,
    pub presets: Vec<PresetSpec>,
    pub runs: Vec<PlanEntry>,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub sizes: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warm-in of the connectivity coefficient (epochs).
    pub connect_warmup_epochs: usize,
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f64,
    pub scope: Scope,
    pub thresholds: ClusterThresholds,
}

impl ExperimentPlan {
    /// The reference study: three presets, magnitude and saliency pruning at
    /// 96% per layer, 20 seeds.
    pub fn default_plan(seed_count: usize) -> Self {
        let presets = default_presets();
        let mut runs = Vec::new();
        for preset in &presets {
            for method in [PruneMethod::Magnitude, PruneMethod::Synflow] {
                runs.push(PlanEntry {
                    preset: preset.name.clone(),
                    method,
                    fraction: 0.96,
                });
            }
        }
        ExperimentPlan {
            version: PLAN_SCHEMA_VERSION,
            presets,
            runs,
            seeds: (0..seed_count as u64).collect(),
            data_seed: 42,
            sizes: vec![6, 5, 5, 5, 1],
            n_train: DEFAULT_TRAIN,
            n_test: DEFAULT_TEST,
            epochs: 200,
            batch_size: 256,
            learning_rate: 0.01,
            connect_warmup_epochs: 100,
            finetune_epochs: 50,
            finetune_learning_rate: 0.001,
            scope: Scope::Local,
            thresholds: ClusterThresholds::default(),
        }
    }

    /// Same shape as the default plan with one of the ablation coefficient
    /// grids (1..=4).
    pub fn ablation_plan(experiment: usize, seed_count: usize) -> Option<Self> {
        let mut plan = Self::default_plan(seed_count);
        plan.presets = ablation_presets(experiment)?;
        Some(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one seed".into()));
        }
        if self.runs.is_empty() {
            return Err(Error::Config("plan needs at least one run entry".into()));
        }
        for entry in &self.runs {
            if !self.presets.iter().any(|p| p.name == entry.preset) {
                return Err(Error::Config(format!(
                    "run entry references unknown preset {:?}",
                    entry.preset
                )));
            }
            if !(0.0..1.0).contains(&entry.fraction) {
                return Err(Error::Config(format!(
                    "prune fraction {} out of [0,1)",
                    entry.fraction
                )));
            }
        }
        for preset in &self.presets {
            preset.reg.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable plan")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: ExperimentPlan = serde_json::from_str(s)?;
        if plan.version != PLAN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "plan version {} unsupported (expected {PLAN_SCHEMA_VERSION})",
                plan.version
            )));
        }
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Cluster {
    Collapse,
    Low,
    Partial,
    Full,
}

/// Collapse wins over everything; otherwise bucket by accuracy.
pub fn classify(accuracy: f64, phi: f64, t: &ClusterThresholds) -> Cluster {
    if phi == 0.0 {
        Cluster::Collapse
    } else if accuracy > t.full_min {
        Cluster::Full
    } else if accuracy >= t.partial_min && accuracy < t.partial_max {
        Cluster::Partial
    } else {
        Cluster::Low
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterCounts {
    pub collapse: usize,
    pub low: usize,
    pub partial: usize,
    pub full: usize,
}

impl ClusterCounts {
    fn bump(&mut self, c: Cluster) {
        match c {
            Cluster::Collapse => self.collapse += 1,
            Cluster::Low => self.low += 1,
            Cluster::Partial => self.partial += 1,
            Cluster::Full => self.full += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.collapse + self.low + self.partial + self.full
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub cluster: Option<Cluster>,
    pub accuracy: Option<f64>,
    pub phi_after: Option<f64>,
    /// Smallest per-epoch connectivity seen during training (barrier health).
    pub min_train_phi: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub preset: String,
    pub method: PruneMethod,
    pub fraction: f64,
    pub counts: ClusterCounts,
    pub runs: Vec<RunRecord>,
}

impl GroupReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub version: u32,
    pub thresholds: ClusterThresholds,
    pub seed_count: usize,
    pub groups: Vec<GroupReport>,
}

impl ClusterReport {
    pub fn group(&self, preset: &str, method: PruneMethod) -> Option<&GroupReport> {
        self.groups
            .iter()
            .find(|g| g.preset == preset && g.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }
}

/// Everything produced by one (preset, method, seed) pipeline run.
pub struct RunArtifacts {
    pub trained: LayeredNetwork,
    pub pruned: LayeredNetwork,
    pub finetuned: LayeredNetwork,
    pub train_metrics: RunMetrics,
    pub finetune_metrics: RunMetrics,
    pub scores: ImportanceTable,
    pub final_accuracy: f64,
    pub phi_after: f64,
    pub cluster: Cluster,
}

/// Train -> score -> mask -> prune -> fine-tune -> classify, for one seed.
pub fn run_single(
    plan: &ExperimentPlan,
    entry: &PlanEntry,
    seed: u64,
    data: &ToyDataset,
    trained_cache: &mut HashMap<(String, u64), (LayeredNetwork, RunMetrics)>,
) -> Result<RunArtifacts> {
    let preset = plan
        .presets
        .iter()
        .find(|p| p.name == entry.preset)
        .expect("validated plan");
    let key = (preset.name.clone(), seed);
    if !trained_cache.contains_key(&key) {
        let net = LayeredNetwork::init_random(&plan.sizes, seed)?;
        let mut cfg = TrainConfig::new(plan.epochs, plan.batch_size, plan.learning_rate, seed);
        cfg.connect_warmup_epochs = plan.connect_warmup_epochs;
        let out = train(&net, data, &preset.reg, &cfg)?;
        trained_cache.insert(key.clone(), out);
    }
    let (trained, train_metrics) = trained_cache.get(&key).expect("just inserted").clone();

    let scores = match entry.method {
        PruneMethod::Magnitude => score_magnitude(&trained),
        PruneMethod::Synflow => score_synflow(&trained),
        PruneMethod::Channel => score_channels(&trained)?,
        PruneMethod::LossAware => {
            let batch = plan.batch_size.min(data.train_len());
            let mut x = crate::matrix::Mat::zeros(trained.sizes()[0], batch);
            let mut y = Vec::with_capacity(batch);
            for i in 0..batch {
                for f in 0..trained.sizes()[0] {
                    x.set(f, i, data.train_x.get(i, f));
                }
                y.push(data.train_y[i]);
            }
            let cfg = LossAwareConfig {
                lambda: preset.reg.connect,
                connectivity_samples: 1,
                sample_seed: seed,
            };
            let per_weight = score_loss_aware(&trained, &x, &y, &cfg)?;
            // groups are informative for analysis; masks stay per-weight here
            let _ = aggregate_node_groups(&per_weight, &trained)?;
            per_weight
        }
    };
    let granularity = match entry.method {
        PruneMethod::Channel => Granularity::ScalingEntry,
        _ => Granularity::Weight,
    };
    let spec = PruneSpec {
        scope: plan.scope,
        fraction: entry.fraction,
        granularity,
    };
    let mask = build_mask(&trained, &scores, &spec)?;
    let pruned = trained.apply_mask(&mask)?;
    let mut train_metrics = train_metrics;
    let (_, post_prune_acc) = evaluate(&pruned, &data.test_x, &data.test_y)?;
    train_metrics.post_prune_acc = Some(post_prune_acc);

    let ft_cfg = TrainConfig::new(
        plan.finetune_epochs,
        plan.batch_size,
        plan.finetune_learning_rate,
        // a distinct shuffle key so fine-tuning does not replay training
        seed ^ 0x5eed_f17e,
    );
    let (finetuned, mut finetune_metrics) =
        fine_tune(&pruned, data, &preset.reg.for_finetune(), &ft_cfg)?;
    let (_, final_accuracy) = evaluate(&finetuned, &data.test_x, &data.test_y)?;
    finetune_metrics.post_finetune_acc = Some(final_accuracy);
    train_metrics.post_finetune_acc = Some(final_accuracy);

    let phi_after = phi_total(&normalize(&finetuned, Mode::Normalized));
    let cluster = classify(final_accuracy, phi_after, &plan.thresholds);
    Ok(RunArtifacts {
        trained,
        pruned,
        finetuned,
        train_metrics,
        finetune_metrics,
        scores,
        final_accuracy,
        phi_after,
        cluster,
    })
}

/// Execute the full sweep. A failing run is recorded in its own record and
/// never aborts the sweep. With `out_dir` set, per-run artifacts are written
/// under `<out>/<preset>/<method>/<seed>/`.
pub fn run_experiment(plan: &ExperimentPlan, out_dir: Option<&Path>) -> Result<ClusterReport> {
    plan.validate()?;
    let data = generate_toy(plan.n_train, plan.n_test, plan.data_seed);
    let mut cache = HashMap::new();

    let mut entries: Vec<&PlanEntry> = plan.runs.iter().collect();
    entries.sort_by(|a, b| {
        a.preset
            .cmp(&b.preset)
            .then(a.method.name().cmp(b.method.name()))
    });

    let mut groups = Vec::with_capacity(entries.len());
    for entry in entries {
        let mut counts = ClusterCounts::default();
        let mut runs = Vec::with_capacity(plan.seeds.len());
        for &seed in &plan.seeds {
            match run_single(plan, entry, seed, &data, &mut cache) {
                Ok(a) => {
                    counts.bump(a.cluster);
                    let min_phi = a
                        .train_metrics
                        .epochs
                        .iter()
                        .map(|e| e.phi_tot)
                        .fold(f64::INFINITY, f64::min);
                    runs.push(RunRecord {
                        seed,
                        cluster: Some(a.cluster),
                        accuracy: Some(a.final_accuracy),
                        phi_after: Some(a.phi_after),
                        min_train_phi: Some(min_phi),
                        error: None,
                    });
                    if let Some(dir) = out_dir {
                        write_artifacts(dir, entry, seed, &a)?;
                    }
                }
                Err(e) => {
                    runs.push(RunRecord {
                        seed,
                        cluster: None,
                        accuracy: None,
                        phi_after: None,
                        min_train_phi: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        groups.push(GroupReport {
            preset: entry.preset.clone(),
            method: entry.method,
            fraction: entry.fraction,
            counts,
            runs,
        });
    }
    let report = ClusterReport {
        version: REPORT_SCHEMA_VERSION,
        thresholds: plan.thresholds,
        seed_count: plan.seeds.len(),
        groups,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("cluster_report.json"), report.to_json())?;
    }
    Ok(report)
}

fn write_artifacts(out_dir: &Path, entry: &PlanEntry, seed: u64, a: &RunArtifacts) -> Result<()> {
    let dir = out_dir
        .join(&entry.preset)
        .join(entry.method.name())
        .join(seed.to_string());
    std::fs::create_dir_all(&dir)?;
    model_io::save(&a.trained, &dir.join("model_trained.bin"))?;
    model_io::save(&a.pruned, &dir.join("model_pruned.bin"))?;
    model_io::save(&a.finetuned, &dir.join("model_finetuned.bin"))?;
    std::fs::write(dir.join("metrics_train.jsonl"), a.train_metrics.to_jsonl())?;
    std::fs::write(
        dir.join("metrics_finetune.jsonl"),
        a.finetune_metrics.to_jsonl(),
    )?;
    std::fs::write(dir.join("scores.txt"), a.scores.to_text())?;
    let mask = a.pruned.mask().expect("pruned model carries its mask");
    std::fs::write(dir.join("mask.json"), serde_json::to_string_pretty(mask)?)?;
    Ok(())
}
