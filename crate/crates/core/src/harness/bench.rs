//! Benchmark suite: every strategy × dataset × seed cell trains against the
//! same frozen surrogate base, producing per-cell JSON reports, an accuracy
//! summary CSV and an efficiency CSV.
//!
//! The CSVs carry only deterministic quantities (accuracies, counts, tape
//! sizes); wall-clock timings live in the JSON reports so repeated runs of
//! the same configuration are byte-identical on the CSV side.

use crate::analysis;
use crate::error::{Error, Result};
use crate::harness::data::{few_shot_sample, load_dataset, DatasetSpec, SplitDataset};
use crate::harness::derive_seed;
use crate::harness::train::{grid_search_train, TrainConfig};
use crate::peft::{AdaptStrategy, AdaptedModel};
use crate::tensor::{Tape, Tensor};
use crate::vit::{self, ModelBinder, ViTConfig, ViTModel};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// How the surrogate "pretrained" base is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Surrogate {
    RandomInit,
    /// Brief full fine-tuning on a held-out synthetic pretext task.
    Pretext {
        per_class: usize,
        noise_sigma: f64,
        seed: u64,
        epochs: usize,
        lr: f64,
    },
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate::Pretext {
            per_class: 20,
            noise_sigma: 0.25,
            seed: 7_777,
            epochs: 5,
            lr: 0.05,
        }
    }
}

/// Build the frozen base every strategy adapts from.
pub fn make_surrogate(cfg: &ViTConfig, surrogate: &Surrogate, seed: u64) -> Result<ViTModel> {
    let model = ViTModel::new(cfg.clone(), seed)?;
    match surrogate {
        Surrogate::RandomInit => Ok(model),
        Surrogate::Pretext {
            per_class,
            noise_sigma,
            seed: pretext_seed,
            epochs,
            lr,
        } => {
            let spec = DatasetSpec::synthetic(crate::harness::data::SynthSpec {
                classes: cfg.num_classes,
                per_class: *per_class,
                image_size: cfg.image_size,
                channels: cfg.channels,
                noise_sigma: *noise_sigma,
                seed: *pretext_seed,
            });
            let data = load_dataset(&spec)?;
            let adapted = AdaptedModel::apply_strategy(&model, AdaptStrategy::FullFinetune, seed)?;
            let cfg_train = TrainConfig {
                epochs: *epochs,
                eval_every: 0,
                seed: derive_seed(seed, &[12]),
                ..TrainConfig::default()
            }
            .single_cell(*lr, 0.0);
            let outcome = grid_search_train(&adapted, &data, &cfg_train)?;
            Ok(outcome.best_model.base)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    FewShot { shots: usize, seeds: Vec<u64> },
    FullShot { seeds: Vec<u64> },
}

impl Protocol {
    pub fn seeds(&self) -> &[u64] {
        match self {
            Protocol::FewShot { seeds, .. } | Protocol::FullShot { seeds } => seeds,
        }
    }
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::FewShot {
            shots: 5,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub strategies: Vec<AdaptStrategy>,
    pub datasets: Vec<(String, DatasetSpec)>,
    pub protocol: Protocol,
    pub train: TrainConfig,
    pub m0: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Test accuracy of the selected grid cell; `None` marks a failed cell.
    pub accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub best_lr: Option<f64>,
    pub best_wd: Option<f64>,
    pub failed_grid_cells: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub strategy: String,
    pub dataset: String,
    pub per_seed: Vec<SeedRun>,
    /// Arithmetic mean of the per-seed accuracies (seeds that ran).
    pub mean_accuracy: Option<f64>,
    pub head_params: usize,
    pub non_head_params: usize,
    pub total_params: usize,
    pub pe: Option<f64>,
    pub wall_clock_s: f64,
    pub peak_tensor_bytes: usize,
    /// Tape nodes of one adapted forward pass (latency proxy).
    pub forward_tape_nodes: usize,
    /// Tape nodes after merging, for weight-delta strategies.
    pub merged_forward_nodes: Option<usize>,
}

pub struct BenchOutput {
    pub reports: Vec<RunReport>,
    pub summary_csv: String,
    pub efficiency_csv: String,
}

fn forward_node_count(model: &ViTModel) -> Result<usize> {
    let cfg = &model.config;
    let images = Tensor::zeros(vec![1, cfg.channels, cfg.image_size, cfg.image_size]);
    let mut tape = Tape::new();
    let mut binder = ModelBinder::frozen(model);
    vit::forward(
        &mut tape,
        cfg,
        &crate::vit::AttentionVariant::Plain,
        &mut binder,
        &images,
    )?;
    Ok(tape.len())
}

fn adapted_forward_node_count(adapted: &AdaptedModel) -> Result<usize> {
    let cfg = adapted.config();
    let images = Tensor::zeros(vec![1, cfg.channels, cfg.image_size, cfg.image_size]);
    let mut tape = Tape::new();
    adapted.forward(&mut tape, &images, false)?;
    Ok(tape.len())
}

/// Run every (strategy, dataset, seed) cell from the same frozen base.
/// Per-cell failures are recorded in the reports, not fatal.
pub fn benchmark_suite(base: &ViTModel, cfg: &BenchConfig) -> Result<BenchOutput> {
    cfg.train.validate()?;
    if cfg.strategies.is_empty() || cfg.datasets.is_empty() {
        return Err(Error::InvalidInput(
            "benchmark needs at least one strategy and one dataset".into(),
        ));
    }

    let loaded: Vec<(String, SplitDataset)> = cfg
        .datasets
        .iter()
        .map(|(name, spec)| Ok((name.clone(), load_dataset(spec)?)))
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    for (si, strategy) in cfg.strategies.iter().enumerate() {
        for (name, data) in &loaded {
            let start = Instant::now();
            let mut per_seed = Vec::new();
            let mut peak = 0usize;
            let mut counted: Option<(usize, usize)> = None;

            for &seed in cfg.protocol.seeds() {
                let adapted = AdaptedModel::apply_strategy(
                    base,
                    strategy.clone(),
                    derive_seed(seed, &[10, si as u64]),
                )?;
                if counted.is_none() {
                    counted = Some(adapted.trainable_counts());
                }
                let train_subset = match &cfg.protocol {
                    Protocol::FewShot { shots, .. } => few_shot_sample(&data.train, *shots, seed)?,
                    Protocol::FullShot { .. } => data.train.clone(),
                };
                let split = SplitDataset {
                    train: train_subset,
                    val: data.val.clone(),
                    test: data.test.clone(),
                };
                let cell_cfg = TrainConfig {
                    seed: derive_seed(cfg.train.seed, &[11, si as u64, seed]),
                    ..cfg.train.clone()
                };
                match grid_search_train(&adapted, &split, &cell_cfg) {
                    Ok(outcome) => {
                        peak = peak.max(outcome.peak_bytes);
                        per_seed.push(SeedRun {
                            seed,
                            accuracy: Some(outcome.test_accuracy),
                            val_accuracy: Some(outcome.val_accuracy),
                            best_lr: Some(outcome.best_lr),
                            best_wd: Some(outcome.best_wd),
                            failed_grid_cells: outcome.failed_cells,
                            steps: outcome.total_steps,
                        });
                    }
                    Err(Error::AllCellsFailed) => per_seed.push(SeedRun {
                        seed,
                        accuracy: None,
                        val_accuracy: None,
                        best_lr: None,
                        best_wd: None,
                        failed_grid_cells: cfg.train.lr_grid.len() * cfg.train.wd_grid.len(),
                        steps: 0,
                    }),
                    Err(e) => return Err(e),
                }
            }

            let accs: Vec<f64> = per_seed.iter().filter_map(|s| s.accuracy).collect();
            let mean_accuracy = if accs.is_empty() {
                None
            } else {
                Some(accs.iter().sum::<f64>() / accs.len() as f64)
            };
            let (head_params, non_head_params) = counted.unwrap_or((0, 0));
            let total_params = head_params + non_head_params;
            let pe = mean_accuracy
                .map(|acc| analysis::pe_metric(acc, total_params as u64, cfg.m0))
                .transpose()?
                .map(|p| p.pe);

            let probe = AdaptedModel::apply_strategy(
                base,
                strategy.clone(),
                derive_seed(0, &[10, si as u64]),
            )?;
            let forward_tape_nodes = adapted_forward_node_count(&probe)?;
            let merged_forward_nodes = if strategy.mergeable() {
                Some(forward_node_count(&probe.merge()?)?)
            } else {
                None
            };

            reports.push(RunReport {
                strategy: strategy.name().to_string(),
                dataset: name.clone(),
                per_seed,
                mean_accuracy,
                head_params,
                non_head_params,
                total_params,
                pe,
                wall_clock_s: start.elapsed().as_secs_f64(),
                peak_tensor_bytes: peak,
                forward_tape_nodes,
                merged_forward_nodes,
            });
        }
    }

    let names: Vec<String> = loaded.iter().map(|(n, _)| n.clone()).collect();
    let summary_csv = summary_csv(&reports, &names);
    let efficiency_csv = efficiency_csv(&reports);
    Ok(BenchOutput {
        reports,
        summary_csv,
        efficiency_csv,
    })
}

fn fmt_acc(v: Option<f64>) -> String {
    match v {
        Some(a) => format!("{a:.6}"),
        None => "failed".into(),
    }
}

/// Accuracy table: one row per strategy, one accuracy column per dataset,
/// then the cross-dataset mean, parameter counts and PE.
pub fn summary_csv(reports: &[RunReport], datasets: &[String]) -> String {
    let mut out = String::from("strategy");
    for d in datasets {
        out.push_str(&format!(",acc_{d}"));
    }
    out.push_str(",mean_accuracy,head_params,non_head_params,total_params,pe\n");

    let mut strategies: Vec<&str> = Vec::new();
    for r in reports {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    for s in strategies {
        out.push_str(s);
        let rows: Vec<&RunReport> = reports.iter().filter(|r| r.strategy == s).collect();
        let mut means = Vec::new();
        for d in datasets {
            let acc = rows
                .iter()
                .find(|r| &r.dataset == d)
                .and_then(|r| r.mean_accuracy);
            if let Some(a) = acc {
                means.push(a);
            }
            out.push(',');
            out.push_str(&fmt_acc(acc));
        }
        let overall = if means.is_empty() {
            None
        } else {
            Some(means.iter().sum::<f64>() / means.len() as f64)
        };
        let (head, non_head) = rows
            .first()
            .map(|r| (r.head_params, r.non_head_params))
            .unwrap_or((0, 0));
        let total = head + non_head;
        let pe = overall.map(|acc| {
            analysis::pe_metric(acc, total as u64, analysis::DEFAULT_M0)
                .map(|p| p.pe)
                .unwrap_or(f64::NAN)
        });
        out.push_str(&format!(
            ",{},{head},{non_head},{total},{}\n",
            fmt_acc(overall),
            fmt_acc(pe)
        ));
    }
    out
}

/// Efficiency table: deterministic latency/memory proxies per cell.
pub fn efficiency_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(
        "strategy,dataset,mean_accuracy,total_params,peak_tensor_bytes,forward_tape_nodes,merged_forward_nodes,total_steps\n",
    );
    for r in reports {
        let steps: usize = r.per_seed.iter().map(|s| s.steps).sum();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.dataset,
            fmt_acc(r.mean_accuracy),
            r.total_params,
            r.peak_tensor_bytes,
            r.forward_tape_nodes,
            r.merged_forward_nodes
                .map(|n| n.to_string())
                .unwrap_or_default(),
            steps
        ));
    }
    out
}

/// Write `summary.csv`, `efficiency.csv` and `reports.json` under `out_dir`.
pub fn write_outputs(out: &BenchOutput, out_dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("summary.csv"), &out.summary_csv)?;
    std::fs::write(out_dir.join("efficiency.csv"), &out.efficiency_csv)?;
    std::fs::write(
        out_dir.join("reports.json"),
        serde_json::to_vec_pretty(&out.reports)?,
    )?;
    Ok(())
}
