//! One cross-validation cell: dataset, fold plan, architecture and runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{resize_to_input, synth_generate, ClassMap, DatasetManifest, SamplePair, SplitUnit};
use crate::error::{Error, Result};
use crate::groups::GroupKind;
use crate::metrics::{aggregate_folds, MeanStd, MetricRecord};
use crate::tensor::Scalar;
use crate::train::{train_run, DataSetting, DataSource, EpochRecord, ExperimentConfig, FoldPlan, RunOutcome, N_FOLDS};
use crate::unet::{ArchConfig, ModelSize, UNet};

/// Identity of a cell, stored as `cell.toml` in its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub family: GroupKind,
    pub size: ModelSize,
    pub data_setting: DataSetting,
}

impl CellInfo {
    pub fn name(&self) -> String {
        format!("{}-{}-{}data", self.family, self.size, self.data_setting)
    }
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub arch: ArchConfig,
    pub data: Vec<SamplePair>,
    pub plan: FoldPlan,
}

/// Samples resized to the model input plus the class map.
pub fn load_source(source: &DataSource, input_hw: usize) -> Result<(Vec<SamplePair>, ClassMap, SplitUnit)> {
    let (pairs, classes, split) = match source {
        DataSource::Synthetic(spec) => (synth_generate(spec)?, ClassMap::Binary, SplitUnit::Source),
        DataSource::Folder { manifest } => {
            let text = fs::read_to_string(manifest)?;
            let m = DatasetManifest::from_toml(&text, manifest.parent().unwrap_or(Path::new(".")))?;
            (m.load()?, m.classes.clone(), m.split)
        }
    };
    let pairs = pairs.iter().map(|p| resize_to_input(p, input_hw)).collect::<Result<_>>()?;
    Ok((pairs, classes, split))
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let (data, classes, split) = load_source(&config.data, config.model.input_hw)?;
        let channels = data.first().map_or(3, |s| s.channels);
        let out_classes = match classes.n_classes() {
            2 => 1,
            n => n,
        };
        let arch = config.model.arch(channels, out_classes)?;
        let plan = match split {
            SplitUnit::Source => {
                let sources: Vec<&str> = data.iter().map(|s| s.source.as_str()).collect();
                FoldPlan::grouped(&sources, config.train.seed)?
            }
            SplitUnit::Patch => crate::train::make_folds(data.len(), config.train.seed)?,
        };
        Ok(Experiment {
            config,
            arch,
            data,
            plan,
        })
    }

    pub fn cell(&self) -> CellInfo {
        CellInfo {
            family: self.arch.family,
            size: self.arch.size,
            data_setting: self.config.train.data_setting,
        }
    }

    pub fn cell_dir(&self, out: &Path) -> PathBuf {
        out.join(self.cell().name())
    }

    /// Model initialization seed of a fold.
    pub fn model_seed(&self, fold: usize) -> u64 {
        self.config.train.seed.wrapping_mul(N_FOLDS as u64).wrapping_add(fold as u64)
    }

    pub fn run_fold<T: Scalar>(
        &self,
        fold: usize,
        out: Option<&Path>,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<(UNet<T>, RunOutcome)> {
        let mut model = UNet::<T>::new(self.arch.clone(), self.model_seed(fold))?;
        let dir = out.map(|o| self.cell_dir(o).join(format!("fold{fold}")));
        let outcome = train_run(&mut model, &self.data, &self.plan, fold, &self.config.train, dir.as_deref(), on_epoch)?;
        Ok((model, outcome))
    }

    /// Run `folds` in order and aggregate their final-epoch test metrics.
    /// A failing fold aborts the cell; logs written so far stay on disk.
    pub fn cross_validate<T: Scalar>(
        &self,
        folds: &[usize],
        out: Option<&Path>,
        on_epoch: &mut dyn FnMut(usize, &EpochRecord),
    ) -> Result<CellResult> {
        if let Some(o) = out {
            let dir = self.cell_dir(o);
            fs::create_dir_all(&dir)?;
            let info = toml::to_string(&self.cell()).map_err(|e| Error::Config(e.to_string()))?;
            fs::write(dir.join("cell.toml"), info)?;
            fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        }
        let mut finals = Vec::new();
        for &fold in folds {
            let (_, outcome) = self.run_fold::<T>(fold, out, &mut |r| on_epoch(fold, r))?;
            finals.push(outcome.final_eval.summary.clone());
        }
        let aggregate = aggregate_folds(&finals)?;
        Ok(CellResult {
            cell: self.cell(),
            per_fold: finals,
            aggregate,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: CellInfo,
    pub per_fold: Vec<MetricRecord>,
    pub aggregate: Vec<(String, MeanStd)>,
}

impl CellResult {
    /// `cell | Dice | IoU | ...` with `mean ± std` percentages.
    pub fn table_row(&self) -> String {
        let cols: Vec<String> = self.aggregate.iter().map(|(_, m)| m.to_string()).collect();
        format!("{} | {}", self.cell.name(), cols.join(" | "))
    }
}
