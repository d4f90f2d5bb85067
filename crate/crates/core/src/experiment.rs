//! Declarative experiments: one dataset, one model, one strategy, several
//! seeds.
//!
//! ```
//! use xil_core::experiment::ExperimentManifest;
//!
//! let m: ExperimentManifest = serde_json::from_str(r#"{
//!     "name": "toy-rrr",
//!     "dataset": {"preset": "toy"},
//!     "strategy": {"kind": "rrr", "lambda1": {"mode": "auto", "value": {"default": 1.0}}, "lambda2": 0.0, "target": "input"},
//!     "seeds": [0, 1]
//! }"#).unwrap();
//! m.validate().unwrap();
//! let spec = m.session_spec(1, std::path::Path::new(".")).unwrap();
//! assert_eq!(spec.config.seed, 1);
//! assert_eq!(spec.config.budget, Some(5));
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, DatasetManifest};
use crate::explain::{gradcam, input_gradient, ExplainError, ExplanationKind, HeatmapRecord};
use crate::models::Model;
use crate::session::{ExplainerConfig, LoopConfig, ModelPreset, SessionSpec, Strategy};
use crate::spray::SprayConfig;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 28x28 two-class garments with corner decoys.
    Decoy,
    /// 3x3 toy images with a confounder pixel.
    Toy,
}

/// Dataset reference: a built-in preset (seeded per run), a manifest file,
/// or a manifest given inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetRef {
    Preset(Preset),
    Path(PathBuf),
    Inline(DatasetManifest),
}

fn default_probe() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    pub dataset: DatasetRef,
    /// Defaults to the preset's model (decoy: two-layer MLP, otherwise
    /// logistic regression).
    #[serde(default)]
    pub model: Option<ModelPreset>,
    pub strategy: Strategy,
    #[serde(default)]
    pub explainer: Option<ExplainerConfig>,
    /// `T`; overrides the loop config's budget when set.
    #[serde(default)]
    pub budget: Option<usize>,
    pub seeds: Vec<u64>,
    /// Base loop settings; defaults to the preset's.
    #[serde(default)]
    pub config: Option<LoopConfig>,
    /// Test instances explained for the heatmap dump and strategy clusters.
    #[serde(default = "default_probe")]
    pub probe: usize,
    #[serde(default)]
    pub spray: SprayConfig,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::BadManifest(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::BadManifest(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::BadManifest("seeds must be nonempty".into()));
        }
        if self.config.is_none() && !matches!(self.dataset, DatasetRef::Preset(_)) {
            return Err(ExperimentError::BadManifest(
                "a loop config is required unless the dataset is a preset".into(),
            ));
        }
        Ok(())
    }

    fn preset(&self) -> Option<Preset> {
        match self.dataset {
            DatasetRef::Preset(p) => Some(p),
            _ => None,
        }
    }

    /// The dataset manifest used for `seed`; manifest paths resolve against
    /// `base_dir`.
    pub fn dataset_manifest(&self, seed: u64, base_dir: &Path) -> Result<DatasetManifest, ExperimentError> {
        Ok(match &self.dataset {
            DatasetRef::Preset(Preset::Decoy) => DatasetManifest::decoy_preset(seed),
            DatasetRef::Preset(Preset::Toy) => DatasetManifest::toy_preset(seed),
            DatasetRef::Path(p) => DatasetManifest::load(&base_dir.join(p)).map_err(|e| ExperimentError::BadManifest(format!("{}: {e}", p.display())))?,
            DatasetRef::Inline(m) => m.clone(),
        })
    }

    /// Full session description for one seed.
    pub fn session_spec(&self, seed: u64, base_dir: &Path) -> Result<SessionSpec, ExperimentError> {
        self.validate()?;
        let strategy = self.strategy.clone();
        let mut config = match (&self.config, self.preset()) {
            (Some(c), _) => LoopConfig { strategy, ..c.clone() },
            (None, Some(Preset::Decoy)) => LoopConfig::decoy(strategy, seed),
            (None, _) => LoopConfig::toy(strategy, seed),
        };
        config.seed = seed;
        if let Some(e) = &self.explainer {
            config.explainer = e.clone();
        }
        if self.budget.is_some() {
            config.budget = self.budget;
        }
        let model = self.model.clone().unwrap_or(match self.preset() {
            Some(Preset::Decoy) => ModelPreset::DecoyMlp,
            _ => ModelPreset::Logreg,
        });
        Ok(SessionSpec {
            dataset: self.dataset_manifest(seed, base_dir)?,
            model,
            config,
        })
    }
}

/// Heatmaps of the predicted class for the first `n` instances of `data`:
/// Grad-CAM for conv models, input gradients otherwise. Vector instances
/// come back as `[1, d]` maps.
pub fn probe_heatmaps(model: &Model, data: &Dataset, n: usize) -> Result<Vec<HeatmapRecord>, ExperimentError> {
    let n = n.min(data.len());
    let rows: Vec<usize> = (0..n).collect();
    let preds = model.predict(&data.subset(&rows).x).map_err(ExplainError::from)?;
    let conv = model.spec.last_conv_grid().is_some();
    let mut out = Vec::with_capacity(n);
    for (i, &class) in preds.iter().enumerate() {
        let x = data.instance(i);
        let (kind, map) = if conv {
            (ExplanationKind::Gradcam, gradcam(model, &x, class)?)
        } else {
            (ExplanationKind::InputGradient, input_gradient(model, &x, class)?)
        };
        let map = match map.shape() {
            [d] => Tensor::from_parts(vec![1, *d], map.data().to_vec()),
            _ => map,
        };
        out.push(HeatmapRecord::new(data.ids[i], class, kind, &map));
    }
    Ok(out)
}
