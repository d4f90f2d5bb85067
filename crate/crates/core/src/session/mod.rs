//! The interactive loop.
//!
//! A [`Session`] holds the labeled set, the unlabeled pool and the current
//! model. Each step picks a query from the pool, explains the model's
//! prediction for it, takes a [`Correction`] from a [`UserOracle`] and folds
//! it back into the labeled set as counterexamples or as a gradient-penalty
//! mask. The model is refit every `queries_per_refit` answers.
//!
//! Sessions are deterministic functions of their spec and the sequence of
//! corrections, which is what makes the feedback log replayable.

mod oracle;
mod persist;
mod query;

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, DatasetManifest};
use crate::explain::{
    gradcam, heatmap_explanation, input_gradient, lime_explain, stable_lime, ComponentScheme, ExplainError, Explanation,
    ExplanationKind, LimeParams,
};
use crate::feedback::{
    evaluate_rrr_terms, to_counterexamples, to_mask, CeStrategy, Correction, FeatureStats, FeedbackError, FeedbackLog,
    MaskTarget,
};
use crate::models::{
    class_weights, train, Classifier, Lambda1, LabeledSet, LossSpec, Model, ModelError, ModelSpec, OptimSpec, RrrTarget,
    Standardizer,
};
use crate::tensor::Tensor;

pub use oracle::{simulated_correction, ReplayOracle, SimulatedOracle, UserOracle};
pub use persist::{read_metrics_csv, write_metrics_csv, SessionFile, SESSION_FORMAT, SESSION_VERSION};
pub use query::{select_position, select_query, QueryStrategy};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("the unlabeled pool is empty")]
    EmptyPool,
    #[error("session is {0}")]
    WrongState(&'static str),
    #[error("instance {0} is not known to the oracle")]
    UnknownInstance(u64),
    #[error("correction answers instance {got} but the outstanding query is {expected}")]
    InstanceMismatch { expected: u64, got: u64 },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("oracle failed: {0}")]
    OracleFailure(String),
    #[error("replay log answers instance {logged} but the session queried {queried}")]
    ReplayDesync { logged: u64, queried: u64 },
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("session has no spec to persist")]
    NotPersistable,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Checkpoint(#[from] crate::models::CheckpointError),
    #[error("session i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("session file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LoopError>;

/// How corrections become learning signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    /// Labels only; marked components are ignored.
    None,
    Ce(CeStrategy),
    Rrr {
        lambda1: Lambda1,
        #[serde(default)]
        lambda2: f64,
        target: RrrTarget,
    },
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::None => "none".into(),
            Strategy::Ce(ce) => format!("ce-c{}", ce.count),
            Strategy::Rrr { .. } => "rrr".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExplainerConfig {
    /// Surrogate explanations; `runs > 1` keeps the most frequently selected
    /// components over that many seeds.
    Lime {
        #[serde(default)]
        params: LimeParams,
        #[serde(default = "one")]
        runs: usize,
    },
    InputGradient {
        k: usize,
    },
    Gradcam {
        k: usize,
    },
}

fn one() -> usize {
    1
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig::Lime {
            params: LimeParams::default(),
            runs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SchemeConfig {
    /// One component per input value.
    Tabular,
    Grid { patch_h: usize, patch_w: usize },
}

impl SchemeConfig {
    pub fn build(&self, input_shape: &[usize]) -> Result<ComponentScheme> {
        Ok(match *self {
            SchemeConfig::Tabular => {
                let mut s = ComponentScheme::tabular(input_shape.iter().product())?;
                s.input_shape = input_shape.to_vec();
                s
            }
            SchemeConfig::Grid { patch_h, patch_w } => ComponentScheme::image_grid(input_shape, patch_h, patch_w)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RefitMode {
    /// Continue training the current model for `epochs`.
    WarmStart { epochs: usize },
    /// Re-initialise from the session seed and train for the full budget.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelPreset {
    Logreg,
    /// Two relu layers of 50 and 30 units.
    DecoyMlp,
    Mlp {
        hidden: Vec<usize>,
    },
    Cnn {
        conv_channels: Vec<usize>,
        kernel: usize,
        pool: usize,
        #[serde(default)]
        dense: Vec<usize>,
    },
}

impl ModelPreset {
    pub fn spec(&self, input_shape: &[usize], classes: usize) -> ModelSpec {
        let d: usize = input_shape.iter().product();
        let mut spec = match self {
            ModelPreset::Logreg => ModelSpec::logreg(d, classes),
            ModelPreset::DecoyMlp => ModelSpec::decoy_mlp(input_shape.to_vec(), classes),
            ModelPreset::Mlp { hidden } => {
                let mut widths = vec![d];
                widths.extend(hidden);
                widths.push(classes);
                ModelSpec::mlp(widths)
            }
            ModelPreset::Cnn {
                conv_channels,
                kernel,
                pool,
                dense,
            } => ModelSpec {
                architecture: crate::models::Architecture::Cnn {
                    conv_channels: conv_channels.clone(),
                    kernel: *kernel,
                    pool: *pool,
                    dense: dense.clone(),
                },
                input_shape: vec![],
                classes,
            },
        };
        spec.input_shape = input_shape.to_vec();
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub strategy: Strategy,
    #[serde(default)]
    pub explainer: ExplainerConfig,
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub query: QueryStrategy,
    /// Number of queries `T`; `None` exhausts the pool.
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default = "one")]
    pub queries_per_refit: usize,
    pub refit: RefitMode,
    /// Training instances labeled before the first query; the rest form the
    /// pool.
    pub initial_labeled: usize,
    /// Optimiser for the initial fit (and for full refits).
    pub optim: OptimSpec,
    /// Stop once test accuracy reaches this value.
    #[serde(default)]
    pub stop_acc: Option<f64>,
    /// Weight the loss by inverse class frequency in the labeled set.
    #[serde(default)]
    pub balance_classes: bool,
    #[serde(default)]
    pub seed: u64,
}

impl LoopConfig {
    /// Settings for the 28x28 decoy preset: 200 labeled, the remaining 800
    /// all queried, refit every 100 answers, top-5 surrogate components
    /// shown per query.
    pub fn decoy(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            explainer: ExplainerConfig::Lime {
                params: LimeParams {
                    n_samples: 1000,
                    k: 5,
                    ..LimeParams::default()
                },
                runs: 1,
            },
            scheme: SchemeConfig::Grid { patch_h: 4, patch_w: 4 },
            query: QueryStrategy::Margin,
            budget: None,
            queries_per_refit: 100,
            refit: RefitMode::WarmStart { epochs: 10 },
            initial_labeled: 200,
            optim: OptimSpec::adam(1e-3, 64, 30),
            stop_acc: None,
            balance_classes: false,
            seed,
        }
    }

    /// Settings for the 3x3 toy images: pixel components, a refit after
    /// every answer.
    pub fn toy(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            explainer: ExplainerConfig::Lime {
                params: LimeParams {
                    n_samples: 100,
                    k: 2,
                    ..LimeParams::default()
                },
                runs: 1,
            },
            scheme: SchemeConfig::Tabular,
            query: QueryStrategy::Margin,
            budget: Some(5),
            queries_per_refit: 1,
            refit: RefitMode::WarmStart { epochs: 5 },
            initial_labeled: 20,
            optim: OptimSpec::adam(1e-2, 16, 20),
            stop_acc: None,
            balance_classes: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LoopError::InvalidConfig(m));
        if self.queries_per_refit == 0 {
            return bad("queries_per_refit must be at least 1".into());
        }
        if let Strategy::Ce(ce) = &self.strategy {
            if ce.count == 0 {
                return bad("counterexample count must be at least 1".into());
            }
        }
        if let Strategy::Rrr { lambda2, .. } = &self.strategy {
            if !(*lambda2 >= 0.0) {
                return bad(format!("lambda2 {lambda2}"));
            }
        }
        if let ExplainerConfig::Lime { runs: 0, .. } = self.explainer {
            return bad("lime runs must be at least 1".into());
        }
        self.optim.validate()?;
        Ok(())
    }
}

/// Everything needed to rebuild a session from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub dataset: DatasetManifest,
    pub model: ModelPreset,
    pub config: LoopConfig,
}

/// What the user is shown for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryArtifact {
    pub instance_id: u64,
    /// Queries answered so far.
    pub step: usize,
    pub budget: usize,
    pub x: Tensor,
    pub prediction: usize,
    pub confidence: f64,
    pub probabilities: Vec<f64>,
    /// Explains `prediction`.
    pub explanation: Explanation,
}

/// One row of the metrics history, recorded after every fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    /// Queries answered when the fit ran.
    pub iteration: usize,
    /// Size of the labeled set, counterexamples included.
    pub labeled: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Per-instance mean cross-entropy over the labeled set.
    pub answers: f64,
    /// Per-instance mean masked squared input gradient (zero without masks).
    pub reasons: f64,
    pub lambda1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionState {
    Idle,
    AwaitingFeedback,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: usize,
    pub metrics: Option<MetricsPoint>,
    pub done: bool,
}

/// How a call to [`run_xil`] ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    /// Budget exhausted or accuracy target reached.
    Finished,
    /// The oracle had no answer; the query is still outstanding.
    Paused,
}

#[derive(Debug, Clone, Default)]
struct Labeled {
    x: Vec<f64>,
    labels: Vec<usize>,
    masks: Option<Vec<f64>>,
    /// Train rows of the non-synthetic entries.
    rows: Vec<usize>,
    /// Corrected labels of those entries.
    row_labels: Vec<usize>,
}

pub struct Session {
    spec: Option<SessionSpec>,
    data_root: PathBuf,
    config: LoopConfig,
    scheme: ComponentScheme,
    train: Dataset,
    test: Dataset,
    model: Model,
    stats: FeatureStats,
    mask_shape: Option<Vec<usize>>,
    labeled: Labeled,
    labeled_ids: BTreeSet<u64>,
    pool: Vec<usize>,
    train_probs: Option<Tensor>,
    budget: usize,
    step: usize,
    since_refit: usize,
    pending: Option<QueryArtifact>,
    done: bool,
    lambda1: Option<f64>,
    metrics: Vec<MetricsPoint>,
    log: Option<FeedbackLog>,
    persist_dir: Option<PathBuf>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("step", &self.step)
            .field("budget", &self.budget)
            .field("labeled", &self.labeled.labels.len())
            .field("pool", &self.pool.len())
            .field("state", &self.state())
            .finish()
    }
}

impl Session {
    /// Builds the datasets named by `spec` (paths relative to `data_root`)
    /// and runs the initial fit.
    pub fn start(spec: SessionSpec, data_root: PathBuf) -> Result<Self> {
        let (train, test) = spec.dataset.build(&data_root)?;
        let mut s = Self::from_datasets(train, test, &spec.model, spec.config.clone())?;
        s.spec = Some(spec);
        s.data_root = data_root;
        Ok(s)
    }

    pub fn from_datasets(train: Dataset, test: Dataset, preset: &ModelPreset, config: LoopConfig) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        test.validate()?;
        if train.is_empty() {
            return Err(LoopError::InvalidConfig("empty training split".into()));
        }
        let shape = train.instance_shape().to_vec();
        let scheme = config.scheme.build(&shape)?;
        let spec = preset.spec(&shape, train.classes);
        let model = Model::init(spec, config.seed)?.with_standardizer(Standardizer::fit(&train.x));
        let mask_shape = match &config.strategy {
            Strategy::Rrr {
                target: RrrTarget::Input,
                ..
            } => Some(shape.clone()),
            Strategy::Rrr {
                target: RrrTarget::LastConv,
                ..
            } => {
                let (h, w) = model
                    .spec
                    .last_conv_grid()
                    .ok_or_else(|| LoopError::InvalidConfig("last-conv penalty needs a cnn".into()))?;
                Some(vec![h, w])
            }
            _ => None,
        };
        let stats = FeatureStats::fit(&train.x);

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)));
        let n0 = config.initial_labeled.min(train.len());
        let mut pool = order[n0..].to_vec();
        pool.sort_unstable();
        let budget = config.budget.unwrap_or(pool.len()).min(pool.len());

        let mut s = Self {
            spec: None,
            data_root: PathBuf::from("."),
            scheme,
            model,
            stats,
            labeled: Labeled {
                masks: mask_shape.as_ref().map(|_| Vec::new()),
                ..Labeled::default()
            },
            mask_shape,
            labeled_ids: BTreeSet::new(),
            pool,
            train_probs: None,
            budget,
            step: 0,
            since_refit: 0,
            pending: None,
            done: budget == 0,
            lambda1: None,
            metrics: Vec::new(),
            log: None,
            persist_dir: None,
            config,
            train,
            test,
        };
        let mut initial = order[..n0].to_vec();
        initial.sort_unstable();
        for row in initial {
            let y = s.train.labels[row];
            s.push_original(row, y, None);
        }
        if !s.labeled.labels.is_empty() {
            let optim = s.config.optim;
            s.fit(&optim)?;
        }
        s.record_metrics()?;
        Ok(s)
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    pub fn spec(&self) -> Option<&SessionSpec> {
        self.spec.as_ref()
    }

    pub fn scheme(&self) -> &ComponentScheme {
        &self.scheme
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn metrics(&self) -> &[MetricsPoint] {
        &self.metrics
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Size of the labeled set including counterexamples.
    pub fn labeled_len(&self) -> usize {
        self.labeled.labels.len()
    }

    /// Ids of the real (non-synthetic) labeled instances.
    pub fn labeled_ids(&self) -> &BTreeSet<u64> {
        &self.labeled_ids
    }

    pub fn pool_ids(&self) -> Vec<u64> {
        self.pool.iter().map(|&r| self.train.ids[r]).collect()
    }

    /// The labeled set as training data.
    pub fn labeled_set(&self) -> LabeledSet {
        let n = self.labeled.labels.len();
        let mut shape = vec![n];
        shape.extend_from_slice(self.train.instance_shape());
        LabeledSet {
            x: Tensor::from_parts(shape, self.labeled.x.clone()),
            labels: self.labeled.labels.clone(),
            masks: self.labeled.masks.as_ref().map(|m| {
                let mut shape = vec![n];
                shape.extend(self.mask_shape.as_ref().expect("masks imply a mask shape"));
                Tensor::from_parts(shape, m.clone())
            }),
        }
    }

    pub fn pending(&self) -> Option<&QueryArtifact> {
        self.pending.as_ref()
    }

    pub fn state(&self) -> SessionState {
        if self.pending.is_some() {
            SessionState::AwaitingFeedback
        } else if self.done {
            SessionState::Done
        } else {
            SessionState::Idle
        }
    }

    /// The frozen automatic `lambda1`, once calibrated.
    pub fn calibrated_lambda1(&self) -> Option<f64> {
        self.lambda1
    }

    fn push_original(&mut self, row: usize, label: usize, mask: Option<Vec<f64>>) {
        self.labeled.x.extend_from_slice(self.train.x.row(row));
        self.labeled.labels.push(label);
        self.labeled.rows.push(row);
        self.labeled.row_labels.push(label);
        self.labeled_ids.insert(self.train.ids[row]);
        if let Some(m) = self.labeled.masks.as_mut() {
            let len: usize = self.mask_shape.as_ref().expect("masks imply a mask shape").iter().product();
            match mask {
                Some(v) => m.extend(v),
                None => m.extend(std::iter::repeat_n(0.0, len)),
            }
        }
    }

    fn effective_lambda1(&self) -> f64 {
        match &self.config.strategy {
            Strategy::Rrr { lambda1, .. } => match (lambda1, self.lambda1) {
                (Lambda1::Fixed(l), _) => *l,
                (Lambda1::Auto { .. }, Some(l)) => l,
                (Lambda1::Auto { default }, None) => *default,
            },
            _ => 0.0,
        }
    }

    fn loss_spec(&self, data: &LabeledSet) -> Result<LossSpec> {
        let weights = if self.config.balance_classes {
            Some(class_weights(&data.labels, self.train.classes)?)
        } else {
            None
        };
        Ok(match &self.config.strategy {
            Strategy::Rrr { lambda1, target, .. } => LossSpec::Rrr {
                lambda1: match self.lambda1 {
                    Some(l) => Lambda1::Fixed(l),
                    None => *lambda1,
                },
                target: *target,
                class_weights: weights,
            },
            _ => LossSpec::CrossEntropy { class_weights: weights },
        })
    }

    fn fit(&mut self, optim: &OptimSpec) -> Result<()> {
        let data = self.labeled_set();
        let loss = self.loss_spec(&data)?;
        let mut optim = *optim;
        if let Strategy::Rrr { lambda2, .. } = &self.config.strategy {
            optim.l2 = *lambda2;
        }
        let report = train(&mut self.model, &data, &loss, &optim)?;
        if self.lambda1.is_none() {
            self.lambda1 = report.lambda1_calibrated;
        }
        self.train_probs = None;
        Ok(())
    }

    fn refit(&mut self) -> Result<()> {
        match self.config.refit {
            RefitMode::WarmStart { epochs } => {
                let optim = OptimSpec {
                    epochs,
                    ..self.config.optim
                };
                self.fit(&optim)
            }
            RefitMode::Full => {
                let standardizer = self.model.standardizer.clone();
                self.model = Model::init(self.model.spec.clone(), self.config.seed)?;
                self.model.standardizer = standardizer;
                let optim = self.config.optim;
                self.fit(&optim)
            }
        }
    }

    fn train_probs(&mut self) -> Result<&Tensor> {
        if self.train_probs.is_none() {
            self.train_probs = Some(self.model.predict_proba(&self.train.x)?);
        }
        Ok(self.train_probs.as_ref().expect("just set"))
    }

    fn record_metrics(&mut self) -> Result<MetricsPoint> {
        let train_labels = self.train.labels.clone();
        let probs = self.train_probs()?;
        let pred = probs.argmax_rows();
        let train_accuracy = pred.iter().zip(&train_labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;
        let test_accuracy = if self.test.is_empty() {
            0.0
        } else {
            self.model.accuracy(&self.test.x, &self.test.labels)?
        };
        let data = self.labeled_set();
        let n = data.len().max(1) as f64;
        let (answers, reasons) = match &self.config.strategy {
            Strategy::Rrr { target, .. } if !data.is_empty() => {
                let w = self.loss_spec(&data).map(|l| match l {
                    LossSpec::Rrr { class_weights, .. } | LossSpec::CrossEntropy { class_weights } => class_weights,
                })?;
                let w = w.unwrap_or_else(|| vec![1.0; self.train.classes]);
                evaluate_rrr_terms(&self.model, &data, &w, *target)?
            }
            _ if !data.is_empty() => {
                let p = self.model.predict_proba(&data.x)?;
                let ce: f64 = data.labels.iter().enumerate().map(|(i, &y)| -p.row(i)[y].max(1e-300).ln()).sum();
                (ce, 0.0)
            }
            _ => (0.0, 0.0),
        };
        let point = MetricsPoint {
            iteration: self.step,
            labeled: data.len(),
            train_accuracy,
            test_accuracy,
            answers: answers / n,
            reasons: reasons / n,
            lambda1: self.effective_lambda1(),
        };
        self.metrics.push(point);
        Ok(point)
    }

    fn explain(&self, x: &Tensor, prediction: usize, instance_id: u64) -> Result<Explanation> {
        let seed = self
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(instance_id);
        Ok(match &self.config.explainer {
            ExplainerConfig::Lime { params, runs } => {
                let params = LimeParams {
                    seed,
                    ..params.clone()
                };
                if *runs > 1 {
                    stable_lime(&self.model, x, &self.scheme, &params, *runs)?
                } else {
                    lime_explain(&self.model, x, &self.scheme, &params)?
                }
            }
            ExplainerConfig::InputGradient { k } => {
                let h = input_gradient(&self.model, x, prediction)?;
                heatmap_explanation(ExplanationKind::InputGradient, prediction, h, &self.scheme, *k)
            }
            ExplainerConfig::Gradcam { k } => {
                let h = gradcam(&self.model, x, prediction)?;
                let heatmap = broadcast_channels(&h, &self.scheme.input_shape);
                heatmap_explanation(ExplanationKind::Gradcam, prediction, heatmap, &self.scheme, *k)
            }
        })
    }

    /// Selects, predicts and explains the next query. The session then
    /// waits for [`Session::submit`].
    pub fn next_query(&mut self) -> Result<QueryArtifact> {
        match self.state() {
            SessionState::AwaitingFeedback => return Err(LoopError::WrongState("awaiting feedback")),
            SessionState::Done => return Err(LoopError::WrongState("done")),
            SessionState::Idle => {}
        }
        let pool = self.pool.clone();
        let probs = self.train_probs()?.select_rows(&pool);
        let ids: Vec<u64> = pool.iter().map(|&r| self.train.ids[r]).collect();
        let seed = self.config.seed.wrapping_add(self.step as u64);
        let pos = select_position(&probs, &ids, self.config.query, seed)?;
        let row = pool[pos];
        let x = self.train.instance(row);
        let probabilities = probs.row(pos).to_vec();
        let argmax = crate::tensor::argmax(&probabilities);
        let explanation = self.explain(&x, argmax, ids[pos])?;
        let prediction = explanation.class;
        let artifact = QueryArtifact {
            instance_id: ids[pos],
            step: self.step,
            budget: self.budget,
            x,
            prediction,
            confidence: probabilities[prediction],
            probabilities,
            explanation,
        };
        self.pending = Some(artifact.clone());
        Ok(artifact)
    }

    /// Validates and logs a correction for the outstanding query and adds it
    /// to the labeled set. Returns whether a refit is now due; call
    /// [`Session::complete_step`] to run it.
    pub fn accept(&mut self, correction: &Correction) -> Result<bool> {
        let pending = self.pending.as_ref().ok_or(LoopError::WrongState(if self.done {
            "done"
        } else {
            "not awaiting feedback"
        }))?;
        if correction.instance_id != pending.instance_id {
            return Err(LoopError::InstanceMismatch {
                expected: pending.instance_id,
                got: correction.instance_id,
            });
        }
        if correction.label >= self.train.classes {
            return Err(LoopError::BadLabel {
                label: correction.label,
                classes: self.train.classes,
            });
        }
        correction.validate(&self.scheme)?;
        let correction = Correction::new(correction.instance_id, correction.label, correction.components.clone());
        if let Some(log) = self.log.as_mut() {
            log.append(self.step, &self.config.strategy.name(), &correction)?;
        }

        let pos = self
            .pool
            .iter()
            .position(|&r| self.train.ids[r] == correction.instance_id)
            .ok_or(LoopError::UnknownInstance(correction.instance_id))?;
        let row = self.pool[pos];
        match self.config.strategy.clone() {
            Strategy::None => self.push_original(row, correction.label, None),
            Strategy::Rrr { target, .. } => {
                let mask_target = match target {
                    RrrTarget::Input => MaskTarget::Input,
                    RrrTarget::LastConv => {
                        let s = self.mask_shape.as_ref().expect("rrr has a mask shape");
                        MaskTarget::LastConv {
                            grid_h: s[0],
                            grid_w: s[1],
                        }
                    }
                };
                let mask = to_mask(&correction, &self.scheme, mask_target)?;
                self.push_original(row, correction.label, Some(mask.into_data()));
            }
            Strategy::Ce(ce) => {
                let x = self.train.instance(row);
                let donors_x = self.train.x.select_rows(&self.labeled.rows);
                let seed = self
                    .config
                    .seed
                    .wrapping_mul(0xD6E8_FEB8_6659_FD93)
                    .wrapping_add(self.step as u64);
                let extra = to_counterexamples(
                    &x,
                    &correction,
                    ce,
                    &self.scheme,
                    &donors_x,
                    &self.labeled.row_labels,
                    &self.stats,
                    seed,
                )?;
                self.push_original(row, correction.label, None);
                for (xc, y) in extra {
                    self.labeled.x.extend_from_slice(xc.data());
                    self.labeled.labels.push(y);
                }
            }
        }
        self.pool.remove(pos);
        self.pending = None;
        self.step += 1;
        self.since_refit += 1;
        Ok(self.since_refit >= self.config.queries_per_refit || self.step >= self.budget)
    }

    /// Runs the refit (if due), records metrics and updates the done flag.
    pub fn complete_step(&mut self) -> Result<StepOutcome> {
        let mut metrics = None;
        if self.since_refit > 0 && (self.since_refit >= self.config.queries_per_refit || self.step >= self.budget) {
            self.refit()?;
            self.since_refit = 0;
            let point = self.record_metrics()?;
            if self.config.stop_acc.is_some_and(|t| point.test_accuracy >= t) {
                self.done = true;
            }
            metrics = Some(point);
            if self.persist_dir.is_some() {
                self.checkpoint()?;
            }
        }
        if self.step >= self.budget {
            self.done = true;
        }
        Ok(StepOutcome {
            step: self.step,
            metrics,
            done: self.done,
        })
    }

    /// [`Session::accept`] followed by [`Session::complete_step`].
    pub fn submit(&mut self, correction: &Correction) -> Result<StepOutcome> {
        self.accept(correction)?;
        self.complete_step()
    }
}

/// Repeats a `[H, W]` map over the channels of a `[C, H, W]` input.
fn broadcast_channels(map: &Tensor, input_shape: &[usize]) -> Tensor {
    let total: usize = input_shape.iter().product();
    if map.len() == total {
        return Tensor::from_parts(input_shape.to_vec(), map.data().to_vec());
    }
    let data = map.data().iter().copied().cycle().take(total).collect();
    Tensor::from_parts(input_shape.to_vec(), data)
}

/// Alg. 1: query, explain, ask, revise, until the budget is spent, the
/// accuracy target is met, or the oracle has no answer.
pub fn run_xil(session: &mut Session, oracle: &mut dyn UserOracle) -> Result<RunStatus> {
    loop {
        let query = match session.state() {
            SessionState::Done => return Ok(RunStatus::Finished),
            SessionState::AwaitingFeedback => session.pending.clone().expect("awaiting implies pending"),
            SessionState::Idle => session.next_query()?,
        };
        let answer = oracle.respond(&query, &session.scheme).map_err(|e| match e {
            e @ (LoopError::ReplayDesync { .. } | LoopError::OracleFailure(_)) => e,
            other => LoopError::OracleFailure(other.to_string()),
        })?;
        match answer {
            Some(c) => {
                session.submit(&c)?;
            }
            None => return Ok(RunStatus::Paused),
        }
    }
}

#[cfg(test)]
mod tests;
