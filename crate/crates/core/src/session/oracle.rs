use std::collections::{HashMap, VecDeque};
use std::path::Path;

use super::{LoopError, QueryArtifact};
use crate::data::Dataset;
use crate::explain::ComponentScheme;
use crate::feedback::{Correction, FeedbackLog};

/// Anything that can answer a query: a simulated annotator, a replayed log,
/// or a human behind the HTTP service.
pub trait UserOracle {
    /// `Ok(None)` means no answer is available yet and the loop should
    /// pause with the query outstanding.
    fn respond(&mut self, query: &QueryArtifact, scheme: &ComponentScheme) -> Result<Option<Correction>, LoopError>;
}

/// The components of `top_k` whose pixels touch the confounder mask.
pub fn simulated_correction(
    instance_id: u64,
    label: usize,
    top_k: &[usize],
    scheme: &ComponentScheme,
    confounder: Option<&[f64]>,
) -> Correction {
    let marked = match confounder {
        Some(mask) => top_k
            .iter()
            .copied()
            .filter(|&j| scheme.indices(j).iter().any(|&i| mask[i] != 0.0))
            .collect(),
        None => Vec::new(),
    };
    Correction::new(instance_id, label, marked)
}

/// A correct and complete annotator: returns the true label and marks every
/// top-k component that overlaps the known confounder.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    truth: HashMap<u64, (usize, Option<Vec<f64>>)>,
}

impl SimulatedOracle {
    pub fn new(truth: &Dataset) -> Self {
        let truth = (0..truth.len())
            .map(|i| (truth.ids[i], (truth.labels[i], truth.masks.as_ref().map(|m| m.row(i).to_vec()))))
            .collect();
        Self { truth }
    }
}

impl UserOracle for SimulatedOracle {
    fn respond(&mut self, query: &QueryArtifact, scheme: &ComponentScheme) -> Result<Option<Correction>, LoopError> {
        let (label, mask) = self
            .truth
            .get(&query.instance_id)
            .ok_or(LoopError::UnknownInstance(query.instance_id))?;
        Ok(Some(simulated_correction(
            query.instance_id,
            *label,
            &query.explanation.top_k,
            scheme,
            mask.as_deref(),
        )))
    }
}

/// Feeds back a recorded sequence of corrections, checking that each one
/// answers the query the session actually asked.
#[derive(Debug, Clone, Default)]
pub struct ReplayOracle {
    pending: VecDeque<Correction>,
}

impl ReplayOracle {
    pub fn new(corrections: impl IntoIterator<Item = Correction>) -> Self {
        Self {
            pending: corrections.into_iter().collect(),
        }
    }

    pub fn from_log(path: &Path) -> Result<Self, LoopError> {
        Ok(Self::new(FeedbackLog::read(path)?.into_iter().map(|r| r.correction)))
    }

    pub fn remaining(&self) -> usize {
        self.pending.len()
    }
}

impl UserOracle for ReplayOracle {
    fn respond(&mut self, query: &QueryArtifact, _scheme: &ComponentScheme) -> Result<Option<Correction>, LoopError> {
        match self.pending.front() {
            None => Ok(None),
            Some(c) if c.instance_id != query.instance_id => Err(LoopError::ReplayDesync {
                logged: c.instance_id,
                queried: query.instance_id,
            }),
            Some(_) => Ok(self.pending.pop_front()),
        }
    }
}
