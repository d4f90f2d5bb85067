//! Datasets: synthetic generators, IDX ingestion, decoy corruption,
//! group-aware splits and confounder neutralization.

mod idx;
mod manifest;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::LabeledSet;
use crate::tensor::Tensor;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use manifest::{DatasetManifest, DecoySpec, SplitSpec, Source};
pub(crate) use synth::normal;
pub use synth::{confounded_two_feature, decoy_corrupt, garments, toy_color_dataset, DecoyParams, GarmentParams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("IDX file truncated: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("image {h}x{w} is smaller than 8x8")]
    ImageTooSmall { h: usize, w: usize },
    #[error("cannot split a dataset with a single group")]
    SingleGroup,
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

/// Generation role. Decoys are label-dependent in `Train` and random in
/// `Test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Train,
    Test,
}

/// Instances with parallel labels, ids, optional groups and optional
/// confounder masks (1 marks a known decoy pixel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[N, ...instance shape]`
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub groups: Option<Vec<u64>>,
    pub classes: usize,
    /// Same shape as `x`.
    pub masks: Option<Tensor>,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        let ids = (0..labels.len() as u64).collect();
        let ds = Self { x, labels, ids, groups: None, classes, masks: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.labels.len();
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.x.rank() < 2 || self.x.shape()[0] != n || self.ids.len() != n {
            return bad(format!("x {:?}, {} labels, {} ids", self.x.shape(), n, self.ids.len()));
        }
        if self.groups.as_ref().is_some_and(|g| g.len() != n) {
            return bad("group count differs from instance count".into());
        }
        if self.masks.as_ref().is_some_and(|m| m.shape() != self.x.shape()) {
            return bad("mask shape differs from instance shape".into());
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return bad(format!("label {y} >= {} classes", self.classes));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn instance_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn instance(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.instance_shape().to_vec(), self.x.row(i).to_vec())
    }

    pub fn mask(&self, i: usize) -> Option<Tensor> {
        self.masks
            .as_ref()
            .map(|m| Tensor::from_parts(self.instance_shape().to_vec(), m.row(i).to_vec()))
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            groups: self.groups.as_ref().map(|g| rows.iter().map(|&r| g[r]).collect()),
            classes: self.classes,
            masks: self.masks.as_ref().map(|m| m.select_rows(rows)),
        }
    }

    /// Keeps the listed classes, relabelled `0..classes.len()` in the given
    /// order.
    pub fn select_classes(&self, classes: &[usize]) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut out = self.subset(&rows);
        out.labels = out
            .labels
            .iter()
            .map(|y| classes.iter().position(|c| c == y).expect("filtered"))
            .collect();
        out.classes = classes.len();
        out
    }

    pub fn take(&self, n: usize) -> Self {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows)
    }

    pub fn labeled_set(&self) -> LabeledSet {
        LabeledSet {
            x: self.x.clone(),
            labels: self.labels.clone(),
            masks: self.masks.clone(),
        }
    }
}

/// Splits by group so no group straddles the boundary. Groups are shuffled
/// by `seed` and assigned to train until the train share of instances
/// reaches `ratio`. Instances without a group id form singleton groups.
pub fn group_split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let groups: Vec<u64> = match &ds.groups {
        Some(g) => g.clone(),
        None => ds.ids.clone(),
    };
    let mut distinct: Vec<u64> = groups.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(DataError::SingleGroup);
    }
    distinct.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ds.len() as f64;
    let mut train_groups = Vec::new();
    let mut count = 0usize;
    for g in &distinct {
        if count as f64 / n >= ratio {
            break;
        }
        train_groups.push(*g);
        count += groups.iter().filter(|&&x| x == *g).count();
    }
    if train_groups.len() == distinct.len() {
        // keep at least one group for testing
        train_groups.pop();
    }
    let (train, test): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| train_groups.contains(&groups[i]));
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeutralizeMode {
    /// Training mean over masked pixels only.
    RegionMean,
    /// Training mean over all pixels.
    GlobalMean,
}

/// Per-channel training means used to neutralize confounders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeans {
    pub region: Vec<f64>,
    pub global: Vec<f64>,
}

fn channels(instance_shape: &[usize]) -> usize {
    if instance_shape.len() == 3 {
        instance_shape[0]
    } else {
        1
    }
}

impl ChannelMeans {
    /// `x` and `masks` are `[N, H, W]` or `[N, C, H, W]`. Channels with no
    /// masked pixel fall back to the global mean.
    pub fn fit(x: &Tensor, masks: &Tensor) -> Result<Self, DataError> {
        if x.shape() != masks.shape() {
            return Err(DataError::Invalid("mask shape differs from instance shape".into()));
        }
        let c = channels(&x.shape()[1..]);
        let plane = x.row_width() / c;
        let mut sums = vec![(0.0, 0usize, 0.0, 0usize); c];
        for (i, (&v, &m)) in x.data().iter().zip(masks.data()).enumerate() {
            let ch = (i / plane) % c;
            let s = &mut sums[ch];
            s.2 += v;
            s.3 += 1;
            if m != 0.0 {
                s.0 += v;
                s.1 += 1;
            }
        }
        let global: Vec<f64> = sums.iter().map(|s| s.2 / s.3.max(1) as f64).collect();
        let region = sums
            .iter()
            .zip(&global)
            .map(|(s, g)| if s.1 > 0 { s.0 / s.1 as f64 } else { *g })
            .collect();
        Ok(Self { region, global })
    }
}

/// Replaces masked pixels of `x` (`[N, ...]`) with the per-channel training
/// mean; unmasked pixels are copied bit for bit.
pub fn neutralize_background(x: &Tensor, mask: &Tensor, mode: NeutralizeMode, stats: &ChannelMeans) -> Result<Tensor, DataError> {
    if x.shape() != mask.shape() {
        return Err(DataError::Invalid("mask shape differs from instance shape".into()));
    }
    let c = channels(&x.shape()[1..]);
    if stats.global.len() != c {
        return Err(DataError::Invalid(format!("{} channel means for {c} channels", stats.global.len())));
    }
    let means = match mode {
        NeutralizeMode::RegionMean => &stats.region,
        NeutralizeMode::GlobalMean => &stats.global,
    };
    let plane = x.row_width() / c;
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .enumerate()
        .map(|(i, (&v, &m))| if m != 0.0 { means[(i / plane) % c] } else { v })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}
