use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{confounded_two_feature, decoy_corrupt, garments, load_idx, toy_color_dataset};
use super::{DataError, Dataset, DecoyParams, GarmentParams, Role};

/// Where the instances of one split come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Source {
    Garments {
        n: usize,
        seed: u64,
        #[serde(default)]
        params: GarmentParams,
    },
    ToyColor {
        n: usize,
        seed: u64,
    },
    TwoFeature {
        n: usize,
        seed: u64,
    },
    /// IDX pair; relative paths resolve against the manifest's directory.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep (and relabel) only these classes.
        #[serde(default)]
        classes: Option<Vec<usize>>,
        /// Keep the first `limit` instances after class selection.
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoySpec {
    #[serde(default = "default_patch")]
    pub patch: usize,
    pub seed: u64,
}

fn default_patch() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub source: Source,
    pub role: Role,
    #[serde(default)]
    pub decoy: Option<DecoySpec>,
}

/// Declarative description of a train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub train: SplitSpec,
    pub test: SplitSpec,
}

impl SplitSpec {
    pub fn build(&self, base_dir: &Path) -> Result<Dataset, DataError> {
        let ds = match &self.source {
            Source::Garments { n, seed, params } => garments(*n, *seed, params)?,
            Source::ToyColor { n, seed } => toy_color_dataset(*n, *seed, self.role)?,
            Source::TwoFeature { n, seed } => confounded_two_feature(*n, *seed, self.role)?,
            Source::Idx {
                images,
                labels,
                classes,
                limit,
            } => {
                let mut ds = load_idx(&base_dir.join(images), &base_dir.join(labels))?;
                if let Some(c) = classes {
                    ds = ds.select_classes(c);
                }
                if let Some(l) = limit {
                    ds = ds.take(*l);
                }
                ds
            }
        };
        match self.decoy {
            Some(d) => decoy_corrupt(&ds, self.role, DecoyParams { patch: d.patch }, d.seed),
            None => Ok(ds),
        }
    }
}

impl DatasetManifest {
    /// Two-class 28x28 garments, 1000 train / 1000 test, with 4x4 corner
    /// decoys.
    pub fn decoy_preset(seed: u64) -> Self {
        let split = |n, s: u64, role| SplitSpec {
            source: Source::Garments {
                n,
                seed: s,
                params: GarmentParams::default(),
            },
            role,
            decoy: Some(DecoySpec { patch: 4, seed: s.wrapping_add(100) }),
        };
        Self {
            name: "decoy-garments".into(),
            train: split(1000, seed.wrapping_mul(2), Role::Train),
            test: split(1000, seed.wrapping_mul(2) + 1, Role::Test),
        }
    }

    /// 3x3 toy images with a bottom-left confounder pixel.
    pub fn toy_preset(seed: u64) -> Self {
        let split = |n, s: u64, role| SplitSpec {
            source: Source::ToyColor { n, seed: s },
            role,
            decoy: None,
        };
        Self {
            name: "toy-color".into(),
            train: split(200, seed.wrapping_mul(2), Role::Train),
            test: split(200, seed.wrapping_mul(2) + 1, Role::Test),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Builds both splits. Test ids are offset past the train ids so the
    /// two never collide.
    pub fn build(&self, base_dir: &Path) -> Result<(Dataset, Dataset), DataError> {
        let train = self.train.build(base_dir)?;
        let mut test = self.test.build(base_dir)?;
        let offset = train.ids.iter().max().map_or(0, |m| m + 1);
        test.ids.iter_mut().for_each(|id| *id += offset);
        if train.instance_shape() != test.instance_shape() || train.classes != test.classes {
            return Err(DataError::Invalid(format!(
                "train {:?}/{} classes vs test {:?}/{} classes",
                train.instance_shape(),
                train.classes,
                test.instance_shape(),
                test.classes
            )));
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_build() {
        let m = DatasetManifest::decoy_preset(1);
        let text = serde_json::to_string_pretty(&m).unwrap();
        assert_eq!(serde_json::from_str::<DatasetManifest>(&text).unwrap(), m);
        let small = DatasetManifest {
            train: SplitSpec {
                source: Source::Garments { n: 20, seed: 1, params: GarmentParams::default() },
                ..m.train.clone()
            },
            test: SplitSpec {
                source: Source::Garments { n: 10, seed: 2, params: GarmentParams::default() },
                ..m.test.clone()
            },
            ..m
        };
        let (train, test) = small.build(Path::new(".")).unwrap();
        assert_eq!((train.len(), test.len()), (20, 10));
        assert!(train.masks.is_some() && test.masks.is_some());
        assert_eq!(test.ids[0], 20);
    }

    #[test]
    fn idx_source_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = 0x803u32.to_be_bytes().to_vec();
        for v in [3u32, 8, 8] {
            img.extend(v.to_be_bytes());
        }
        img.extend(vec![128u8; 3 * 64]);
        let mut lab = 0x801u32.to_be_bytes().to_vec();
        lab.extend(3u32.to_be_bytes());
        lab.extend([2u8, 0, 2]);
        std::fs::write(dir.path().join("img.idx"), img).unwrap();
        std::fs::write(dir.path().join("lab.idx"), lab).unwrap();
        let spec: SplitSpec = serde_json::from_str(
            r#"{"source": {"kind": "idx", "images": "img.idx", "labels": "lab.idx", "classes": [0, 2]},
                "role": "train", "decoy": {"seed": 3}}"#,
        )
        .unwrap();
        let ds = spec.build(dir.path()).unwrap();
        assert_eq!(ds.labels, vec![1, 0, 1]);
        assert_eq!(ds.classes, 2);
        assert_eq!(ds.masks.unwrap().sum(), 48.0);
    }

    #[test]
    fn unknown_path_is_an_error() {
        let spec = SplitSpec {
            source: Source::Idx { images: "nope".into(), labels: "nope".into(), classes: None, limit: None },
            role: Role::Train,
            decoy: None,
        };
        assert!(matches!(spec.build(Path::new("/nonexistent")), Err(DataError::Io(_))));
    }
}
