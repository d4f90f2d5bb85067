use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Role};
use crate::tensor::Tensor;

/// Standard normal draw (Box-Muller).
pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// 3x3 binary images labelled 1 iff both top corners are 1. The
/// bottom-left pixel is a confounder: equal to the label in the train role,
/// random in the test role. Masks mark that pixel.
pub fn toy_color_dataset(n: usize, seed: u64, role: Role) -> Result<Dataset, DataError> {
    if n < 4 {
        return Err(DataError::Invalid(format!("toy dataset needs n >= 4, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * 9);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut img: Vec<f64> = (0..9).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let y = (img[0] == 1.0 && img[2] == 1.0) as usize;
        img[6] = match role {
            Role::Train => y as f64,
            Role::Test => rng.gen_bool(0.5) as u8 as f64,
        };
        x.extend(img);
        labels.push(y);
    }
    let mut mask = [0.0; 9];
    mask[6] = 1.0;
    let mut ds = Dataset::new(Tensor::from_parts(vec![n, 3, 3], x), labels, 2)?;
    ds.masks = Some(Tensor::from_parts(vec![n, 3, 3], mask.repeat(n)));
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GarmentParams {
    /// Fraction of labels flipped after rendering, so the silhouettes are
    /// an imperfect signal.
    pub label_noise: f64,
    /// Background pixels are uniform in `[0, background)`.
    pub background: f64,
    /// Per-pixel Gaussian texture on the garment.
    pub texture: f64,
}

impl Default for GarmentParams {
    fn default() -> Self {
        Self {
            label_noise: 0.05,
            background: 0.05,
            texture: 0.1,
        }
    }
}

/// Procedural 28x28 two-class garments: class 0 tops (torso with sleeves),
/// class 1 trousers (waistband over two legs). Shapes vary in position,
/// size and brightness; the four 4x4 corners are always background.
pub fn garments(n: usize, seed: u64, params: &GarmentParams) -> Result<Dataset, DataError> {
    const S: usize = 28;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * S * S);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let mut img: Vec<f64> = (0..S * S).map(|_| rng.gen::<f64>() * params.background).collect();
        let cx = 14 + rng.gen_range(-2i64..=2);
        let shade = rng.gen_range(0.45..0.95);
        let paint = |img: &mut Vec<f64>, rng: &mut ChaCha8Rng, r: i64, c: i64| {
            if (0..S as i64).contains(&r) && (0..S as i64).contains(&c) {
                img[r as usize * S + c as usize] = (shade + params.texture * normal(rng)).clamp(0.0, 1.0);
            }
        };
        if class == 0 {
            let top = rng.gen_range(4i64..=6);
            let height = rng.gen_range(15i64..=19);
            let hw = rng.gen_range(5i64..=7);
            let sleeve_rows = rng.gen_range(5i64..=8);
            let sleeve_w = rng.gen_range(3i64..=5);
            for r in top..top + height {
                let w = if r < top + sleeve_rows { hw + sleeve_w } else { hw };
                for c in cx - w..cx + w {
                    paint(&mut img, &mut rng, r, c);
                }
            }
        } else {
            let top = rng.gen_range(3i64..=5);
            let height = rng.gen_range(19i64..=22);
            let hw = rng.gen_range(4i64..=6);
            let gap = rng.gen_range(1i64..=2);
            for r in top..top + height {
                for c in cx - hw..cx + hw {
                    let in_gap = r >= top + 3 && (cx - gap..cx + gap).contains(&c);
                    if !in_gap {
                        paint(&mut img, &mut rng, r, c);
                    }
                }
            }
        }
        let y = if rng.gen_bool(params.label_noise.clamp(0.0, 1.0)) { 1 - class } else { class };
        x.extend(img);
        labels.push(y);
    }
    Dataset::new(Tensor::from_parts(vec![n, S, S], x), labels, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoyParams {
    pub patch: usize,
}

impl Default for DecoyParams {
    fn default() -> Self {
        Self { patch: 4 }
    }
}

/// Paints a `patch x patch` square into one uniformly chosen corner of
/// every image. Train role shade is `label / (K - 1)`; test role shade is
/// uniform over `{0, 1/(K-1), ..., 1}`. Masks mark the patch (in every
/// channel) and replace any existing masks.
pub fn decoy_corrupt(ds: &Dataset, role: Role, params: DecoyParams, seed: u64) -> Result<Dataset, DataError> {
    let shape = ds.instance_shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => return Err(DataError::Invalid(format!("decoys need image instances, got {shape:?}"))),
    };
    if h < 8 || w < 8 {
        return Err(DataError::ImageTooSmall { h, w });
    }
    let p = params.patch;
    if p == 0 || p > h / 2 || p > w / 2 {
        return Err(DataError::Invalid(format!("patch {p} for {h}x{w} images")));
    }
    let k = ds.classes.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = ds.x.data().to_vec();
    let mut masks = vec![0.0; x.len()];
    let width = ds.x.row_width();
    for (n, &y) in ds.labels.iter().enumerate() {
        let corner = rng.gen_range(0..4);
        let (r0, c0) = [(0, 0), (0, w - p), (h - p, 0), (h - p, w - p)][corner];
        let level = match role {
            Role::Train => y,
            Role::Test => rng.gen_range(0..k),
        };
        let shade = level as f64 / (k - 1) as f64;
        for ch in 0..c {
            for r in r0..r0 + p {
                for q in c0..c0 + p {
                    let i = n * width + (ch * h + r) * w + q;
                    x[i] = shade;
                    masks[i] = 1.0;
                }
            }
        }
    }
    Ok(Dataset {
        x: Tensor::from_parts(ds.x.shape().to_vec(), x),
        masks: Some(Tensor::from_parts(ds.x.shape().to_vec(), masks)),
        ..ds.clone()
    })
}

/// Two features: the first is the noisy true signal, the second equals the
/// label sign in the train role and is random in the test role.
pub fn confounded_two_feature(n: usize, seed: u64, role: Role) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let s = if y == 1 { 1.0 } else { -1.0 };
        x.push(s + normal(&mut rng));
        x.push(match role {
            Role::Train => s,
            Role::Test => if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        });
        labels.push(y);
    }
    let mut ds = Dataset::new(Tensor::from_parts(vec![n, 2], x), labels, 2)?;
    ds.masks = Some(Tensor::from_parts(vec![n, 2], [0.0, 1.0].repeat(n)));
    Ok(ds)
}
