use serde::{Deserialize, Serialize};

use super::ExplainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SchemeKind {
    TabularFeatures,
    ImageGrid { patch_h: usize, patch_w: usize },
}

/// Axis-aligned pixel rectangle of an image-grid component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// A partition of an instance's flat indices into interpretable components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScheme {
    pub kind: SchemeKind,
    /// Per-instance input shape the scheme covers.
    pub input_shape: Vec<usize>,
    components: Vec<Vec<usize>>,
    rects: Vec<Rect>,
}

impl ComponentScheme {
    /// One component per feature of a flat input.
    pub fn tabular(features: usize) -> Result<Self, ExplainError> {
        if features == 0 {
            return Err(ExplainError::InvalidScheme("zero features".into()));
        }
        Ok(Self {
            kind: SchemeKind::TabularFeatures,
            input_shape: vec![features],
            components: (0..features).map(|i| vec![i]).collect(),
            rects: Vec::new(),
        })
    }

    /// Row-major grid of `patch_h x patch_w` patches over an `[H, W]` or
    /// `[C, H, W]` input; edge patches are clipped. Each component spans
    /// every channel.
    pub fn image_grid(input_shape: &[usize], patch_h: usize, patch_w: usize) -> Result<Self, ExplainError> {
        let (c, h, w) = match input_shape {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => return Err(ExplainError::InvalidScheme(format!("image grid over shape {input_shape:?}"))),
        };
        if patch_h == 0 || patch_w == 0 || h == 0 || w == 0 || c == 0 {
            return Err(ExplainError::InvalidScheme(format!("patch {patch_h}x{patch_w} over {input_shape:?}")));
        }
        let mut components = Vec::new();
        let mut rects = Vec::new();
        for row in (0..h).step_by(patch_h) {
            for col in (0..w).step_by(patch_w) {
                let rect = Rect {
                    row,
                    col,
                    height: patch_h.min(h - row),
                    width: patch_w.min(w - col),
                };
                let mut idx = Vec::with_capacity(c * rect.height * rect.width);
                for ch in 0..c {
                    for r in row..row + rect.height {
                        for q in col..col + rect.width {
                            idx.push((ch * h + r) * w + q);
                        }
                    }
                }
                components.push(idx);
                rects.push(rect);
            }
        }
        Ok(Self {
            kind: SchemeKind::ImageGrid { patch_h, patch_w },
            input_shape: input_shape.to_vec(),
            components,
            rects,
        })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Flat input indices of component `j`.
    pub fn indices(&self, j: usize) -> &[usize] {
        &self.components[j]
    }

    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    /// Sum of `values` over each component.
    pub fn aggregate(&self, values: &[f64]) -> Vec<f64> {
        self.components.iter().map(|idx| idx.iter().map(|&i| values[i]).sum()).collect()
    }

    pub fn covers(&self, input_shape: &[usize]) -> bool {
        self.input_shape == input_shape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_partitions_the_input() {
        let s = ComponentScheme::image_grid(&[2, 5, 6], 2, 4).unwrap();
        assert_eq!(s.len(), 3 * 2);
        let mut seen = vec![0; 60];
        for j in 0..s.len() {
            for &i in s.indices(j) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(s.rects()[5], Rect { row: 4, col: 4, height: 1, width: 2 });
    }

    #[test]
    fn tabular_is_identity() {
        let s = ComponentScheme::tabular(3).unwrap();
        assert_eq!(s.indices(2), &[2]);
        assert!(ComponentScheme::tabular(0).is_err());
    }
}
