use super::ExplainError;
use crate::autodiff::Tape;
use crate::models::{Model, ModelError};
use crate::tensor::Tensor;

fn one_row(model: &Model, x: &Tensor, class: usize) -> Result<Tensor, ExplainError> {
    if class >= model.spec.classes {
        return Err(ExplainError::BadClass { class, classes: model.spec.classes });
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Ok(Tensor::from_parts(shape, x.data().to_vec()))
}

fn one_hot(k: usize, class: usize) -> Tensor {
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    Tensor::from_parts(vec![1, k], v)
}

/// `d log p_class / dx`, shaped like `x`.
pub fn input_gradient(model: &Model, x: &Tensor, class: usize) -> Result<Tensor, ExplainError> {
    let batch = one_row(model, x, class)?;
    let tape = Tape::new();
    let fp = model.forward(&tape, &batch)?;
    let target = fp
        .logits
        .log_softmax()
        .and_then(|lp| lp.mask_mul(&one_hot(model.spec.classes, class)))
        .and_then(|v| v.sum())
        .map_err(ModelError::from)?;
    let g = tape.gradient(&target, &[&fp.input], false).map_err(ModelError::from)?.remove(0).var;
    let v = g.value();
    Ok(Tensor::from_parts(x.shape().to_vec(), v.data().to_vec()))
}

/// Grad-CAM at the last conv layer for the class logit, bilinearly resized
/// to the input's `[H, W]`.
pub fn gradcam(model: &Model, x: &Tensor, class: usize) -> Result<Tensor, ExplainError> {
    if model.spec.last_conv_grid().is_none() {
        return Err(ExplainError::NotConvModel);
    }
    let batch = one_row(model, x, class)?;
    let tape = Tape::new();
    let fp = model.forward(&tape, &batch)?;
    let h = fp.last_conv.ok_or(ExplainError::NotConvModel)?;
    let score = fp
        .logits
        .mask_mul(&one_hot(model.spec.classes, class))
        .and_then(|v| v.sum())
        .map_err(ModelError::from)?;
    let g = tape.gradient(&score, &[&h], false).map_err(ModelError::from)?.remove(0).var;
    let (grad, act) = (g.value(), h.value());
    let s = act.shape();
    let (c, gh, gw) = (s[1], s[2], s[3]);
    let plane = gh * gw;
    let mut cam = vec![0.0; plane];
    for ch in 0..c {
        let gs = &grad.data()[ch * plane..(ch + 1) * plane];
        let alpha = gs.iter().sum::<f64>() / plane as f64;
        for (o, a) in cam.iter_mut().zip(&act.data()[ch * plane..(ch + 1) * plane]) {
            *o += alpha * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let (ih, iw) = match model.spec.input_shape.as_slice() {
        [h, w] | [_, h, w] => (*h, *w),
        _ => return Err(ExplainError::NotConvModel),
    };
    Ok(bilinear_resize(&Tensor::from_parts(vec![gh, gw], cam), ih, iw))
}

/// Half-pixel-centred bilinear interpolation of a 2D map, edges clamped.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let src = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let p = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, p - lo as f64)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = src(r, out_h, h);
        for q in 0..out_w {
            let (c0, c1, fc) = src(q, out_w, w);
            let top = d[r0 * w + c0] * (1.0 - fc) + d[r0 * w + c1] * fc;
            let bot = d[r1 * w + c0] * (1.0 - fc) + d[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    Tensor::from_parts(vec![out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::models::{Architecture, Classifier, ModelSpec, Standardizer};

    fn cnn(seed: u64) -> Model {
        let spec = ModelSpec {
            architecture: Architecture::Cnn { conv_channels: vec![3, 4], kernel: 3, pool: 2, dense: vec![5] },
            input_shape: vec![1, 8, 8],
            classes: 3,
        };
        Model::init(spec, seed).unwrap()
    }

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn logreg_gradient_closed_form() {
        let model = Model::init(ModelSpec::logreg(5, 3), 4).unwrap();
        let x = random(vec![5], 1);
        let g = input_gradient(&model, &x, 2).unwrap();
        let p = model.predict_proba(&x.reshape(vec![1, 5]).unwrap()).unwrap();
        let w = &model.params[0];
        for i in 0..5 {
            let expect = w.data()[i * 3 + 2] - (0..3).map(|j| p.data()[j] * w.data()[i * 3 + j]).sum::<f64>();
            assert!((g.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut model = Model::init(ModelSpec::mlp(vec![6, 8, 3]), 2).unwrap();
        model = model.with_standardizer(Standardizer::fit(&random(vec![10, 6], 3)));
        let x = random(vec![6], 5);
        let g = input_gradient(&model, &x, 1).unwrap();
        let fd = central_difference(&x, 1e-6, |xp| {
            let p = model.predict_proba(&xp.reshape(vec![1, 6]).unwrap()).unwrap();
            p.data()[1].ln()
        });
        assert!(relative_error(&g, &fd) <= 1e-4);

        let model = cnn(1);
        let x = random(vec![1, 8, 8], 6);
        let g = input_gradient(&model, &x, 0).unwrap();
        let fd = central_difference(&x, 1e-6, |xp| {
            let p = model.predict_proba(&xp.reshape(vec![1, 1, 8, 8]).unwrap()).unwrap();
            p.data()[0].ln()
        });
        assert!(relative_error(&g, &fd) <= 1e-4);
    }

    #[test]
    fn constant_model_has_zero_gradient() {
        let mut model = Model::init(ModelSpec::mlp(vec![4, 3, 2]), 0).unwrap();
        for p in &mut model.params {
            *p = Tensor::zeros(p.shape().to_vec());
        }
        let g = input_gradient(&model, &random(vec![4], 0), 0).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradcam_shape_sign_and_errors() {
        let model = cnn(3);
        for seed in 0..5 {
            let cam = gradcam(&model, &random(vec![1, 8, 8], seed), (seed % 3) as usize).unwrap();
            assert_eq!(cam.shape(), &[8, 8]);
            assert!(cam.data().iter().all(|v| *v >= 0.0));
        }
        let mlp = Model::init(ModelSpec::mlp(vec![4, 3, 2]), 0).unwrap();
        assert!(matches!(gradcam(&mlp, &random(vec![4], 0), 0), Err(ExplainError::NotConvModel)));
        assert!(matches!(gradcam(&model, &random(vec![1, 8, 8], 0), 3), Err(ExplainError::BadClass { .. })));
    }

    #[test]
    fn gradcam_invariant_to_logit_shift() {
        let model = cnn(8);
        let x = random(vec![1, 8, 8], 2);
        let before = gradcam(&model, &x, 1).unwrap();
        let mut shifted = model.clone();
        let last = shifted.params.len() - 1;
        shifted.params[last] = shifted.params[last].map(|b| b + 3.5).unwrap();
        let after = gradcam(&shifted, &x, 1).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-9);
    }

    #[test]
    fn identity_conv_toy_net() {
        // one 1x1 conv with weight 1 (h = relu(x)), then a dense layer
        let spec = ModelSpec {
            architecture: Architecture::Cnn { conv_channels: vec![1], kernel: 1, pool: 1, dense: vec![] },
            input_shape: vec![1, 3, 3],
            classes: 2,
        };
        let mut model = Model::init(spec, 0).unwrap();
        model.params[0] = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        model.params[2] = random(vec![9, 2], 4);
        let x = random(vec![1, 3, 3], 9);
        let cam = gradcam(&model, &x, 0).unwrap();
        // d z_0 / d h = column 0 of the dense weights; alpha is its mean
        let g: f64 = (0..9).map(|i| model.params[2].data()[i * 2]).sum::<f64>() / 9.0;
        for (c, v) in cam.data().iter().zip(x.data()) {
            assert!((c - (g * v.max(0.0)).max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let m = Tensor::full(vec![2, 3], 0.7);
        assert!(bilinear_resize(&m, 5, 7).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let m = random(vec![3, 3], 1);
        assert_eq!(bilinear_resize(&m, 3, 3), m);
        // 1x2 -> 1x4: [a, a*3/4+b/4, a/4+b*3/4, b]
        let up = bilinear_resize(&Tensor::matrix(1, 2, vec![0.0, 4.0]).unwrap(), 1, 4);
        assert_eq!(up.data(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
