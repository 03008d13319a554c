use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

use super::graph::ModelGraph;

/// Interpolation points differentiated per tape recording.
const IG_CHUNK: usize = 16;

/// Anything that maps a batch `[N, ...]` to one scalar per item `[N, 1]`.
pub trait ScalarModel<T: Real> {
    fn record_scalar(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

impl<T: Real> ScalarModel<T> for ModelGraph<T> {
    fn record_scalar(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let b = self.params.bind_frozen(tape);
        self.record_forward(tape, &b, x)
    }
}

impl<T: Real, F: Fn(&mut Tape<T>, Var) -> Result<Var>> ScalarModel<T> for F {
    fn record_scalar(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

/// `t = w†f + b`, the linear discriminant.
#[derive(Debug, Clone)]
pub struct LinearModel<T: Real = f32> {
    /// Decision template with the shape of one image.
    pub weights: Tensor<T>,
    pub bias: T,
}

impl<T: Real> ScalarModel<T> for LinearModel<T> {
    fn record_scalar(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let flat = tape.flatten(x)?;
        let d = self.weights.numel();
        let w = tape.constant(self.weights.clone().reshape(&[d, 1])?);
        let b = tape.constant(Tensor::scalar(self.bias));
        tape.dense(flat, w, b)
    }
}

/// `∂t/∂f` for every item of `batch`.
fn input_gradients<T: Real>(model: &impl ScalarModel<T>, batch: Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(batch, true);
    let t = model.record_scalar(&mut tape, x)?;
    let total = tape.sum_all(t)?;
    let grads = tape.backward(total)?;
    Ok(grads.wrt(x))
}

fn as_batch<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    if image.rank() == 4 {
        if image.len_outer() != 1 {
            return Err(Error::shape("attribution takes a single image"));
        }
        return Ok(image.clone());
    }
    image.clone().reshape(&shape)
}

/// `|∂t/∂f|` per pixel; the result has the shape of `image`.
pub fn saliency<T: Real>(model: &impl ScalarModel<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let g = input_gradients(model, as_batch(image)?)?;
    g.map(|v| v.abs()).reshape(image.shape())
}

/// Integrated gradients along the straight path from `baseline` (zero image
/// when `None`) using the right Riemann sum with `steps` points.
pub fn integrated_gradients<T: Real>(
    model: &impl ScalarModel<T>,
    image: &Tensor<T>,
    steps: usize,
    baseline: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if steps < 1 {
        return Err(Error::arg("integrated gradients needs at least one step"));
    }
    let f = as_batch(image)?;
    let base = match baseline {
        Some(b) if b.numel() != f.numel() => {
            return Err(Error::shape(format!(
                "baseline {:?} does not match image {:?}",
                b.shape(),
                image.shape()
            )))
        }
        Some(b) => b.clone().reshape(f.shape())?,
        None => Tensor::zeros(f.shape()),
    };
    let n = f.numel();
    let diff: Vec<T> = f.data().iter().zip(base.data()).map(|(&a, &b)| a - b).collect();
    let mut acc = vec![0.0f64; n];
    let ks: Vec<usize> = (1..=steps).collect();
    for chunk in ks.chunks(IG_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * n);
        for &k in chunk {
            let alpha = T::of_f64(k as f64 / steps as f64);
            data.extend(base.data().iter().zip(&diff).map(|(&b, &d)| b + alpha * d));
        }
        let mut shape = f.shape().to_vec();
        shape[0] = chunk.len();
        let g = input_gradients(model, Tensor::new(shape, data)?)?;
        for j in 0..chunk.len() {
            for (a, &v) in acc.iter_mut().zip(g.outer(j)) {
                *a += v.as_f64();
            }
        }
    }
    let out: Vec<T> = acc
        .iter()
        .zip(&diff)
        .map(|(&a, &d)| d * T::of_f64(a / steps as f64))
        .collect();
    Tensor::new(image.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Padding;

    fn linear() -> (LinearModel<f32>, Tensor<f32>) {
        let w = Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f32 - 7.5) / 3.0);
        let f = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i * 5) % 7) as f32 / 7.0);
        (LinearModel { weights: w, bias: 0.3 }, f)
    }

    #[test]
    fn linear_saliency_is_abs_template() {
        let (m, f) = linear();
        let s = saliency(&m, &f).unwrap();
        assert_eq!(s, m.weights.map(|v| v.abs()));
    }

    #[test]
    fn linear_ig_is_template_times_image() {
        let (m, f) = linear();
        let expected: Vec<f32> = m.weights.data().iter().zip(f.data()).map(|(w, x)| w * x).collect();
        for steps in [1, 3, 50, 97] {
            let ig = integrated_gradients(&m, &f, steps, None).unwrap();
            assert_eq!(ig.data(), &expected[..], "steps = {steps}");
        }
        assert!(integrated_gradients(&m, &f, 0, None).is_err());
    }

    #[test]
    fn constant_model_gives_zero_maps() {
        let model = |tape: &mut Tape<f32>, x: Var| -> Result<Var> {
            let n = tape.value(x).len_outer();
            Ok(tape.constant(Tensor::full(&[n, 1], 2.0)))
        };
        let (_, f) = linear();
        assert!(saliency(&model, &f).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(integrated_gradients(&model, &f, 10, None)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn ig_completeness_on_a_smooth_model() {
        let w = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
        let bias = Tensor::<f64>::from_fn(&[2], |i| 0.1 * i as f64);
        let model = move |tape: &mut Tape<f64>, x: Var| -> Result<Var> {
            let w = tape.constant(w.clone());
            let b = tape.constant(bias.clone());
            let c = tape.conv2d(x, w, b, Padding::Same, 1)?;
            let s = tape.sigmoid(c);
            tape.sum_per_item(s)
        };
        let f = Tensor::<f64>::from_fn(&[1, 1, 6, 6], |i| ((i * 13) % 17) as f64 / 4.0);
        let t = |img: &Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(img.clone());
            let y = model(&mut tape, x).unwrap();
            tape.value(y).item()
        };
        let delta = t(&f) - t(&Tensor::zeros(f.shape()));
        let fine: f64 = integrated_gradients(&model, &f, 2000, None).unwrap().sum();
        assert!(((fine - delta) / delta).abs() < 1e-3);
        let coarse: f64 = integrated_gradients(&model, &f, 200, None).unwrap().sum();
        assert!(((coarse - fine) / fine).abs() <= 0.02);
    }
}
