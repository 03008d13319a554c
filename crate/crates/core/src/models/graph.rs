use crate::error::{Error, Result};
use crate::nn::{init_params, Binding, InitScheme, ParameterStore};
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

use super::spec::{Activation, Architecture, BlackBoxSpec, DecoderSpec};

/// Items per forward pass when evaluating large batches.
const INFER_CHUNK: usize = 32;

/// Architecture plus parameters of either network.
#[derive(Debug, Clone)]
pub struct ModelGraph<T: Real = f32> {
    pub arch: Architecture,
    pub image_size: usize,
    pub params: ParameterStore<T>,
    pub init: InitScheme,
}

/// Encoder outputs: the activation right before the pool and the pooled latent.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub skip: Var,
    pub latent: Var,
}

/// An equivalency map and its raster-order sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Emap<T: Real = f32> {
    /// `[1, 1, S, S]`
    pub map: Tensor<T>,
    pub t_hat: T,
}

impl<T: Real> ModelGraph<T> {
    /// Wraps an existing store after checking it matches the architecture.
    pub fn from_store(
        arch: Architecture,
        image_size: usize,
        params: ParameterStore<T>,
        init: InitScheme,
    ) -> Result<Self> {
        arch.validate(image_size)?;
        let specs = arch.param_specs(image_size, false);
        if specs.len() != params.len() {
            return Err(Error::shape(format!(
                "architecture has {} parameters but the store holds {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(params.iter()) {
            if spec.name != p.name || spec.shape != p.value.shape() {
                return Err(Error::shape(format!(
                    "expected parameter `{}` {:?}, found `{}` {:?}",
                    spec.name,
                    spec.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(ModelGraph {
            arch,
            image_size,
            params,
            init,
        })
    }

    pub fn build_blackbox(spec: BlackBoxSpec, image_size: usize, init: InitScheme) -> Result<Self> {
        let arch = Architecture::BlackBox { encoder: spec };
        arch.validate(image_size)?;
        let params = init_params(&arch.param_specs(image_size, true), &init)?;
        Ok(ModelGraph {
            arch,
            image_size,
            params,
            init,
        })
    }

    /// Interpretable network whose encoder is a frozen copy of `blackbox`'s
    /// feature extractor and whose decoder is freshly initialised.
    pub fn build_interpretable(blackbox: &ModelGraph<T>, decoder: DecoderSpec, init: InitScheme) -> Result<Self> {
        let Architecture::BlackBox { encoder } = blackbox.arch else {
            return Err(Error::arg("build_interpretable needs a black-box model"));
        };
        let arch = Architecture::Interpretable { encoder, decoder };
        arch.validate(blackbox.image_size)?;
        let mut params = init_params(&arch.param_specs(blackbox.image_size, false), &init)?;
        params.copy_values_from(&blackbox.params, "enc.")?;
        Ok(ModelGraph {
            arch,
            image_size: blackbox.image_size,
            params,
            init,
        })
    }

    /// Interpretable network with every parameter randomly initialised and trainable.
    pub fn build_interpretable_from_scratch(
        encoder: BlackBoxSpec,
        decoder: DecoderSpec,
        image_size: usize,
        init: InitScheme,
    ) -> Result<Self> {
        let arch = Architecture::Interpretable { encoder, decoder };
        arch.validate(image_size)?;
        let params = init_params(&arch.param_specs(image_size, true), &init)?;
        Ok(ModelGraph {
            arch,
            image_size,
            params,
            init,
        })
    }

    pub fn is_interpretable(&self) -> bool {
        matches!(self.arch, Architecture::Interpretable { .. })
    }

    pub fn encoder_bytes(&self) -> Vec<u8> {
        self.params.bytes_with_prefix("enc.")
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            arch: self.arch,
            image_size: self.image_size,
            params: self.params.cast(),
            init: self.init,
        }
    }

    fn var(&self, b: &Binding, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| b.var(i))
            .ok_or_else(|| Error::Invariant(format!("model has no parameter `{name}`")))
    }

    fn conv(&self, tape: &mut Tape<T>, b: &Binding, x: Var, layer: &str) -> Result<Var> {
        let w = self.var(b, &format!("{layer}.weight"))?;
        let bias = self.var(b, &format!("{layer}.bias"))?;
        tape.conv2d(x, w, bias, Padding::Same, 1)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.image_size;
        match shape {
            [_, 1, h, w] if *h == s && *w == s => Ok(()),
            _ => Err(Error::shape(format!(
                "model expects images of shape [N, 1, {s}, {s}], got {shape:?}"
            ))),
        }
    }

    pub fn record_encoder(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Features> {
        self.check_input(tape.value(x).shape())?;
        let mut h = x;
        for i in 0..self.arch.encoder().conv_layers {
            let c = self.conv(tape, b, h, &format!("enc.conv{i}"))?;
            h = tape.relu(c);
        }
        let latent = tape.maxpool2x2(h)?;
        Ok(Features { skip: h, latent })
    }

    /// Decoder output (the E-map) `[N, 1, S, S]` from encoder features.
    pub fn record_decoder(&self, tape: &mut Tape<T>, b: &Binding, f: Features) -> Result<Var> {
        let dec = self
            .arch
            .decoder()
            .ok_or_else(|| Error::arg("a black-box model has no decoder"))?;
        let w = self.var(b, "dec.up.weight")?;
        let bias = self.var(b, "dec.up.bias")?;
        let mut up = tape.transpose_conv2d(f.latent, w, bias, 2, 2)?;
        if dec.upsample_activation == Activation::Relu {
            up = tape.relu(up);
        }
        let mut h = tape.concat_channels(up, f.skip)?;
        for i in 0..dec.conv_layers {
            let c = self.conv(tape, b, h, &format!("dec.conv{i}"))?;
            h = tape.relu(c);
        }
        let out = self.conv(tape, b, h, "dec.out")?;
        Ok(match dec.penultimate_activation {
            Activation::Relu => tape.relu(out),
            Activation::Linear => out,
        })
    }

    /// Test statistic `[N, 1]` from encoder features. For the interpretable
    /// network this is the unity-weight sum of the E-map.
    pub fn record_head(&self, tape: &mut Tape<T>, b: &Binding, f: Features) -> Result<Var> {
        if self.is_interpretable() {
            let emap = self.record_decoder(tape, b, f)?;
            tape.sum_per_item(emap)
        } else {
            let flat = tape.flatten(f.latent)?;
            let w = self.var(b, "fc.weight")?;
            let bias = self.var(b, "fc.bias")?;
            tape.dense(flat, w, bias)
        }
    }

    pub fn record_forward(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let f = self.record_encoder(tape, b, x)?;
        self.record_head(tape, b, f)
    }

    fn chunked<R>(
        &self,
        batch: &Tensor<T>,
        mut f: impl FnMut(&mut Tape<T>, &Binding, Var) -> Result<R>,
    ) -> Result<Vec<R>> {
        self.check_input(batch.shape())?;
        let n = batch.len_outer();
        let mut out = Vec::new();
        let mut tape = Tape::new();
        for start in (0..n).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..n.min(start + INFER_CHUNK)).collect();
            tape.clear();
            let b = self.params.bind_frozen(&mut tape);
            let x = tape.constant(batch.select(&idx)?);
            out.push(f(&mut tape, &b, x)?);
        }
        Ok(out)
    }

    /// Test statistics `[N, 1]` of a batch `[N, 1, S, S]`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let parts = self.chunked(batch, |tape, b, x| {
            let t = self.record_forward(tape, b, x)?;
            Ok(tape.value(t).clone())
        })?;
        Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
    }

    /// Frozen-encoder features of a batch as `(latent, skip)` values.
    pub fn encode(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let parts = self.chunked(batch, |tape, b, x| {
            let f = self.record_encoder(tape, b, x)?;
            Ok((tape.value(f.latent).clone(), tape.value(f.skip).clone()))
        })?;
        let latent: Vec<_> = parts.iter().map(|p| &p.0).collect();
        let skip: Vec<_> = parts.iter().map(|p| &p.1).collect();
        Ok((Tensor::concat_outer(&latent)?, Tensor::concat_outer(&skip)?))
    }

    /// E-maps `[N, 1, S, S]` and the network outputs `[N, 1]` of a batch.
    pub fn emaps(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let parts = self.chunked(batch, |tape, b, x| {
            let f = self.record_encoder(tape, b, x)?;
            let emap = self.record_decoder(tape, b, f)?;
            let t = tape.sum_per_item(emap)?;
            Ok((tape.value(emap).clone(), tape.value(t).clone()))
        })?;
        let maps: Vec<_> = parts.iter().map(|p| &p.0).collect();
        let ts: Vec<_> = parts.iter().map(|p| &p.1).collect();
        Ok((Tensor::concat_outer(&maps)?, Tensor::concat_outer(&ts)?))
    }

    /// E-map of one image `[1, 1, S, S]` (or `[S, S]`).
    pub fn compute_emap(&self, image: &Tensor<T>) -> Result<Emap<T>> {
        let s = self.image_size;
        let image = if image.rank() == 2 {
            image.clone().reshape(&[1, 1, s, s])?
        } else {
            image.clone()
        };
        if image.len_outer() != 1 {
            return Err(Error::shape("compute_emap takes a single image"));
        }
        let (map, t) = self.emaps(&image)?;
        Ok(Emap { map, t_hat: t.item() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InitKind;

    fn small_bb(image_size: usize) -> ModelGraph<f32> {
        let spec = BlackBoxSpec {
            conv_layers: 3,
            filters: 3,
            kernel: 3,
        };
        ModelGraph::build_blackbox(spec, image_size, InitScheme::glorot(1)).unwrap()
    }

    fn small_dec() -> DecoderSpec {
        DecoderSpec {
            conv_layers: 2,
            filters: 4,
            kernel: 3,
            ..Default::default()
        }
    }

    fn probe(n: usize, s: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 1, s, s], |i| ((i * 7919) % 101) as f32 / 101.0)
    }

    #[test]
    fn zero_weights_give_the_bias() {
        let mut bb = small_bb(8);
        for p in bb.params.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        bb.params.get_mut("fc.bias").unwrap().value = Tensor::scalar(0.75);
        let t = bb.forward(&probe(3, 8)).unwrap();
        assert_eq!(t.data(), &[0.75; 3]);
    }

    #[test]
    fn interpretable_copies_and_freezes_the_encoder() {
        let bb = small_bb(8);
        let m = ModelGraph::build_interpretable(&bb, small_dec(), InitScheme::glorot(2)).unwrap();
        assert_eq!(m.encoder_bytes(), bb.encoder_bytes());
        assert!(m
            .params
            .iter()
            .filter(|p| p.name.starts_with("enc."))
            .all(|p| !p.trainable));
        assert!(m
            .params
            .iter()
            .filter(|p| p.name.starts_with("dec."))
            .all(|p| p.trainable));
        assert!(ModelGraph::build_interpretable(&m, small_dec(), InitScheme::glorot(2)).is_err());
    }

    #[test]
    fn unity_head_equals_raster_sum() {
        let bb = small_bb(16);
        let m = ModelGraph::build_interpretable(&bb, small_dec(), InitScheme::glorot(3)).unwrap();
        let x = probe(5, 16);
        let (maps, t) = m.emaps(&x).unwrap();
        let fwd = m.forward(&x).unwrap();
        for i in 0..5 {
            let mut acc = 0.0f32;
            for &v in maps.outer(i) {
                acc += v;
            }
            assert_eq!(acc.to_bits(), t[i].to_bits());
            assert_eq!(fwd[i].to_bits(), t[i].to_bits());
        }
        let e = m.compute_emap(&x.select(&[2]).unwrap()).unwrap();
        assert_eq!(e.map.sum().to_bits(), e.t_hat.to_bits());
        assert_eq!(e.t_hat.to_bits(), t[2].to_bits());
    }

    #[test]
    fn zero_decoder_gives_zero_map() {
        let bb = small_bb(8);
        let mut m = ModelGraph::build_interpretable(&bb, small_dec(), InitScheme::glorot(4)).unwrap();
        for p in m.params.iter_mut().filter(|p| p.name.starts_with("dec.")) {
            p.value = Tensor::zeros(p.value.shape());
        }
        let e = m.compute_emap(&probe(1, 8)).unwrap();
        assert!(e.map.data().iter().all(|&v| v == 0.0));
        assert_eq!(e.t_hat, 0.0);
    }

    #[test]
    fn relu_penultimate_gives_nonnegative_maps() {
        let bb = small_bb(8);
        let dec = DecoderSpec {
            penultimate_activation: Activation::Relu,
            ..small_dec()
        };
        let m = ModelGraph::build_interpretable(&bb, dec, InitScheme::new(InitKind::RandomNormal, 5)).unwrap();
        let (maps, _) = m.emaps(&probe(4, 8)).unwrap();
        assert!(maps.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn emap_matches_input_size() {
        for s in [32, 64, 128] {
            let bb = ModelGraph::<f32>::build_blackbox(
                BlackBoxSpec {
                    conv_layers: 1,
                    filters: 2,
                    kernel: 3,
                },
                s,
                InitScheme::glorot(6),
            )
            .unwrap();
            let dec = DecoderSpec {
                conv_layers: 0,
                filters: 2,
                kernel: 3,
                ..Default::default()
            };
            let m = ModelGraph::build_interpretable(&bb, dec, InitScheme::glorot(7)).unwrap();
            let e = m.compute_emap(&probe(1, s)).unwrap();
            assert_eq!(e.map.shape(), &[1, 1, s, s]);
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let bb = small_bb(8);
        assert!(matches!(bb.forward(&probe(1, 16)), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_gradients_only() {
        let bb = small_bb(8);
        let mut m = ModelGraph::build_interpretable(&bb, small_dec(), InitScheme::glorot(8)).unwrap();
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let x = tape.constant(probe(2, 8));
        let t = m.record_forward(&mut tape, &b, x).unwrap();
        let loss = tape.mse_loss(t, &Tensor::zeros(&[2, 1])).unwrap();
        let g = tape.backward(loss).unwrap();
        m.params.collect_grads(&g, &b);
        for p in m.params.iter() {
            assert_eq!(p.grad().is_some(), p.name.starts_with("dec."), "{}", p.name);
        }
    }

    #[test]
    fn from_store_checks_layout() {
        let bb = small_bb(8);
        assert!(ModelGraph::from_store(bb.arch, 8, bb.params.clone(), bb.init).is_ok());
        assert!(ModelGraph::from_store(bb.arch, 16, bb.params.clone(), bb.init).is_err());
    }
}
