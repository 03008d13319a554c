use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
    /// Normal with mean 0 and standard deviation 0.05.
    RandomNormal,
    /// Uniform on `±0.05`.
    RandomUniform,
}

impl InitKind {
    pub const ALL: [InitKind; 3] = [InitKind::GlorotUniform, InitKind::RandomNormal, InitKind::RandomUniform];

    pub fn name(self) -> &'static str {
        match self {
            InitKind::GlorotUniform => "glorot_uniform",
            InitKind::RandomNormal => "random_normal",
            InitKind::RandomUniform => "random_uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        InitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown init scheme `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
    pub normal_std: f64,
    pub uniform_limit: f64,
    /// Start the decoder's one-filter output convolution at zero.
    #[serde(default)]
    pub zero_output: bool,
}

impl InitScheme {
    pub fn new(kind: InitKind, seed: u64) -> Self {
        InitScheme {
            kind,
            seed,
            normal_std: 0.05,
            uniform_limit: 0.05,
            zero_output: false,
        }
    }

    pub fn glorot(seed: u64) -> Self {
        Self::new(InitKind::GlorotUniform, seed)
    }
}

const OUTPUT_PREFIX: &str = "dec.out.";

/// Shape and fan sizes of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
    pub trainable: bool,
}

/// Draws every parameter from `scheme`; biases start at zero, as does the
/// decoder output layer when `scheme.zero_output` is set. Each parameter uses
/// its own random stream keyed by its position in `specs`.
pub fn init_params<T: Real>(specs: &[ParamSpec], scheme: &InitScheme) -> Result<ParameterStore<T>> {
    let mut store = ParameterStore::new();
    for (i, spec) in specs.iter().enumerate() {
        if spec.shape.is_empty() || spec.shape.contains(&0) {
            return Err(Error::shape(format!(
                "parameter `{}` has unresolved shape {:?}",
                spec.name, spec.shape
            )));
        }
        let value = if spec.is_bias || (scheme.zero_output && spec.name.starts_with(OUTPUT_PREFIX)) {
            Tensor::zeros(&spec.shape)
        } else {
            let mut rng = rng::stream(scheme.seed, Stream::Init, &[i as u64]);
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match scheme.kind {
                InitKind::GlorotUniform => {
                    let fans = spec.fan_in + spec.fan_out;
                    if fans == 0 {
                        return Err(Error::shape(format!("parameter `{}` has zero fan", spec.name)));
                    }
                    let limit = (6.0 / fans as f64).sqrt();
                    sample_uniform(&mut rng, limit, n)
                }
                InitKind::RandomUniform => sample_uniform(&mut rng, scheme.uniform_limit, n),
                InitKind::RandomNormal => {
                    let dist =
                        Normal::new(0.0, scheme.normal_std).map_err(|e| Error::arg(format!("normal init: {e}")))?;
                    (0..n).map(|_| T::of_f64(dist.sample(&mut rng))).collect()
                }
            };
            Tensor::new(spec.shape.clone(), data)?
        };
        store.push(spec.name.clone(), value, spec.trainable)?;
    }
    Ok(store)
}

fn sample_uniform<T: Real>(rng: &mut rng::Rng, limit: f64, n: usize) -> Vec<T> {
    if limit == 0.0 {
        return vec![T::zero(); n];
    }
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
    (0..n).map(|_| T::of_f64(rng.sample(dist))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            fan_in,
            fan_out,
            is_bias: false,
            trainable: true,
        }
    }

    #[test]
    fn glorot_limit_with_equal_fans() {
        let store: ParameterStore<f32> = init_params(&[spec("w", &[1000], 3, 3)], &InitScheme::glorot(1)).unwrap();
        let v = store.value("w").unwrap();
        assert!(v.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(v.data().iter().any(|x| x.abs() > 0.9));
    }

    #[test]
    fn zero_output_touches_only_the_output_layer() {
        let specs = vec![spec("dec.conv0.weight", &[8], 2, 2), spec("dec.out.weight", &[8], 2, 2)];
        let scheme = InitScheme {
            zero_output: true,
            ..InitScheme::glorot(3)
        };
        let store: ParameterStore<f32> = init_params(&specs, &scheme).unwrap();
        assert!(store.value("dec.out.weight").unwrap().data().iter().all(|&x| x == 0.0));
        let plain: ParameterStore<f32> = init_params(&specs, &InitScheme::glorot(3)).unwrap();
        assert_eq!(
            store.value("dec.conv0.weight").unwrap(),
            plain.value("dec.conv0.weight").unwrap()
        );
    }

    #[test]
    fn same_seed_same_bytes_and_biases_zero() {
        let specs = vec![
            spec("w", &[4, 3], 3, 4),
            ParamSpec {
                is_bias: true,
                ..spec("b", &[4], 3, 4)
            },
        ];
        for kind in InitKind::ALL {
            let a: ParameterStore<f32> = init_params(&specs, &InitScheme::new(kind, 9)).unwrap();
            let b: ParameterStore<f32> = init_params(&specs, &InitScheme::new(kind, 9)).unwrap();
            let c: ParameterStore<f32> = init_params(&specs, &InitScheme::new(kind, 10)).unwrap();
            assert_eq!(a.bytes_with_prefix(""), b.bytes_with_prefix(""));
            assert_ne!(a.bytes_with_prefix("w"), c.bytes_with_prefix("w"));
            assert!(a.value("b").unwrap().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn glorot_mean_is_centred() {
        // Monte Carlo: the sample mean of 1e5 draws lies within three standard
        // errors of zero; the standard error of U(-a, a) is a / sqrt(3 n).
        let n = 100_000;
        let store: ParameterStore<f64> = init_params(&[spec("w", &[n], 50, 50)], &InitScheme::glorot(3)).unwrap();
        let v = store.value("w").unwrap();
        let mean = v.data().iter().sum::<f64>() / n as f64;
        let a = (6.0f64 / 100.0).sqrt();
        let se = a / (3.0 * n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn scheme_parameters() {
        let s = [spec("w", &[20_000], 1, 1)];
        let u: ParameterStore<f64> = init_params(&s, &InitScheme::new(InitKind::RandomUniform, 1)).unwrap();
        assert!(u.value("w").unwrap().data().iter().all(|x| x.abs() <= 0.05));
        let nrm: ParameterStore<f64> = init_params(&s, &InitScheme::new(InitKind::RandomNormal, 1)).unwrap();
        let d = nrm.value("w").unwrap().data();
        let var = d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
        assert!((var.sqrt() - 0.05).abs() < 0.002);
    }

    #[test]
    fn unresolved_shape_is_an_error() {
        let r: Result<ParameterStore<f32>> = init_params(&[spec("w", &[3, 0], 1, 1)], &InitScheme::glorot(0));
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
