use emap_core::models::{Activation, BlackBoxSpec, DecoderSpec, ModelGraph};
use emap_core::nn::{Binding, InitKind, InitScheme};
use emap_core::rng::{stream, Stream};
use emap_core::tensor::gradcheck::grad_check;
use emap_core::tensor::{Padding, Tape, Var};
use emap_core::{Result, Tensor};
use rand::Rng as _;

pub const EPS: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 20;
pub const KINK_MARGIN: f64 = 1e-3;

fn random(rng: &mut emap_core::rng::Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Scalar read-out with fixed random weights so every output element matters.
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = stream(seed, Stream::Probe, &[99]);
    let w = random(&mut rng, tape.value(y).shape());
    tape.dot_const(y, w)
}

type Case = fn(u64) -> Result<f64>;

fn conv_same(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[1]);
    let inputs = [
        random(&mut rng, &[1, 2, 5, 5]),
        random(&mut rng, &[3, 2, 3, 3]),
        random(&mut rng, &[3]),
    ];
    grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], Padding::Same, 1)?;
            readout(t, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn conv_valid_strided(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[2]);
    let inputs = [
        random(&mut rng, &[2, 2, 7, 7]),
        random(&mut rng, &[3, 2, 3, 3]),
        random(&mut rng, &[3]),
    ];
    grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], Padding::Valid, 2)?;
            readout(t, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn transpose_conv(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[3]);
    let inputs = [
        random(&mut rng, &[2, 3, 3, 3]),
        random(&mut rng, &[3, 2, 2, 2]),
        random(&mut rng, &[2]),
    ];
    grad_check(
        |t, v| {
            let y = t.transpose_conv2d(v[0], v[1], v[2], 2, 2)?;
            readout(t, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn maxpool(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[4]);
    let inputs = [random(&mut rng, &[2, 2, 4, 6])];
    grad_check(
        |t, v| {
            let y = t.maxpool2x2(v[0])?;
            readout(t, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn dense(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[5]);
    let inputs = [
        random(&mut rng, &[3, 6]),
        random(&mut rng, &[6, 4]),
        random(&mut rng, &[4]),
    ];
    grad_check(
        |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            readout(t, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn relu(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[6]);
    // Keep every input at least 10·eps away from the kink.
    let x = Tensor::from_fn(&[2, 3, 4, 4], |_| {
        let m: f64 = rng.random_range(1e-3..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    grad_check(
        |t, v| {
            let y = t.relu(v[0]);
            readout(t, y, seed)
        },
        &[x],
        EPS,
    )
}

fn sigmoid(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[7]);
    let inputs = [random(&mut rng, &[2, 1, 4, 4]).map(|v| 4.0 * v)];
    grad_check(
        |t, v| {
            let y = t.sigmoid(v[0]);
            readout(t, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn concat(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[8]);
    let inputs = [random(&mut rng, &[2, 2, 3, 3]), random(&mut rng, &[2, 3, 3, 3])];
    grad_check(
        |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            readout(t, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn sum_per_item(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[9]);
    let inputs = [random(&mut rng, &[3, 2, 2, 2])];
    grad_check(
        |t, v| {
            let y = t.sum_per_item(v[0])?;
            readout(t, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn reshape_flatten(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[13]);
    let inputs = [random(&mut rng, &[3, 2, 2, 2])];
    grad_check(
        |t, v| {
            let flat = t.flatten(v[0])?;
            let y = t.reshape(flat, &[6, 4])?;
            readout(t, y, seed)
        },
        &inputs,
        EPS,
    )
}

fn sum_all(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[14]);
    let inputs = [random(&mut rng, &[2, 2, 3, 3])];
    grad_check(
        |t, v| {
            let y = t.sigmoid(v[0]);
            t.sum_all(y)
        },
        &inputs,
        EPS,
    )
}

fn bce(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[10]);
    let logits = random(&mut rng, &[6, 1]).map(|v| 5.0 * v);
    let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    grad_check(move |t, v| t.bce_loss(v[0], &labels), &[logits], EPS)
}

fn mse(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[11]);
    let pred = random(&mut rng, &[5, 1]);
    let target = random(&mut rng, &[5, 1]);
    grad_check(move |t, v| t.mse_loss(v[0], &target), &[pred], EPS)
}

pub const PRIMITIVES: [(&str, Case); 14] = [
    ("conv2d_same", conv_same),
    ("conv2d_valid_stride2", conv_valid_strided),
    ("transpose_conv2d", transpose_conv),
    ("maxpool2x2", maxpool),
    ("dense", dense),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("concat_channels", concat),
    ("sum_all", sum_all),
    ("sum_per_item", sum_per_item),
    ("reshape_flatten", reshape_flatten),
    ("bce_loss", bce),
    ("mse_loss", mse),
    ("dot_const", dot),
];

fn dot(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Probe, &[12]);
    let inputs = [random(&mut rng, &[2, 3, 2, 2])];
    grad_check(|t, v| readout(t, v[0], seed), &inputs, EPS)
}

/// Worst error over `INSTANCES` seeded instances of one primitive.
pub fn primitive_worst(case: Case) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        worst = worst.max(case(seed)?);
    }
    Ok(worst)
}

pub struct Composite {
    model: ModelGraph<f64>,
    inputs: Vec<Tensor<f64>>,
    target: Tensor<f64>,
}

impl Composite {
    /// Small interpretable model on a 1×1×8×8 image; the image and every
    /// encoder and decoder parameter are inputs of the checked function.
    pub fn new(seed: u64) -> Result<Self> {
        let bb = BlackBoxSpec {
            conv_layers: 1,
            filters: 2,
            kernel: 3,
        };
        let dec = DecoderSpec {
            conv_layers: 2,
            filters: 3,
            kernel: 3,
            upsample_activation: Activation::Relu,
            penultimate_activation: Activation::Linear,
        };
        let init = InitScheme::new(InitKind::GlorotUniform, seed);
        let blackbox = ModelGraph::<f64>::build_blackbox(bb, 8, init)?;
        let model = ModelGraph::<f64>::build_interpretable(&blackbox, dec, init)?;
        let mut rng = stream(seed, Stream::Probe, &[20]);
        let mut inputs = vec![random(&mut rng, &[1, 1, 8, 8])];
        for p in model.params.iter() {
            if p.name.ends_with(".bias") {
                inputs.push(random(&mut rng, p.value.shape()).map(|v| 0.5 * v));
            } else {
                inputs.push(p.value.clone());
            }
        }
        let target = Tensor::from_fn(&[1, 1], |_| rng.random_range(-1.0..1.0));
        Ok(Composite { model, inputs, target })
    }

    fn record(&self, t: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
        let binding = Binding::from_vars(v[1..].to_vec());
        let out = self.model.record_forward(t, &binding, v[0])?;
        t.mse_loss(out, &self.target)
    }

    fn eval(&self, values: &[Tensor<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = self.record(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    }

    /// True when every ReLU input and max-pool gap is at least
    /// `KINK_MARGIN` from a non-differentiable point, so no `±EPS` probe
    /// straddles a kink.
    pub fn is_smooth(&self) -> Result<bool> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|v| tape.constant(v.clone())).collect();
        self.record(&mut tape, &vars)?;
        Ok(tape.kink_margin() >= KINK_MARGIN)
    }

    pub fn check(&self) -> Result<f64> {
        grad_check(|t, v| self.record(t, v), &self.inputs, EPS)
    }
}

/// Worst error over the first `INSTANCES` smooth instances, and the number of
/// draws rejected for straddling a kink.
pub fn composite_worst() -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut accepted = 0;
    let mut rejected = 0;
    let mut seed = 0;
    while accepted < INSTANCES {
        let c = Composite::new(seed)?;
        seed += 1;
        if c.is_smooth()? {
            worst = worst.max(c.check()?);
            accepted += 1;
        } else {
            rejected += 1;
        }
        assert!(rejected < 5000, "no smooth instances found");
    }
    Ok((worst, rejected))
}
