use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::Config(format!(
                "unknown activation `{s}` (expected linear or relu)"
            ))),
        }
    }
}

/// Black-box CNN: `conv_layers` same-padded ReLU convolutions, one 2×2 max
/// pool, and a dense layer producing the logit `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlackBoxSpec {
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl Default for BlackBoxSpec {
    fn default() -> Self {
        BlackBoxSpec {
            conv_layers: 4,
            filters: 32,
            kernel: 5,
        }
    }
}

pub const ENCODER_DEPTHS: [usize; 4] = [1, 3, 4, 6];
pub const DECODER_DEPTHS: [usize; 5] = [0, 2, 3, 5, 7];

fn conv_spec(name: &str, cout: usize, cin: usize, k: usize, trainable: bool) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            fan_in: cin * k * k,
            fan_out: cout * k * k,
            is_bias: false,
            trainable,
        },
        ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            fan_in: cin * k * k,
            fan_out: cout * k * k,
            is_bias: true,
            trainable,
        },
    ]
}

impl BlackBoxSpec {
    pub fn validate(&self) -> Result<()> {
        if !ENCODER_DEPTHS.contains(&self.conv_layers) {
            return Err(Error::Config(format!(
                "black-box conv_layers must be one of {ENCODER_DEPTHS:?}, got {}",
                self.conv_layers
            )));
        }
        if self.filters == 0 {
            return Err(Error::Config("black-box filters must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "black-box kernel must be odd for same padding, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Length of the flattened pooled features fed to the dense layer.
    pub fn latent_len(&self, image_size: usize) -> usize {
        self.filters * (image_size / 2) * (image_size / 2)
    }

    pub fn encoder_params(&self, trainable: bool) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for i in 0..self.conv_layers {
            let cin = if i == 0 { 1 } else { self.filters };
            out.extend(conv_spec(
                &format!("enc.conv{i}"),
                self.filters,
                cin,
                self.kernel,
                trainable,
            ));
        }
        out
    }

    pub fn head_params(&self, image_size: usize) -> Vec<ParamSpec> {
        let d = self.latent_len(image_size);
        vec![
            ParamSpec {
                name: "fc.weight".into(),
                shape: vec![d, 1],
                fan_in: d,
                fan_out: 1,
                is_bias: false,
                trainable: true,
            },
            ParamSpec {
                name: "fc.bias".into(),
                shape: vec![1],
                fan_in: d,
                fan_out: 1,
                is_bias: true,
                trainable: true,
            },
        ]
    }
}

/// One Deconv block: a 2×2 stride-2 transpose convolution, concatenation with
/// the pre-pool encoder activation, `conv_layers` ReLU convolutions and a
/// one-filter output convolution producing the E-map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub upsample_activation: Activation,
    pub penultimate_activation: Activation,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            conv_layers: 3,
            filters: 128,
            kernel: 5,
            upsample_activation: Activation::Relu,
            penultimate_activation: Activation::Linear,
        }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !DECODER_DEPTHS.contains(&self.conv_layers) {
            return Err(Error::Config(format!(
                "decoder conv_layers must be one of {DECODER_DEPTHS:?}, got {}",
                self.conv_layers
            )));
        }
        if self.filters == 0 {
            return Err(Error::Config("decoder filters must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "decoder kernel must be odd for same padding, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn params(&self, encoder_filters: usize) -> Vec<ParamSpec> {
        let (f, d, k) = (encoder_filters, self.filters, self.kernel);
        let mut out = vec![
            ParamSpec {
                name: "dec.up.weight".into(),
                shape: vec![f, d, 2, 2],
                fan_in: f * 4,
                fan_out: d * 4,
                is_bias: false,
                trainable: true,
            },
            ParamSpec {
                name: "dec.up.bias".into(),
                shape: vec![d],
                fan_in: f * 4,
                fan_out: d * 4,
                is_bias: true,
                trainable: true,
            },
        ];
        let mut cin = d + f;
        for i in 0..self.conv_layers {
            out.extend(conv_spec(&format!("dec.conv{i}"), d, cin, k, true));
            cin = d;
        }
        out.extend(conv_spec("dec.out", 1, cin, k, true));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    BlackBox {
        encoder: BlackBoxSpec,
    },
    Interpretable {
        encoder: BlackBoxSpec,
        decoder: DecoderSpec,
    },
}

impl Architecture {
    pub fn encoder(&self) -> &BlackBoxSpec {
        match self {
            Architecture::BlackBox { encoder } | Architecture::Interpretable { encoder, .. } => encoder,
        }
    }

    pub fn decoder(&self) -> Option<&DecoderSpec> {
        match self {
            Architecture::BlackBox { .. } => None,
            Architecture::Interpretable { decoder, .. } => Some(decoder),
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if image_size < 2 || !image_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "image size {image_size} must be even for the pooling layer"
            )));
        }
        self.encoder().validate()?;
        if let Some(d) = self.decoder() {
            d.validate()?;
        }
        Ok(())
    }

    /// Parameter layout in store order. The encoder of an interpretable model
    /// is frozen unless `train_encoder` is set.
    pub fn param_specs(&self, image_size: usize, train_encoder: bool) -> Vec<ParamSpec> {
        match self {
            Architecture::BlackBox { encoder } => {
                let mut v = encoder.encoder_params(true);
                v.extend(encoder.head_params(image_size));
                v
            }
            Architecture::Interpretable { encoder, decoder } => {
                let mut v = encoder.encoder_params(train_encoder);
                v.extend(decoder.params(encoder.filters));
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(specs: &[ParamSpec]) -> usize {
        specs
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    #[test]
    fn decoder_parameter_count_matches_layer_arithmetic() {
        let arch = Architecture::Interpretable {
            encoder: BlackBoxSpec::default(),
            decoder: DecoderSpec::default(),
        };
        let expected = (32 * 128 * 2 * 2 + 128) + (160 * 128 * 25 + 128) + 2 * (128 * 128 * 25 + 128) + (128 * 25 + 1);
        assert_eq!(count(&arch.param_specs(64, false)), expected);
    }

    #[test]
    fn dense_input_length() {
        assert_eq!(BlackBoxSpec::default().latent_len(64), 32 * 32 * 32);
    }

    #[test]
    fn validation_rejects_unsupported_depths() {
        let e = BlackBoxSpec {
            conv_layers: 2,
            ..Default::default()
        };
        assert!(e.validate().is_err());
        for (conv_layers, ok) in [(4, false), (0, true)] {
            let d = DecoderSpec {
                conv_layers,
                ..Default::default()
            };
            assert_eq!(d.validate().is_ok(), ok);
        }
    }
}
