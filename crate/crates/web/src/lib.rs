//! Browser demo: synthesise a tumor image, show the E-map of a linear
//! matched-filter template, and show the E-map of an uploaded interpretable
//! checkpoint. The `try_*` methods hold the logic and also run natively.

use emap_core::data::{gen_image, insert_tumors, DatasetConfig, TumorParams};
use emap_core::io::decode_checkpoint;
use emap_core::models::ModelGraph;
use emap_core::tensor::Tensor;
use wasm_bindgen::prelude::*;

const CALIBRATION_IMAGES: u64 = 16;

#[wasm_bindgen]
pub struct Demo {
    cfg: DatasetConfig,
    template: Vec<f32>,
    bias: f64,
    image: Vec<f32>,
    mask: Vec<f32>,
    model: Option<ModelGraph>,
    statistic: f64,
}

impl Demo {
    pub fn try_new(size: usize, amplitude: f64) -> Result<Demo, String> {
        let cfg = DatasetConfig {
            image_size: size,
            tumor: TumorParams {
                amplitude,
                ..TumorParams::default()
            },
            ..DatasetConfig::default()
        };
        cfg.validate().map_err(|e| e.to_string())?;
        let zero = Tensor::zeros(&[1, 1, size, size]);
        let (signal, _) =
            insert_tumors(&zero, &(0..9).collect::<Vec<_>>(), 1.0, cfg.tumor.width).map_err(|e| e.to_string())?;
        let mean = signal.data().iter().map(|&v| v as f64).sum::<f64>() / signal.numel() as f64;
        let template: Vec<f32> = signal.data().iter().map(|&v| (v as f64 - mean) as f32).collect();
        let mut demo = Demo {
            cfg,
            template,
            bias: 0.0,
            image: vec![0.0; size * size],
            mask: vec![0.0; size * size],
            model: None,
            statistic: 0.0,
        };
        let mut class_means = [0.0; 2];
        for label in [0u8, 1] {
            for seed in 0..CALIBRATION_IMAGES {
                demo.try_generate(1_000_000 + seed, label == 1)?;
                class_means[label as usize] += demo.template_emap().iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        demo.bias = -(class_means[0] + class_means[1]) / (2 * CALIBRATION_IMAGES) as f64;
        demo.try_generate(0, true)?;
        Ok(demo)
    }

    pub fn try_generate(&mut self, seed: u64, abnormal: bool) -> Result<Vec<f32>, String> {
        let g = gen_image(&self.cfg, seed, abnormal as u8).map_err(|e| e.to_string())?;
        self.image = g.image.into_data();
        self.mask = g.mask.into_data();
        Ok(self.image.clone())
    }

    /// Returns a summary of the loaded model.
    pub fn try_load_model(&mut self, bytes: &[u8]) -> Result<String, String> {
        let (model, meta) = decode_checkpoint(bytes).map_err(|e| e.to_string())?;
        if !model.is_interpretable() {
            return Err("the checkpoint is a black box; load an interpretable network".into());
        }
        if model.image_size != self.cfg.image_size {
            return Err(format!(
                "the checkpoint expects {0}x{0} images but the demo uses {1}x{1}",
                model.image_size, self.cfg.image_size
            ));
        }
        let summary = format!(
            "{} parameters, protocol {}, best epoch {}",
            model.params.iter().map(|p| p.value.numel()).sum::<usize>(),
            meta.protocol.as_deref().unwrap_or("unknown"),
            meta.epoch.map_or("unknown".to_string(), |e| e.to_string()),
        );
        self.model = Some(model);
        Ok(summary)
    }

    pub fn try_model_emap(&mut self) -> Result<Vec<f32>, String> {
        let model = self.model.as_ref().ok_or("no model loaded")?;
        let s = self.cfg.image_size;
        let x = Tensor::new(vec![1, 1, s, s], self.image.clone()).map_err(|e| e.to_string())?;
        let emap = model.compute_emap(&x).map_err(|e| e.to_string())?;
        self.statistic = emap.t_hat as f64;
        Ok(emap.map.into_data())
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, amplitude: f64) -> Result<Demo, JsError> {
        Self::try_new(size, amplitude).map_err(|e| JsError::new(&e))
    }

    pub fn size(&self) -> usize {
        self.cfg.image_size
    }

    /// Draws a new image and returns its pixels in raster order.
    pub fn generate(&mut self, seed: u64, abnormal: bool) -> Result<Vec<f32>, JsError> {
        self.try_generate(seed, abnormal).map_err(|e| JsError::new(&e))
    }

    pub fn mask(&self) -> Vec<f32> {
        self.mask.clone()
    }

    /// Element-wise product of the template and the image; its sum plus the
    /// bias is the linear test statistic.
    pub fn template_emap(&mut self) -> Vec<f32> {
        let map: Vec<f32> = self.template.iter().zip(&self.image).map(|(w, f)| w * f).collect();
        self.statistic = map.iter().map(|&v| v as f64).sum::<f64>() + self.bias;
        map
    }

    #[wasm_bindgen(js_name = loadModel)]
    pub fn load_model(&mut self, bytes: &[u8]) -> Result<String, JsError> {
        self.try_load_model(bytes).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = modelEmap)]
    pub fn model_emap(&mut self) -> Result<Vec<f32>, JsError> {
        self.try_model_emap().map_err(|e| JsError::new(&e))
    }

    /// Test statistic of the most recent E-map.
    pub fn statistic(&self) -> f64 {
        self.statistic
    }

    #[wasm_bindgen(js_name = templateBias)]
    pub fn template_bias(&self) -> f64 {
        self.bias
    }
}
