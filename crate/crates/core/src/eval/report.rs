use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{estimation_errors, overlap_top_k, roc_auc, Confusion, Roc};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::models::ModelGraph;
use crate::train::all_images;

/// Per-image evaluation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub label: u8,
    /// Output of the evaluated model: `t` for a black box, `t̂` for an
    /// interpretable network.
    pub output: f64,
    /// The black-box test statistic `t` when a teacher is supplied.
    pub teacher: Option<f64>,
    pub prediction: u8,
    /// Top-k overlap of the E-map with the tumor mask (abnormal images of
    /// interpretable models only).
    pub overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub confusion: Confusion,
    /// Mean squared `t − t̂` over the split.
    pub estimation_mse: Option<f64>,
    pub estimation_mae: Option<f64>,
    pub mean_overlap: Option<f64>,
    pub top_fraction: f64,
    pub roc: Roc,
    pub records: Vec<ImageRecord>,
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes `header` then `rows` as CSV.
pub(crate) fn write_rows<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r.as_ref()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// `(metric, value)` rows in a fixed order.
    pub fn metric_rows(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("accuracy", Some(self.accuracy)),
            ("sensitivity", Some(self.sensitivity)),
            ("specificity", Some(self.specificity)),
            ("auc", Some(self.auc)),
            ("tp", Some(self.confusion.tp as f64)),
            ("tn", Some(self.confusion.tn as f64)),
            ("fp", Some(self.confusion.fp as f64)),
            ("fn", Some(self.confusion.fn_ as f64)),
            ("estimation_mse", self.estimation_mse),
            ("estimation_mae", self.estimation_mae),
            ("mean_overlap", self.mean_overlap),
            ("top_fraction", Some(self.top_fraction)),
        ]
    }

    /// `metric,value`
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<[String; 2]> = self
            .metric_rows()
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| [k.to_string(), v.to_string()]))
            .collect();
        write_rows(path, &["metric", "value"], &rows)
    }

    /// `threshold,fpr,tpr`
    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<[String; 3]> = self
            .roc
            .points
            .iter()
            .map(|p| [p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])
            .collect();
        write_rows(path, &["threshold", "fpr", "tpr"], &rows)
    }

    /// `index,label,output,teacher,prediction,overlap`
    pub fn write_records_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<[String; 6]> = self
            .records
            .iter()
            .map(|r| {
                [
                    r.index.to_string(),
                    r.label.to_string(),
                    r.output.to_string(),
                    opt(r.teacher),
                    r.prediction.to_string(),
                    opt(r.overlap),
                ]
            })
            .collect();
        write_rows(
            path,
            &["index", "label", "output", "teacher", "prediction", "overlap"],
            &rows,
        )
    }
}

/// Classification metrics at `t > 0`, ROC/AUC, estimation error against an
/// optional teacher and, for interpretable models, E-map top-k overlap.
pub fn evaluate(
    model: &ModelGraph,
    split: &Split,
    teacher: Option<&ModelGraph>,
    top_fraction: f64,
) -> Result<MetricsReport> {
    let images = all_images(split)?;
    let (outputs, maps) = if model.is_interpretable() {
        let (maps, t) = model.emaps(&images)?;
        (t, Some(maps))
    } else {
        (model.forward(&images)?, None)
    };
    let outputs: Vec<f64> = outputs.data().iter().map(|&v| v as f64).collect();
    let teacher_t: Option<Vec<f64>> = match teacher {
        Some(t) => Some(t.forward(&images)?.data().iter().map(|&v| v as f64).collect()),
        None => None,
    };
    let mut records = Vec::with_capacity(split.len());
    for i in 0..split.len() {
        let overlap = match (&maps, split.mask(i)) {
            (Some(maps), Some(mask)) if split.labels[i] == 1 => {
                let map: Vec<f64> = maps.outer(i).iter().map(|&v| v as f64).collect();
                Some(overlap_top_k(&map, mask, top_fraction)?)
            }
            _ => None,
        };
        records.push(ImageRecord {
            index: i,
            label: split.labels[i],
            output: outputs[i],
            teacher: teacher_t.as_ref().map(|t| t[i]),
            prediction: u8::from(outputs[i] > 0.0),
            overlap,
        });
    }
    let confusion = Confusion::from_scores(&outputs, &split.labels);
    let roc = roc_auc(&outputs, &split.labels)?;
    let (estimation_mse, estimation_mae) = match &teacher_t {
        Some(t) => {
            let (mse, mae) = estimation_errors(t, &outputs);
            (Some(mse), Some(mae))
        }
        None => (None, None),
    };
    let overlaps: Vec<f64> = records.iter().filter_map(|r| r.overlap).collect();
    let mean_overlap = (!overlaps.is_empty()).then(|| overlaps.iter().sum::<f64>() / overlaps.len() as f64);
    Ok(MetricsReport {
        accuracy: confusion.accuracy(),
        sensitivity: confusion.sensitivity(),
        specificity: confusion.specificity(),
        auc: roc.auc,
        confusion,
        estimation_mse,
        estimation_mae,
        mean_overlap,
        top_fraction,
        roc,
        records,
    })
}
