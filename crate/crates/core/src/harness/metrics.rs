use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{collect_output, main_loss, Bag, MilModel};

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_predictions(classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut cm = Self::new(classes);
        for &(actual, predicted) in pairs {
            cm.add(actual, predicted)?;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, actual: usize, predicted: usize) -> Result<()> {
        let c = self.classes();
        if actual >= c || predicted >= c {
            return Err(Error::data(format!(
                "class pair ({actual}, {predicted}) outside {c} classes"
            )));
        }
        self.counts[actual][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// CSV with a header of predicted classes and one row per actual class.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["actual\\predicted".to_string()];
        header.extend((0..self.classes()).map(|c| c.to_string()));
        w.write_record(&header)?;
        for (i, row) in self.counts.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Ratios whose denominator was zero and were reported as 0, e.g. `"precision[1]"`.
    pub undefined: Vec<String>,
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let total = cm.total();
        if total == 0 {
            return Err(Error::usage("metrics of an empty confusion matrix"));
        }
        let c = cm.classes();
        let mut undefined = Vec::new();
        let ratio = |undefined: &mut Vec<String>, num: u64, den: u64, name: &str, class: usize| {
            if den == 0 {
                undefined.push(format!("{name}[{class}]"));
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = cm.counts[k][k];
            let support: u64 = cm.counts[k].iter().sum();
            let predicted: u64 = cm.counts.iter().map(|row| row[k]).sum();
            let fn_ = support - tp;
            let fp = predicted - tp;
            let tn = total - tp - fn_ - fp;
            let sensitivity = ratio(&mut undefined, tp, tp + fn_, "sensitivity", k);
            let specificity = ratio(&mut undefined, tn, tn + fp, "specificity", k);
            let precision = ratio(&mut undefined, tp, tp + fp, "precision", k);
            let f1 = if precision + sensitivity == 0.0 {
                undefined.push(format!("f1[{k}]"));
                0.0
            } else {
                2.0 * precision * sensitivity / (precision + sensitivity)
            };
            per_class.push(ClassMetrics {
                class: k,
                support,
                sensitivity,
                specificity,
                precision,
                f1,
            });
        }
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
        let trace: u64 = (0..c).map(|k| cm.counts[k][k]).sum();
        Ok(Self {
            accuracy: trace as f64 / total as f64,
            macro_sensitivity: mean(|m| m.sensitivity),
            macro_specificity: mean(|m| m.specificity),
            macro_f1: mean(|m| m.f1),
            per_class,
            undefined,
        })
    }
}

/// Sample mean and standard error of the mean (`sd / sqrt(n)`, `n - 1` in the variance).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagPrediction {
    pub bag_id: u64,
    pub label: usize,
    pub predicted: usize,
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    pub mean_loss: f64,
    pub predictions: Vec<BagPrediction>,
}

/// Bag-level predictions of `model` on `bags`.
pub fn evaluate(model: &MilModel, bags: &[Bag]) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty bag set"));
    }
    let classes = model.config().main_classes;
    let mut cm = ConfusionMatrix::new(classes);
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(bags.len());
    for bag in bags {
        if bag.label >= classes {
            return Err(Error::data(format!(
                "bag {} has label {} but the model has {classes} classes",
                bag.id, bag.label
            )));
        }
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let nodes = model.forward(&mut g, &p, bag)?;
        let l = main_loss(&mut g, nodes.main_logits, bag.label)?;
        loss += g.value(l).item();
        let out = collect_output(&g, &nodes);
        let predicted = out.predicted_class();
        cm.add(bag.label, predicted)?;
        predictions.push(BagPrediction {
            bag_id: bag.id,
            label: bag.label,
            predicted,
            attention: out.attention,
        });
    }
    Ok(Evaluation {
        metrics: Metrics::from_confusion(&cm)?,
        confusion: cm,
        mean_loss: loss / bags.len() as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let cm = ConfusionMatrix::from_predictions(3, &[(0, 0), (1, 1), (2, 2), (2, 2)]).unwrap();
        let m = Metrics::from_confusion(&cm).unwrap();
        assert_eq!(
            (
                m.accuracy,
                m.macro_sensitivity,
                m.macro_specificity,
                m.macro_f1
            ),
            (1.0, 1.0, 1.0, 1.0)
        );
        assert!(m.undefined.is_empty());
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let cm = ConfusionMatrix::from_predictions(2, &[(0, 0), (0, 0), (1, 0), (1, 0)]).unwrap();
        let m = Metrics::from_confusion(&cm).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.macro_sensitivity, 0.5);
        assert_eq!(m.macro_specificity, 0.5);
        assert_eq!(
            m.undefined,
            vec!["precision[1]".to_string(), "f1[1]".to_string()]
        );
    }

    #[test]
    fn empty_matrix_is_usage_error() {
        assert!(matches!(
            Metrics::from_confusion(&ConfusionMatrix::new(2)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn sem_of_three() {
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn confusion_csv_layout() {
        let cm = ConfusionMatrix::from_predictions(2, &[(0, 1), (1, 1)]).unwrap();
        let mut buf = Vec::new();
        cm.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "actual\\predicted,0,1\n0,0,1\n1,0,1\n"
        );
    }
}
