use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Bag, MilModel};

/// One `(bag, instance)` row of an attention export. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub bag_id: u64,
    pub true_label: usize,
    pub pred_label: usize,
    pub instance_id: usize,
    /// Instance tags as `key=value` pairs joined by `;`, keys sorted.
    pub meta: String,
    pub attention_weight: f64,
}

pub fn attention_rows(model: &MilModel, bags: &[Bag]) -> Result<Vec<AttentionRow>> {
    let mut rows = Vec::new();
    for bag in bags {
        let out = model.bag_forward(bag)?;
        let pred = out.predicted_class();
        for (i, (inst, &a)) in bag.instances.iter().zip(&out.attention).enumerate() {
            let meta = inst
                .meta
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";");
            rows.push(AttentionRow {
                bag_id: bag.id,
                true_label: bag.label,
                pred_label: pred,
                instance_id: i,
                meta,
                attention_weight: a,
            });
        }
    }
    Ok(rows)
}

pub fn export_attention<W: Write>(
    model: &MilModel,
    bags: &[Bag],
    out: W,
) -> Result<Vec<AttentionRow>> {
    let rows = attention_rows(model, bags)?;
    let mut w = csv::Writer::from_writer(out);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
