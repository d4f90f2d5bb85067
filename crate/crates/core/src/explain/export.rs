use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExplainError, ExplanationKind};
use crate::tensor::Tensor;

/// Exchange format for heatmaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub instance_id: u64,
    pub class: usize,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub kind: ExplanationKind,
}

impl HeatmapRecord {
    pub fn new(instance_id: u64, class: usize, kind: ExplanationKind, heatmap: &Tensor) -> Self {
        Self {
            instance_id,
            class,
            shape: heatmap.shape().to_vec(),
            values: heatmap.data().to_vec(),
            kind,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor, ExplainError> {
        Tensor::new(self.shape.clone(), self.values.clone()).map_err(|e| ExplainError::Io(format!("heatmap {}: {e}", self.instance_id)))
    }
}

fn io(e: impl std::fmt::Display) -> ExplainError {
    ExplainError::Io(e.to_string())
}

fn kind_name(kind: ExplanationKind) -> &'static str {
    match kind {
        ExplanationKind::Surrogate => "surrogate",
        ExplanationKind::InputGradient => "input-gradient",
        ExplanationKind::Gradcam => "gradcam",
    }
}

/// One row per heatmap: `instance_id,class,kind,shape,v0,v1,...` with the
/// shape written as `28x28`.
pub fn write_heatmaps_csv(path: &Path, records: &[HeatmapRecord]) -> Result<(), ExplainError> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(io)?;
    for r in records {
        let mut row = vec![
            r.instance_id.to_string(),
            r.class.to_string(),
            kind_name(r.kind).to_string(),
            r.shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x"),
        ];
        row.extend(r.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_heatmaps_csv(path: &Path) -> Result<Vec<HeatmapRecord>, ExplainError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path).map_err(io)?;
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(io)?;
        let bad = |what: &str| ExplainError::Io(format!("{}:{}: {what}", path.display(), line + 1));
        if rec.len() < 4 {
            return Err(bad("too few columns"));
        }
        let kind = match &rec[2] {
            "surrogate" => ExplanationKind::Surrogate,
            "input-gradient" => ExplanationKind::InputGradient,
            "gradcam" => ExplanationKind::Gradcam,
            other => return Err(bad(&format!("unknown kind {other}"))),
        };
        let shape = rec[3]
            .split('x')
            .map(|s| s.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("bad shape"))?;
        let values = rec
            .iter()
            .skip(4)
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("bad value"))?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(bad("value count does not match shape"));
        }
        out.push(HeatmapRecord {
            instance_id: rec[0].parse().map_err(|_| bad("bad instance id"))?,
            class: rec[1].parse().map_err(|_| bad("bad class"))?,
            shape,
            values,
            kind,
        });
    }
    Ok(out)
}

/// Loads every `*.json` (one record or an array) and `*.csv` file in `dir`,
/// in file-name order.
pub fn read_heatmaps_dir(dir: &Path) -> Result<Vec<HeatmapRecord>, ExplainError> {
    let mut files: Vec<_> = fs::read_dir(dir).map_err(io)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        match f.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let text = fs::read_to_string(&f).map_err(io)?;
                let value: serde_json::Value = serde_json::from_str(&text).map_err(io)?;
                if value.is_array() {
                    out.extend(serde_json::from_value::<Vec<HeatmapRecord>>(value).map_err(io)?);
                } else {
                    out.push(serde_json::from_value(value).map_err(io)?);
                }
            }
            Some("csv") => out.extend(read_heatmaps_csv(&f)?),
            _ => {}
        }
    }
    Ok(out)
}
