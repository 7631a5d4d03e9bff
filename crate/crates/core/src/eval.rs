//! Grounding metrics: frame-averaged IoU and frame-level hit accuracy, with
//! per-query-type aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mask_iou, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    Attribute,
    Action,
    Spatial,
    Interaction,
}

impl QueryType {
    pub const ALL: [QueryType; 4] = [Self::Attribute, Self::Action, Self::Spatial, Self::Interaction];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attribute => "attribute",
            Self::Action => "action",
            Self::Spatial => "spatial",
            Self::Interaction => "interaction",
        }
    }
}

impl std::str::FromStr for QueryType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown query type `{s}`")))
    }
}

/// Predictions and ground truth of one query over its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    id: String,
    query_type: QueryType,
    predictions: Vec<BinaryMask>,
    ground_truth: Vec<BinaryMask>,
    valid_frames: Vec<usize>,
}

impl QueryRecord {
    pub fn new(
        id: impl Into<String>,
        query_type: QueryType,
        predictions: Vec<BinaryMask>,
        ground_truth: Vec<BinaryMask>,
        valid_frames: Vec<usize>,
    ) -> Result<Self> {
        if predictions.len() != ground_truth.len() {
            return Err(Error::FrameCountMismatch {
                expected: ground_truth.len(),
                found: predictions.len(),
            });
        }
        if valid_frames.is_empty() {
            return Err(Error::Empty("valid test frames"));
        }
        for &f in &valid_frames {
            let (Some(p), Some(g)) = (predictions.get(f), ground_truth.get(f)) else {
                return Err(Error::LengthMismatch {
                    context: "valid frame index",
                    expected: ground_truth.len(),
                    found: f,
                });
            };
            if p.dims() != g.dims() {
                return Err(Error::DimensionMismatch {
                    context: "prediction mask",
                    expected: g.dims(),
                    found: p.dims(),
                });
            }
        }
        Ok(Self {
            id: id.into(),
            query_type,
            predictions,
            ground_truth,
            valid_frames,
        })
    }

    /// Every frame counts as a test frame.
    pub fn all_frames(
        id: impl Into<String>,
        query_type: QueryType,
        predictions: Vec<BinaryMask>,
        ground_truth: Vec<BinaryMask>,
    ) -> Result<Self> {
        let frames = (0..ground_truth.len()).collect();
        Self::new(id, query_type, predictions, ground_truth, frames)
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn query_type(&self) -> QueryType {
        self.query_type
    }
    pub fn valid_frames(&self) -> &[usize] {
        &self.valid_frames
    }

    fn pairs(&self) -> impl Iterator<Item = (&BinaryMask, &BinaryMask)> + '_ {
        self.valid_frames
            .iter()
            .map(|&f| (&self.predictions[f], &self.ground_truth[f]))
    }
}

/// Mean per-frame IoU over the record's test frames.
pub fn miou(record: &QueryRecord) -> Result<f64> {
    let mut ious = record
        .pairs()
        .map(|(p, g)| mask_iou(p, g))
        .collect::<Result<Vec<f64>>>()?;
    // sorted sum keeps the mean independent of frame order
    ious.sort_by(f64::total_cmp);
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Fraction of a query's test frames whose prediction hits the ground truth.
/// A hit needs a non-empty intersection and, when `min_iou > 0`, an IoU of
/// at least `min_iou`.
pub fn frame_accuracy(record: &QueryRecord, min_iou: f64) -> Result<f64> {
    let mut correct = 0usize;
    for (p, g) in record.pairs() {
        if p.intersection_count(g) > 0 && (min_iou <= 0.0 || mask_iou(p, g)? >= min_iou) {
            correct += 1;
        }
    }
    Ok(correct as f64 / record.valid_frames.len() as f64)
}

/// Mean over queries of per-query hit ratios.
pub fn macc(records: &[QueryRecord]) -> Result<f64> {
    macc_with(records, 0.0)
}

pub fn macc_with(records: &[QueryRecord], min_iou: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("query records"));
    }
    let mut ratios = records
        .iter()
        .map(|r| frame_accuracy(r, min_iou))
        .collect::<Result<Vec<f64>>>()?;
    ratios.sort_by(f64::total_cmp);
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Mean over queries of per-query mIoU.
pub fn mean_miou(records: &[QueryRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("query records"));
    }
    let mut values = records.iter().map(miou).collect::<Result<Vec<f64>>>()?;
    values.sort_by(f64::total_cmp);
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Query type name, or `overall`.
    pub group: String,
    pub queries: usize,
    /// `None` when no query of this group is present.
    pub macc: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub min_iou: f64,
    pub rows: Vec<MetricsRow>,
    pub overall: MetricsRow,
}

impl MetricsTable {
    pub fn row(&self, t: QueryType) -> &MetricsRow {
        self.rows
            .iter()
            .find(|r| r.group == t.as_str())
            .expect("every type has a row")
    }
}

fn summarize(group: &str, records: &[&QueryRecord], min_iou: f64) -> Result<MetricsRow> {
    if records.is_empty() {
        return Ok(MetricsRow {
            group: group.to_string(),
            queries: 0,
            macc: None,
            miou: None,
        });
    }
    let owned: Vec<QueryRecord> = records.iter().map(|r| (*r).clone()).collect();
    Ok(MetricsRow {
        group: group.to_string(),
        queries: records.len(),
        macc: Some(macc_with(&owned, min_iou)?),
        miou: Some(mean_miou(&owned)?),
    })
}

/// Per-type and overall mAcc / mIoU. All four types get a row; absent types
/// carry `None` values.
pub fn aggregate_by_type(records: &[QueryRecord]) -> Result<MetricsTable> {
    aggregate_by_type_with(records, 0.0)
}

pub fn aggregate_by_type_with(records: &[QueryRecord], min_iou: f64) -> Result<MetricsTable> {
    let rows = QueryType::ALL
        .into_iter()
        .map(|t| {
            let group: Vec<&QueryRecord> = records.iter().filter(|r| r.query_type == t).collect();
            summarize(t.as_str(), &group, min_iou)
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&QueryRecord> = records.iter().collect();
    Ok(MetricsTable {
        min_iou,
        rows,
        overall: summarize("overall", &all, min_iou)?,
    })
}
