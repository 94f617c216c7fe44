//! Dice and Jaccard scores on binary masks.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Pixels whose logit is positive, i.e. `sigmoid(z) > 0.5`.
pub fn binarize<T: Scalar>(logits: &[T]) -> Vec<bool> {
    logits.iter().map(|&z| z > T::zero()).collect()
}

/// Mask from `{0, 1}` values.
pub fn mask_of<T: Scalar>(values: &[T]) -> Vec<bool> {
    values.iter().map(|&v| v > T::of(0.5)).collect()
}

fn counts(a: &[bool], b: &[bool]) -> (usize, usize, usize) {
    assert_eq!(a.len(), b.len(), "mask sizes differ");
    a.iter().zip(b).fold((0, 0, 0), |(i, na, nb), (&x, &y)| {
        (i + (x && y) as usize, na + x as usize, nb + y as usize)
    })
}

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc(pred: &[bool], target: &[bool]) -> f64 {
    let (i, a, b) = counts(pred, target);
    if a + b == 0 {
        return 1.0;
    }
    2.0 * i as f64 / (a + b) as f64
}

/// `|A n B| / |A u B|`; two empty masks score 1.
pub fn iou(pred: &[bool], target: &[bool]) -> f64 {
    let (i, a, b) = counts(pred, target);
    let union = a + b - i;
    if union == 0 {
        return 1.0;
    }
    i as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: String,
    pub dsc: f64,
    pub iou: f64,
}

/// Per-image scores and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub dsc: f64,
    pub iou: f64,
    pub per_image: Vec<ImageScore>,
}

impl EvalResult {
    pub fn from_scores(per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("cannot evaluate an empty dataset".into()));
        }
        let n = per_image.len() as f64;
        Ok(EvalResult {
            dsc: per_image.iter().map(|s| s.dsc).sum::<f64>() / n,
            iou: per_image.iter().map(|s| s.iou).sum::<f64>() / n,
            per_image,
        })
    }

    /// `id,dsc,iou` rows followed by a `mean` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
        for row in &self.per_image {
            w.serialize(row).map_err(csv_err)?;
        }
        w.serialize(ImageScore {
            id: "mean".into(),
            dsc: self.dsc,
            iou: self.iou,
        })
        .map_err(csv_err)?;
        w.flush().map_err(|e| Error::Data(format!("writing CSV: {e}")))
    }
}
