use super::ForwardOutput;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Head-averaged attention of one meta token over the image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub meta_index: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` weights, summing to one.
    pub values: Vec<f64>,
}

impl AttentionMap {
    /// Values rescaled to `[0, 1]` by the map maximum, for display.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            self.values.iter().map(|v| v / max).collect()
        } else {
            self.values.clone()
        }
    }
}

/// One map per meta token from a forward pass run with attention retention.
pub fn attention_maps<T: Scalar>(out: &ForwardOutput<T>) -> Result<Vec<AttentionMap>> {
    let att = out
        .attention
        .as_ref()
        .ok_or_else(|| Error::Contract("forward pass did not retain attention".into()))?;
    let &[heads, m, n] = att.weights.shape() else {
        return Err(Error::Contract(format!("attention has shape {:?}", att.weights.shape())));
    };
    if n != att.height * att.width {
        return Err(Error::Contract(format!(
            "attention over {n} keys does not match a {}x{} grid",
            att.height, att.width
        )));
    }
    let w = att.weights.data();
    Ok((0..m)
        .map(|i| {
            let mut values = vec![0.0; n];
            for h in 0..heads {
                let row = &w[(h * m + i) * n..(h * m + i + 1) * n];
                for (acc, &v) in values.iter_mut().zip(row) {
                    *acc += v.to_f64_lossy();
                }
            }
            values.iter_mut().for_each(|v| *v /= heads as f64);
            AttentionMap {
                meta_index: i,
                height: att.height,
                width: att.width,
                values,
            }
        })
        .collect())
}
