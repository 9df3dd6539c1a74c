use serde::{Deserialize, Serialize};

use super::{check_disjoint, rate_from_predictions, BenchError};
use crate::attack::{craft, AttackConfig};
use crate::data::Dataset;
use crate::tensor::{predict, Tensor};
use crate::xform::rotate;
use crate::zoo::ModelGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub angle_deg: f64,
    pub success_rate: f64,
}

/// Success rate against one black box as a function of rotation angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub black_box: String,
    /// Points in increasing angle order.
    pub points: Vec<SweepPoint>,
    /// Index into `points` of the highest rate (smallest angle on ties).
    pub argmax: usize,
}

impl SweepCurve {
    fn from_points(black_box: String, mut points: Vec<SweepPoint>) -> Self {
        points.sort_by(|a, b| a.angle_deg.total_cmp(&b.angle_deg));
        let mut argmax = 0;
        for (i, p) in points.iter().enumerate() {
            if p.success_rate > points[argmax].success_rate {
                argmax = i;
            }
        }
        Self { black_box, points, argmax }
    }

    pub fn peak(&self) -> SweepPoint {
        self.points[self.argmax]
    }
}

/// `0, stride, 2*stride, ...` up to but excluding 360.
pub fn sweep_angles(stride: u32) -> Result<Vec<f64>, BenchError> {
    if stride == 0 || 360 % stride != 0 {
        return Err(BenchError::InvalidStride(stride));
    }
    Ok((0..360 / stride).map(|k| (k * stride) as f64).collect())
}

/// Evaluate fixed adversarial images rotated by each angle. Angles may come
/// in any order; curves are reported sorted.
pub fn sweep_cached(x_adv: &Tensor, labels: &[usize], black_boxes: &[&ModelGraph], angles: &[f64]) -> Result<Vec<SweepCurve>, BenchError> {
    if labels.is_empty() {
        return Err(BenchError::EmptyImageSet);
    }
    let mut per_model: Vec<Vec<SweepPoint>> = vec![Vec::with_capacity(angles.len()); black_boxes.len()];
    for &angle in angles {
        let xr = rotate(x_adv, angle);
        for (m, pts) in black_boxes.iter().zip(per_model.iter_mut()) {
            let rate = rate_from_predictions(&predict(m, &xr)?, labels)?;
            pts.push(SweepPoint {
                angle_deg: angle,
                success_rate: rate,
            });
        }
    }
    Ok(black_boxes
        .iter()
        .zip(per_model)
        .map(|(m, pts)| SweepCurve::from_points(m.name().to_string(), pts))
        .collect())
}

/// Craft once on `white_box`, then sweep the full turn at `stride` degrees.
pub fn rotation_sweep(
    white_box: &ModelGraph,
    black_boxes: &[&ModelGraph],
    ds: &Dataset,
    cfg: &AttackConfig,
    stride: u32,
) -> Result<Vec<SweepCurve>, BenchError> {
    let angles = sweep_angles(stride)?;
    check_disjoint(&[white_box.name()], black_boxes)?;
    let adv = craft(white_box, &ds.images, &ds.labels, cfg)?;
    sweep_cached(&adv, &ds.labels, black_boxes, &angles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_must_divide_a_full_turn() {
        assert_eq!(sweep_angles(10).unwrap().len(), 36);
        assert_eq!(sweep_angles(360).unwrap(), vec![0.0]);
        assert!(sweep_angles(7).is_err());
        assert!(sweep_angles(0).is_err());
    }

    #[test]
    fn argmax_prefers_smallest_angle() {
        let pts = [(20.0, 5.0), (0.0, 1.0), (10.0, 5.0)]
            .map(|(a, r)| SweepPoint {
                angle_deg: a,
                success_rate: r,
            })
            .to_vec();
        let c = SweepCurve::from_points("m".into(), pts);
        assert_eq!(c.points[0].angle_deg, 0.0);
        assert_eq!(c.peak().angle_deg, 10.0);
    }
}
