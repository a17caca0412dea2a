//! Points, labels and the point cloud container.

use crate::error::{Error, Result};
use crate::geom::Pose;

/// A 3D point in meters. All pipeline math runs in f64.
pub type Point3 = nalgebra::Point3<f64>;
/// A 3D vector in meters.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Per-point classification carried through the dynamic-removal pipeline and
/// serialized as a `label` scalar field in PCD files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Static = 0,
    Dynamic = 1,
    Unknown = 2,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Label> {
        match v {
            0 => Ok(Label::Static),
            1 => Ok(Label::Dynamic),
            2 => Ok(Label::Unknown),
            other => Err(Error::InvalidCloud(format!("unknown label value {other}"))),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

/// Dense sequence of 3D points, optionally with one label per point.
///
/// Immutable after construction; construction rejects non-finite coordinates
/// and mismatched label counts, so downstream code never re-checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    labels: Option<Vec<Label>>,
}

impl PointCloud {
    /// An unlabeled cloud. Fails on any NaN/Inf coordinate.
    pub fn new(points: Vec<Point3>) -> Result<PointCloud> {
        validate_finite(&points)?;
        Ok(PointCloud {
            points,
            labels: None,
        })
    }

    /// A labeled cloud; `labels` must have exactly one entry per point.
    pub fn with_labels(points: Vec<Point3>, labels: Vec<Label>) -> Result<PointCloud> {
        if labels.len() != points.len() {
            return Err(Error::InvalidCloud(format!(
                "{} labels for {} points",
                labels.len(),
                points.len()
            )));
        }
        validate_finite(&points)?;
        Ok(PointCloud {
            points,
            labels: Some(labels),
        })
    }

    pub fn empty() -> PointCloud {
        PointCloud::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    /// Drops the label channel.
    pub fn without_labels(&self) -> PointCloud {
        PointCloud {
            points: self.points.clone(),
            labels: None,
        }
    }

    /// Replaces the label channel.
    pub fn relabeled(&self, labels: Vec<Label>) -> Result<PointCloud> {
        PointCloud::with_labels(self.points.clone(), labels)
    }

    /// The subset at `indices`, labels carried along. Indices may repeat and
    /// come in any order; output follows `indices` order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        PointCloud { points, labels }
    }

    /// Every point mapped by the pose; labels preserved.
    pub fn transform(&self, pose: &Pose) -> PointCloud {
        let points = self.points.iter().map(|p| pose.apply(p)).collect();
        PointCloud {
            points,
            labels: self.labels.clone(),
        }
    }

    /// Concatenation, order-preserving. The result is labeled only when every
    /// input is labeled.
    pub fn concat(clouds: &[&PointCloud]) -> PointCloud {
        let total: usize = clouds.iter().map(|c| c.len()).sum();
        let mut points = Vec::with_capacity(total);
        for c in clouds {
            points.extend_from_slice(&c.points);
        }
        let labels = if clouds.iter().all(|c| c.labels.is_some()) && !clouds.is_empty() {
            let mut labels = Vec::with_capacity(total);
            for c in clouds {
                labels.extend_from_slice(c.labels.as_ref().unwrap());
            }
            Some(labels)
        } else {
            None
        };
        PointCloud { points, labels }
    }

    /// Coordinates rounded through f32, the on-disk precision. Applying this
    /// before hull/diff computation keeps in-memory geometry bit-identical to
    /// what a write/read round trip yields.
    pub fn quantize_f32(&self) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| Point3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64))
            .collect();
        PointCloud {
            points,
            labels: self.labels.clone(),
        }
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let mut sum = Vec3::zeros();
        for p in &self.points {
            sum += p.coords;
        }
        Some(Point3::from(sum / self.points.len() as f64))
    }
}

fn validate_finite(points: &[Point3]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::InvalidCloud(format!(
                "non-finite coordinate at point {i}: ({}, {}, {})",
                p.x, p.y, p.z
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_points() {
        let r = PointCloud::new(vec![Point3::new(0.0, f64::NAN, 0.0)]);
        assert!(matches!(r, Err(Error::InvalidCloud(_))));
    }

    #[test]
    fn rejects_label_count_mismatch() {
        let r = PointCloud::with_labels(vec![Point3::origin()], vec![]);
        assert!(matches!(r, Err(Error::InvalidCloud(_))));
    }

    #[test]
    fn concat_preserves_order_and_labels() {
        let a = PointCloud::with_labels(vec![Point3::new(1.0, 0.0, 0.0)], vec![Label::Static])
            .unwrap();
        let b = PointCloud::with_labels(vec![Point3::new(2.0, 0.0, 0.0)], vec![Label::Dynamic])
            .unwrap();
        let c = PointCloud::concat(&[&a, &b]);
        assert_eq!(c.points()[0].x, 1.0);
        assert_eq!(c.points()[1].x, 2.0);
        assert_eq!(c.labels().unwrap(), &[Label::Static, Label::Dynamic]);
    }

    #[test]
    fn quantize_is_idempotent() {
        let c = PointCloud::new(vec![Point3::new(0.1, 0.2, 0.3)]).unwrap();
        let q1 = c.quantize_f32();
        let q2 = q1.quantize_f32();
        assert_eq!(q1.points(), q2.points());
    }
}
