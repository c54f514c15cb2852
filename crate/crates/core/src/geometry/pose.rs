use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::Rotation3;

/// Rigid transform from an object frame into the camera frame (millimetres).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(rename = "r")]
    pub rot: Rotation3,
    #[serde(with = "vec3_serde")]
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn new(rot: Rotation3, t: Vector3<f64>) -> Self {
        Self { rot, t }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation3::identity(), t)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rot: self.rot * other.rot,
            t: self.rot.apply(&other.t) + self.t,
        }
    }

    pub fn invert(&self) -> Pose {
        let rt = self.rot.transpose();
        Pose {
            rot: rt,
            t: -rt.apply(&self.t),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.apply(p) + self.t
    }
}

pub fn compose(p: &Pose, q: &Pose) -> Pose {
    p.compose(q)
}

pub fn invert(p: &Pose) -> Pose {
    p.invert()
}

pub(crate) mod vec3_serde {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq([v.x, v.y, v.z])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }
}
