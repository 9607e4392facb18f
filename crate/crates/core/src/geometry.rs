//! 6-DoF pose streams and their conversion into fixed-size relative-control
//! tensors: 16 uniformly spaced samples over an action interval, each
//! consecutive pair reduced to `[Δx,Δy,Δz,Δr_x,Δr_y,Δr_z]` with translation
//! expressed in the earlier pose's body frame and rotation as a
//! principal-branch rotation vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::tensor::Tensor;

pub const CONTROL_KNOTS: usize = 16;
pub const CONTROL_DIMS: usize = 6;

/// Unit quaternion, scalar-first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= 1e-9
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product.
    pub fn mul(&self, o: &Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let p = Quat::new(0.0, v[0], v[1], v[2]);
        let r = self.mul(&p).mul(&self.conjugate());
        [r.x, r.y, r.z]
    }

    /// Shortest-arc spherical interpolation; the double cover is resolved by
    /// sign-aligning `b` with `a`.
    pub fn slerp(&self, other: &Quat, t: f64) -> Quat {
        let mut b = *other;
        let mut d = self.w * b.w + self.x * b.x + self.y * b.y + self.z * b.z;
        if d < 0.0 {
            b = Quat::new(-b.w, -b.x, -b.y, -b.z);
            d = -d;
        }
        if d > 1.0 - 1e-12 {
            // nearly parallel: lerp and renormalize
            return Quat::new(
                self.w + t * (b.w - self.w),
                self.x + t * (b.x - self.x),
                self.y + t * (b.y - self.y),
                self.z + t * (b.z - self.z),
            )
            .normalized();
        }
        let theta = d.clamp(-1.0, 1.0).acos();
        let s = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / s;
        let wb = (t * theta).sin() / s;
        Quat::new(
            wa * self.w + wb * b.w,
            wa * self.x + wb * b.x,
            wa * self.y + wb * b.y,
            wa * self.z + wb * b.z,
        )
        .normalized()
    }
}

/// Principal-branch axis-angle vector (angle in `[0, π]`).
pub fn rotation_to_rotvec(q: &Quat) -> Result<[f64; 3]> {
    if !q.is_unit() {
        return Err(Error::Invalid(format!(
            "quaternion norm {} is not 1",
            q.norm()
        )));
    }
    // w >= 0 picks the representative with angle <= pi
    let q = if q.w < 0.0 {
        Quat::new(-q.w, -q.x, -q.y, -q.z)
    } else {
        *q
    };
    let s = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    if s < 1e-12 {
        // small angle: rotvec ~ 2 * vector part
        return Ok([2.0 * q.x, 2.0 * q.y, 2.0 * q.z]);
    }
    let angle = 2.0 * s.atan2(q.w);
    Ok([q.x / s * angle, q.y / s * angle, q.z / s * angle])
}

pub fn rotation_from_rotvec(r: [f64; 3]) -> Quat {
    let angle = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if angle < 1e-12 {
        return Quat::new(1.0, r[0] / 2.0, r[1] / 2.0, r[2] / 2.0).normalized();
    }
    let half = angle / 2.0;
    let s = half.sin() / angle;
    Quat::new(half.cos(), r[0] * s, r[1] * s, r[2] * s)
}

/// Timestamped 6-DoF pose.
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    pub t: f64,
    pub translation: [f64; 3],
    pub rotation: Quat,
}

impl Pose {
    pub fn validate(&self) -> Result<()> {
        if !self.t.is_finite() {
            return Err(Error::Invalid("non-finite pose timestamp".into()));
        }
        if !self.rotation.is_unit() {
            return Err(Error::Invalid(format!(
                "pose quaternion norm {} is not 1",
                self.rotation.norm()
            )));
        }
        Ok(())
    }
}

/// JSON-lines record for one pose: `{t, tx,ty,tz, qw,qx,qy,qz}`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        PoseRecord {
            t: p.t,
            tx: p.translation[0],
            ty: p.translation[1],
            tz: p.translation[2],
            qw: p.rotation.w,
            qx: p.rotation.x,
            qy: p.rotation.y,
            qz: p.rotation.z,
        }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(r: &PoseRecord) -> Self {
        Pose {
            t: r.t,
            translation: [r.tx, r.ty, r.tz],
            rotation: Quat::new(r.qw, r.qx, r.qy, r.qz),
        }
    }
}

pub fn poses_to_jsonl(poses: &[Pose]) -> Result<String> {
    let mut out = String::new();
    for p in poses {
        out.push_str(&serde_json::to_string(&PoseRecord::from(p))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn poses_from_jsonl(text: &str) -> Result<Vec<Pose>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let rec: PoseRecord = serde_json::from_str(l)?;
            Ok(Pose::from(&rec))
        })
        .collect()
}

/// 16 rows of relative 6-DoF controls over one action interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTensor {
    pub knots: Vec<[f64; CONTROL_DIMS]>,
    pub interval: (f64, f64),
}

impl ControlTensor {
    pub fn zeros(interval: (f64, f64)) -> Self {
        ControlTensor {
            knots: vec![[0.0; CONTROL_DIMS]; CONTROL_KNOTS],
            interval,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(CONTROL_KNOTS * CONTROL_DIMS);
        for row in &self.knots {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![CONTROL_KNOTS, CONTROL_DIMS], data).unwrap()
    }

    pub fn from_flat(flat: &[f64], interval: (f64, f64)) -> Self {
        assert_eq!(flat.len(), CONTROL_KNOTS * CONTROL_DIMS);
        let knots = flat
            .chunks_exact(CONTROL_DIMS)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect();
        ControlTensor { knots, interval }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.to_tensor().data
    }
}

/// Relative 6-vector from pose `a` to pose `b`: translation delta expressed
/// in `a`'s rotation frame; rotation delta as the rotvec of `a⁻¹ ∘ b`.
pub fn relative_pose(a: &Pose, b: &Pose) -> Result<[f64; CONTROL_DIMS]> {
    a.validate()?;
    b.validate()?;
    let dt = [
        b.translation[0] - a.translation[0],
        b.translation[1] - a.translation[1],
        b.translation[2] - a.translation[2],
    ];
    let local = a.rotation.conjugate().rotate(dt);
    let dq = a.rotation.conjugate().mul(&b.rotation).normalized();
    let rot = rotation_to_rotvec(&dq)?;
    Ok([local[0], local[1], local[2], rot[0], rot[1], rot[2]])
}

fn sample_pose(poses: &[Pose], t: f64) -> Pose {
    // callers guarantee t within [first.t, last.t]
    let idx = match poses.binary_search_by(|p| p.t.partial_cmp(&t).unwrap()) {
        Ok(i) => return poses[i],
        Err(i) => i,
    };
    let (lo, hi) = (&poses[idx - 1], &poses[idx]);
    let span = hi.t - lo.t;
    let u = if span > 0.0 { (t - lo.t) / span } else { 0.0 };
    Pose {
        t,
        translation: [
            lo.translation[0] + u * (hi.translation[0] - lo.translation[0]),
            lo.translation[1] + u * (hi.translation[1] - lo.translation[1]),
            lo.translation[2] + u * (hi.translation[2] - lo.translation[2]),
        ],
        rotation: lo.rotation.slerp(&hi.rotation, u),
    }
}

/// Resample a pose stream over `interval` into a [`ControlTensor`].
///
/// The interval is clipped to the pose time range (never extrapolated).
/// 16 uniformly spaced samples yield 15 between-knot deltas; row 15 repeats
/// row 14 to fill the 16x6 layout.
pub fn resample_controls(poses: &[Pose], interval: (f64, f64)) -> Result<ControlTensor> {
    if poses.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 poses, got {}",
            poses.len()
        )));
    }
    for p in poses {
        p.validate()?;
    }
    if poses.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(Error::Invalid("poses are not sorted by time".into()));
    }
    let (t0, t1) = interval;
    if !(t1 > t0) {
        return Err(Error::Invalid(format!("empty interval ({t0}, {t1})")));
    }
    let lo = poses.first().unwrap().t;
    let hi = poses.last().unwrap().t;
    let c0 = t0.max(lo);
    let c1 = t1.min(hi);
    if !(c1 > c0) {
        return Err(Error::Invalid(format!(
            "interval ({t0}, {t1}) does not overlap pose range ({lo}, {hi})"
        )));
    }
    let samples: Vec<Pose> = (0..CONTROL_KNOTS)
        .map(|k| {
            let u = k as f64 / (CONTROL_KNOTS - 1) as f64;
            sample_pose(poses, c0 + u * (c1 - c0))
        })
        .collect();
    let mut knots = Vec::with_capacity(CONTROL_KNOTS);
    for k in 0..CONTROL_KNOTS - 1 {
        knots.push(relative_pose(&samples[k], &samples[k + 1])?);
    }
    knots.push(knots[CONTROL_KNOTS - 2]);
    Ok(ControlTensor {
        knots,
        interval: (c0, c1),
    })
}
