//! Dense frame × joint storage shared by triangulation, the body prior and
//! the refiner. Entries are stored frame-major: index `t * n_joints + i`.

use nalgebra::{Vector2, Vector3};

use crate::scalar::Scalar;

/// Paired real/mirror pixel observations for a fixed joint list.
///
/// Entry `i` of the mirror track already holds the *mirror counterpart* of
/// joint `i` (left/right swapped), so `real[k]` and `mirror[k]` image the
/// same physical point.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTracks<T: Scalar> {
    pub n_frames: usize,
    pub n_joints: usize,
    pub real: Vec<Vector2<T>>,
    pub mirror: Vec<Vector2<T>>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> JointTracks<T> {
    pub fn new(n_frames: usize, n_joints: usize) -> Self {
        let len = n_frames * n_joints;
        Self {
            n_frames,
            n_joints,
            real: vec![Vector2::zeros(); len],
            mirror: vec![Vector2::zeros(); len],
            valid: vec![false; len],
        }
    }

    #[inline]
    pub fn index(&self, frame: usize, joint: usize) -> usize {
        frame * self.n_joints + joint
    }

    pub fn set(&mut self, frame: usize, joint: usize, real: Vector2<T>, mirror: Vector2<T>) {
        let k = self.index(frame, joint);
        self.real[k] = real;
        self.mirror[k] = mirror;
        self.valid[k] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Valid pairs in storage order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, Vector2<T>, Vector2<T>)> + '_ {
        (0..self.real.len())
            .filter(|&k| self.valid[k])
            .map(|k| (k, self.real[k], self.mirror[k]))
    }

    pub fn cast<U: Scalar>(&self) -> JointTracks<U> {
        JointTracks {
            n_frames: self.n_frames,
            n_joints: self.n_joints,
            real: self.real.iter().map(|v| v.map(|x| U::lit(x.as_f64()))).collect(),
            mirror: self.mirror.iter().map(|v| v.map(|x| U::lit(x.as_f64()))).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Triangulated 3D joints with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Joints3D<T: Scalar> {
    pub n_frames: usize,
    pub n_joints: usize,
    pub positions: Vec<Vector3<T>>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> Joints3D<T> {
    pub fn new(n_frames: usize, n_joints: usize) -> Self {
        let len = n_frames * n_joints;
        Self {
            n_frames,
            n_joints,
            positions: vec![Vector3::zeros(); len],
            valid: vec![false; len],
        }
    }

    #[inline]
    pub fn index(&self, frame: usize, joint: usize) -> usize {
        frame * self.n_joints + joint
    }

    #[inline]
    pub fn get(&self, frame: usize, joint: usize) -> Option<&Vector3<T>> {
        let k = self.index(frame, joint);
        self.valid[k].then(|| &self.positions[k])
    }

    pub fn set(&mut self, frame: usize, joint: usize, p: Vector3<T>) {
        let k = self.index(frame, joint);
        self.positions[k] = p;
        self.valid[k] = true;
    }

    pub fn frame(&self, frame: usize) -> &[Vector3<T>] {
        let s = frame * self.n_joints;
        &self.positions[s..s + self.n_joints]
    }

    pub fn frame_valid(&self, frame: usize) -> &[bool] {
        let s = frame * self.n_joints;
        &self.valid[s..s + self.n_joints]
    }

    /// Applies `f` to every stored position.
    pub fn map_positions(&self, f: impl Fn(&Vector3<T>) -> Vector3<T>) -> Self {
        Self {
            n_frames: self.n_frames,
            n_joints: self.n_joints,
            positions: self.positions.iter().map(f).collect(),
            valid: self.valid.clone(),
        }
    }
}
