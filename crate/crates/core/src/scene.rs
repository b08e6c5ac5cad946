//! Gaussian cloud, camera model and the per-Gaussian geometric quantities.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::sigmoid;
use crate::sh::{coeff_count, MAX_DEGREE};

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("gaussian {index} has {found} weight coefficients, expected {expected}")]
    WeightShape { index: usize, found: usize, expected: usize },
    #[error("gaussian {index} has {found} lightness coefficients, expected {expected}")]
    LightnessShape { index: usize, found: usize, expected: usize },
    #[error("spherical harmonic degree {0} exceeds the supported maximum of 3")]
    Degree(usize),
    #[error("palette size {0} is below the minimum of 3")]
    PaletteSize(usize),
    #[error("camera intrinsics must be positive (fx={fx}, fy={fy})")]
    Intrinsics { fx: f64, fy: f64 },
    #[error("camera rotation block is not orthonormal")]
    NotRigid,
}

/// One anisotropic Gaussian carrying palette-weight and lightness SH.
///
/// `weight_sh` is coefficient-major: entry `c * K + k` is coefficient `c` of palette channel `k`.
/// The same struct doubles as a gradient buffer with identical layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mu: [f64; 3],
    pub log_scale: [f64; 3],
    /// `(w, x, y, z)`, normalized before use.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub weight_sh: Vec<f64>,
    pub lightness_sh: Vec<f64>,
}

/// Parameter classes, used for per-group learning rates and gradient reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Opacity,
    WeightSh,
    LightnessSh,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::WeightSh,
        ParamGroup::LightnessSh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity",
            ParamGroup::WeightSh => "weight_sh",
            ParamGroup::LightnessSh => "lightness_sh",
        }
    }
}

impl Gaussian {
    pub fn new(sh_degree: usize, k: usize) -> Self {
        let c = coeff_count(sh_degree);
        Self {
            mu: [0.0; 3],
            log_scale: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            weight_sh: vec![0.0; c * k],
            lightness_sh: vec![0.0; c],
        }
    }

    /// All-zero buffer of the same shape (for gradients and optimizer moments).
    pub fn zeros_like(&self) -> Self {
        Self {
            mu: [0.0; 3],
            log_scale: [0.0; 3],
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            weight_sh: vec![0.0; self.weight_sh.len()],
            lightness_sh: vec![0.0; self.lightness_sh.len()],
        }
    }

    pub fn group(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::Position => &self.mu,
            ParamGroup::Scale => &self.log_scale,
            ParamGroup::Rotation => &self.rotation,
            ParamGroup::Opacity => std::slice::from_ref(&self.opacity_logit),
            ParamGroup::WeightSh => &self.weight_sh,
            ParamGroup::LightnessSh => &self.lightness_sh,
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::Position => &mut self.mu,
            ParamGroup::Scale => &mut self.log_scale,
            ParamGroup::Rotation => &mut self.rotation,
            ParamGroup::Opacity => std::slice::from_mut(&mut self.opacity_logit),
            ParamGroup::WeightSh => &mut self.weight_sh,
            ParamGroup::LightnessSh => &mut self.lightness_sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        let [w, x, y, z] = self.rotation;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 {
            [1.0, 0.0, 0.0, 0.0]
        } else {
            [w / n, x / n, y / n, z / n]
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.unit_rotation())
    }

    /// World-space covariance `R · diag(exp(2s)) · Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let d = Matrix3::from_diagonal(&Vector3::from(self.log_scale.map(|s| (2.0 * s).exp())));
        r * d * r.transpose()
    }

    pub fn add_scaled(&mut self, other: &Gaussian, scale: f64) {
        for g in ParamGroup::ALL {
            for (a, b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a += scale * b;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        ParamGroup::ALL
            .iter()
            .flat_map(|&g| self.group(g).iter())
            .map(|v| v * v)
            .sum()
    }
}

pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a scalar through `quat_to_matrix`, for a unit quaternion.
pub fn quat_to_matrix_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// Pinhole camera with OpenCV axes (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major rigid transform.
    pub world_to_camera: [[f64; 4]; 4],
}

impl Camera {
    /// Camera at `eye` looking at `target`; `fov_x` is the horizontal field of view in radians.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        fov_x: f64,
    ) -> Self {
        let eye_v = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye_v).normalize();
        // Image y points down, so "down" is -up projected off the forward axis.
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye_v);
        let fx = width as f64 / 2.0 / (fov_x / 2.0).tan();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[(i, j)];
            }
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Self {
            width,
            height,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: m,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_camera;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    pub fn translation(&self) -> Vector3<f64> {
        let m = &self.world_to_camera;
        Vector3::new(m[0][3], m[1][3], m[2][3])
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::Intrinsics { fx: self.fx, fy: self.fy });
        }
        let r = self.rotation();
        if ((r * r.transpose()) - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(SceneError::NotRigid);
        }
        Ok(())
    }
}

/// A scene: Gaussians sharing one SH degree and palette size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
    pub k: usize,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize, k: usize) -> Self {
        Self { gaussians: Vec::new(), sh_degree, k }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn coeffs(&self) -> usize {
        coeff_count(self.sh_degree)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.sh_degree > MAX_DEGREE {
            return Err(SceneError::Degree(self.sh_degree));
        }
        if self.k < 3 {
            return Err(SceneError::PaletteSize(self.k));
        }
        let c = self.coeffs();
        for (index, g) in self.gaussians.iter().enumerate() {
            if g.weight_sh.len() != c * self.k {
                return Err(SceneError::WeightShape {
                    index,
                    found: g.weight_sh.len(),
                    expected: c * self.k,
                });
            }
            if g.lightness_sh.len() != c {
                return Err(SceneError::LightnessShape {
                    index,
                    found: g.lightness_sh.len(),
                    expected: c,
                });
            }
        }
        Ok(())
    }

    /// Zeroed gradient buffers matching every Gaussian.
    pub fn zero_grads(&self) -> Vec<Gaussian> {
        self.gaussians.iter().map(Gaussian::zeros_like).collect()
    }
}
