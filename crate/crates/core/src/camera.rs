use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics without skew. Camera frame: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// `f = 1.2·W`, principal point at the pixel-grid center `((W-1)/2, (H-1)/2)`.
    pub fn default_for(width: usize, height: usize) -> Self {
        let f = 1.2 * width as f64;
        Intrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn identity() -> Self {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn from_matrix(k: &[[f64; 3]; 3]) -> Result<Self> {
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::invalid("intrinsics must be skew-free with last row (0, 0, 1)"));
        }
        Intrinsics::new(k[0][0], k[1][1], k[0][2], k[1][2])
    }

    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        if !(p[2] > 0.0) {
            return Err(Error::invalid(format!("point at depth {} is not in front of the camera", p[2])));
        }
        Ok([self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }

    /// `K⁻¹ (u, v, 1)`.
    pub fn ray(&self, uv: [f64; 2]) -> [f64; 3] {
        [(uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0]
    }
}
