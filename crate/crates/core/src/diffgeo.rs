//! Differential geometry of a depth image viewed as a Monge patch.
//!
//! Each pixel's neighbourhood is lifted to camera-frame 3D points and the
//! surface is written locally as `z = D(x, y)` over the metric image plane.
//! Pixel-space central differences of the lifted points are converted to
//! metric derivatives with the exact chain rule, so `D_x`, `D_xx`, ... and the
//! resulting curvatures carry metric units (1/m, 1/m²).

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;

use crate::ingest::DepthFrame;

/// Options shared by the derivative and normal estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilParams {
    /// A neighbour whose depth differs from the center by more than this
    /// (meters) marks a discontinuity and invalidates the pixel.
    pub max_depth_jump: f64,
    /// Pixels whose surface normal makes `|cos| <` this with the viewing ray
    /// are treated as silhouette pixels and invalidated.
    pub min_incidence_cos: f64,
}

impl Default for StencilParams {
    /// Ten voxels of the sparse preset (v_s = 8 mm) and about 72 degrees.
    fn default() -> Self {
        StencilParams {
            max_depth_jump: 0.08,
            min_incidence_cos: 0.3,
        }
    }
}

/// First and second partial derivatives of depth with respect to the metric
/// image-plane coordinates.
#[derive(Debug, Clone)]
pub struct DerivativeMaps {
    pub width: usize,
    pub height: usize,
    pub dm: Vec<f64>,
    pub dn: Vec<f64>,
    pub dmm: Vec<f64>,
    pub dnn: Vec<f64>,
    pub dmn: Vec<f64>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct CurvatureMaps {
    pub width: usize,
    pub height: usize,
    /// Mean curvature, 1/m. Positive where the surface bulges toward the camera.
    pub mean: Vec<f64>,
    /// Gaussian curvature, 1/m².
    pub gaussian: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Camera-frame unit normals facing the camera.
#[derive(Debug, Clone)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl CurvatureMaps {
    #[inline]
    pub fn at(&self, m: usize, n: usize) -> Option<(f64, f64)> {
        let i = n * self.width + m;
        self.valid[i].then(|| (self.mean[i], self.gaussian[i]))
    }
}

impl NormalMap {
    #[inline]
    pub fn at(&self, m: usize, n: usize) -> Option<Vector3<f64>> {
        let i = n * self.width + m;
        self.valid[i].then(|| self.normals[i])
    }
}

/// Central-difference stencil of lifted points around one pixel.
struct Stencil {
    p: Vector3<f64>,
    pm: Vector3<f64>,
    pn: Vector3<f64>,
    pmm: Vector3<f64>,
    pnn: Vector3<f64>,
    pmn: Vector3<f64>,
}

fn stencil(frame: &DepthFrame, m: usize, n: usize, params: &StencilParams) -> Option<Stencil> {
    if m == 0 || n == 0 || m + 1 >= frame.width() || n + 1 >= frame.height() {
        return None;
    }
    let z0 = frame.depth(m, n);
    if z0 <= 0.0 {
        return None;
    }
    let mut pts = [[Vector3::zeros(); 3]; 3];
    for (dj, row) in pts.iter_mut().enumerate() {
        for (di, slot) in row.iter_mut().enumerate() {
            let (mm, nn) = (m + di - 1, n + dj - 1);
            let z = frame.depth(mm, nn);
            if z <= 0.0 || (z - z0).abs() > params.max_depth_jump {
                return None;
            }
            *slot = frame.camera_point(mm, nn);
        }
    }
    // pts[row][col]: row = n offset, col = m offset
    let c = pts[1][1];
    let pm = (pts[1][2] - pts[1][0]) * 0.5;
    let pn = (pts[2][1] - pts[0][1]) * 0.5;
    let nrm = pm.cross(&pn).try_normalize(1e-300)?;
    if nrm.dot(&c.normalize()).abs() < params.min_incidence_cos {
        return None;
    }
    Some(Stencil {
        p: c,
        pm,
        pn,
        pmm: pts[1][2] - c * 2.0 + pts[1][0],
        pnn: pts[2][1] - c * 2.0 + pts[0][1],
        pmn: (pts[2][2] - pts[0][2] - pts[2][0] + pts[0][0]) * 0.25,
    })
}

/// Metric Monge-patch derivatives `(D_x, D_y, D_xx, D_yy, D_xy)` from a stencil.
fn monge_derivatives(s: &Stencil) -> Option<[f64; 5]> {
    // Jacobian of (x, y) w.r.t. pixel (m, n); rows: d/dm, d/dn
    let a = Matrix2::new(s.pm.x, s.pm.y, s.pn.x, s.pn.y);
    let a_inv = a.try_inverse()?;
    let first = a_inv * nalgebra::Vector2::new(s.pm.z, s.pn.z);
    let (dx, dy) = (first.x, first.y);
    // z_ab - D_x x_ab - D_y y_ab = [x_a y_a] Hess [x_b y_b]^T
    let r = |v: &Vector3<f64>| v.z - dx * v.x - dy * v.y;
    let rhs = Matrix2::new(r(&s.pmm), r(&s.pmn), r(&s.pmn), r(&s.pnn));
    let hess = a_inv * rhs * a_inv.transpose();
    let vals = [dx, dy, hess[(0, 0)], hess[(1, 1)], 0.5 * (hess[(0, 1)] + hess[(1, 0)])];
    vals.iter().all(|v| v.is_finite()).then_some(vals)
}

pub fn depth_derivatives(frame: &DepthFrame, params: &StencilParams) -> DerivativeMaps {
    let (w, h) = (frame.width(), frame.height());
    let rows: Vec<Vec<Option<[f64; 5]>>> = (0..h)
        .into_par_iter()
        .map(|n| {
            (0..w)
                .map(|m| stencil(frame, m, n, params).and_then(|s| monge_derivatives(&s)))
                .collect()
        })
        .collect();
    let mut out = DerivativeMaps {
        width: w,
        height: h,
        dm: vec![0.0; w * h],
        dn: vec![0.0; w * h],
        dmm: vec![0.0; w * h],
        dnn: vec![0.0; w * h],
        dmn: vec![0.0; w * h],
        valid: vec![false; w * h],
    };
    for (i, d) in rows.into_iter().flatten().enumerate() {
        if let Some([dm, dn, dmm, dnn, dmn]) = d {
            out.dm[i] = dm;
            out.dn[i] = dn;
            out.dmm[i] = dmm;
            out.dnn[i] = dnn;
            out.dmn[i] = dmn;
            out.valid[i] = true;
        }
    }
    out
}

/// Gaussian and mean curvature of a Monge patch from its derivatives.
#[inline]
pub fn monge_curvatures(dm: f64, dn: f64, dmm: f64, dnn: f64, dmn: f64) -> (f64, f64) {
    let g = 1.0 + dm * dm + dn * dn;
    let gaussian = (dmm * dnn - dmn * dmn) / (g * g);
    let mean = ((1.0 + dm * dm) * dnn - 2.0 * dm * dn * dmn + (1.0 + dn * dn) * dmm) / (2.0 * g.powf(1.5));
    (mean, gaussian)
}

pub fn curvature_maps(deriv: &DerivativeMaps) -> CurvatureMaps {
    let len = deriv.width * deriv.height;
    let mut mean = vec![0.0; len];
    let mut gaussian = vec![0.0; len];
    for i in 0..len {
        if deriv.valid[i] {
            let (h, k) = monge_curvatures(deriv.dm[i], deriv.dn[i], deriv.dmm[i], deriv.dnn[i], deriv.dmn[i]);
            mean[i] = h;
            gaussian[i] = k;
        }
    }
    CurvatureMaps {
        width: deriv.width,
        height: deriv.height,
        mean,
        gaussian,
        valid: deriv.valid.clone(),
    }
}

/// Normals from the cross product of the lifted tangents, oriented toward the camera.
pub fn normal_map(frame: &DepthFrame, params: &StencilParams) -> NormalMap {
    let (w, h) = (frame.width(), frame.height());
    let normals: Vec<Option<Vector3<f64>>> = (0..h)
        .into_par_iter()
        .flat_map_iter(|n| {
            (0..w).map(move |m| {
                let s = stencil(frame, m, n, params)?;
                let nrm = s.pm.cross(&s.pn).try_normalize(1e-300)?;
                Some(if nrm.dot(&s.p) > 0.0 { -nrm } else { nrm })
            })
        })
        .collect();
    NormalMap {
        width: w,
        height: h,
        valid: normals.iter().map(Option::is_some).collect(),
        normals: normals.into_iter().map(|n| n.unwrap_or_else(Vector3::zeros)).collect(),
    }
}

/// Everything the fusion step needs from one frame.
#[derive(Debug, Clone)]
pub struct FrameGeometry {
    pub normals: NormalMap,
    pub curvatures: CurvatureMaps,
}

type PixelGeometry = (Option<Vector3<f64>>, Option<(f64, f64)>);

/// Normals and curvatures from one stencil pass; identical to calling
/// [`normal_map`] and [`curvature_maps`] separately.
pub fn frame_geometry(frame: &DepthFrame, params: &StencilParams) -> FrameGeometry {
    let (w, h) = (frame.width(), frame.height());
    let px: Vec<PixelGeometry> = (0..h)
        .into_par_iter()
        .flat_map_iter(|n| {
            (0..w).map(move |m| {
                let Some(s) = stencil(frame, m, n, params) else {
                    return (None, None);
                };
                let normal = s
                    .pm
                    .cross(&s.pn)
                    .try_normalize(1e-300)
                    .map(|nrm| if nrm.dot(&s.p) > 0.0 { -nrm } else { nrm });
                let curv = monge_derivatives(&s).map(|[dm, dn, dmm, dnn, dmn]| monge_curvatures(dm, dn, dmm, dnn, dmn));
                (normal, curv)
            })
        })
        .collect();
    let mut normals = NormalMap {
        width: w,
        height: h,
        normals: vec![Vector3::zeros(); w * h],
        valid: vec![false; w * h],
    };
    let mut curvatures = CurvatureMaps {
        width: w,
        height: h,
        mean: vec![0.0; w * h],
        gaussian: vec![0.0; w * h],
        valid: vec![false; w * h],
    };
    for (i, (nrm, curv)) in px.into_iter().enumerate() {
        if let Some(nrm) = nrm {
            normals.normals[i] = nrm;
            normals.valid[i] = true;
        }
        if let Some((mean, gaussian)) = curv {
            curvatures.mean[i] = mean;
            curvatures.gaussian[i] = gaussian;
            curvatures.valid[i] = true;
        }
    }
    FrameGeometry { normals, curvatures }
}

/// Writes a map as an 8-bit binary PGM, mapping `[lo, hi]` to `[0, 255]`;
/// invalid pixels are 0. The mapping is recorded in a header comment.
pub fn write_heatmap_pgm(
    values: &[f64],
    valid: &[bool],
    width: usize,
    height: usize,
    lo: f64,
    hi: f64,
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(
        out,
        "P5\n# value = {lo} + (pixel - 1) * {} ; pixel 0 = invalid\n{width} {height}\n255\n",
        (hi - lo) / 254.0
    )?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (v, ok) in values.iter().zip(valid) {
        let b = if *ok {
            1 + (((v - lo) / span).clamp(0.0, 1.0) * 254.0).round() as u8
        } else {
            0
        };
        out.write_all(&[b])?;
    }
    Ok(())
}
