//! Pinhole projection and z-buffered triangle rasterization of posed face
//! meshes.
//!
//! Camera space has x right, y up and the camera looking down +z. Raster
//! space has y down; pixel `(x, y)` is sampled at its centre
//! `(x + 0.5, y + 0.5)`. A pixel centre exactly on a shared edge belongs to
//! the triangle for which that edge is a top or left edge, and equal depths
//! go to the lower triangle index, so output is bit-stable.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, RasterImage};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    /// Focal length in pixels.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(focal > 0.0) {
            return Err(Error::InvalidArgument(format!("focal length {focal} must be > 0")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self {
            focal,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Camera with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }
}

/// A vertex in raster space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// Behind or on the camera plane; triangles using it are dropped.
    pub clipped: bool,
}

/// Projects `[N, 3]` camera-space vertices.
pub fn project_perspective(vertices: &Tensor, camera: &Camera) -> Result<Vec<Projected>> {
    if vertices.rank() != 2 || vertices.cols() != 3 {
        return Err(Error::shape(
            "project_perspective",
            format!("expected [N, 3], got {:?}", vertices.shape()),
        ));
    }
    Ok(vertices
        .data()
        .chunks_exact(3)
        .map(|p| {
            let (x, y, z) = (p[0], p[1], p[2]);
            if z > 0.0 {
                Projected {
                    u: camera.focal * x / z + camera.cx,
                    v: camera.cy - camera.focal * y / z,
                    depth: z,
                    clipped: false,
                }
            } else {
                Projected {
                    u: f64::NAN,
                    v: f64::NAN,
                    depth: z,
                    clipped: true,
                }
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: RasterImage,
    /// Row-major `H×W`, `+inf` where nothing was drawn.
    pub depth: Vec<f64>,
    pub face_mask: BinaryMask,
}

impl RenderOutput {
    fn blank(width: usize, height: usize) -> Self {
        Self {
            color: RasterImage::new(width, height),
            depth: vec![f64::INFINITY; width * height],
            face_mask: BinaryMask::new(width, height),
        }
    }
}

/// Edge function: positive when `p` lies on the interior side of `a→b` for
/// a triangle with positive signed area.
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Top edge: horizontal with the interior below it. Left edge: interior to
/// its right, i.e. the edge runs upward in raster space.
fn is_top_left(a: (f64, f64), b: (f64, f64)) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

/// Rasterizes triangles with per-vertex colours. Attributes are
/// interpolated linearly in raster space.
pub fn rasterize(vertices: &Tensor, colors: &Tensor, triangles: &[[u32; 3]], camera: &Camera) -> Result<RenderOutput> {
    let projected = project_perspective(vertices, camera)?;
    let n = projected.len();
    if colors.shape() != [n, 3] {
        return Err(Error::shape(
            "rasterize",
            format!("colors {:?} for {n} vertices", colors.shape()),
        ));
    }
    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
        return Err(Error::InvalidArgument(format!(
            "triangle {t:?} indexes past {n} vertices"
        )));
    }
    let (w, h) = (camera.width, camera.height);
    let mut out = RenderOutput::blank(w, h);
    for tri in triangles {
        let pv = tri.map(|i| projected[i as usize]);
        if pv.iter().any(|p| p.clipped) {
            continue;
        }
        let mut idx = [0usize, 1, 2];
        let mut pts = pv.map(|p| (p.u, p.v));
        let area = edge(pts[0], pts[1], pts[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            idx.swap(1, 2);
            pts.swap(1, 2);
        }
        let area = area.abs();
        let depth = idx.map(|i| pv[i].depth);
        let rgb = idx.map(|i| colors.row(tri[i] as usize).to_vec());

        let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let y1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        let edges = [(1, 2), (2, 0), (0, 1)];
        let top_left = edges.map(|(a, b)| is_top_left(pts[a], pts[b]));
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let e = edges.map(|(a, b)| edge(pts[a], pts[b], p));
                let inside = e.iter().zip(&top_left).all(|(&ev, &tl)| ev > 0.0 || (ev == 0.0 && tl));
                if !inside {
                    continue;
                }
                // e[i] is the weight of vertex i (opposite edge i)
                let b = e.map(|ev| ev / area);
                let z = b[0] * depth[0] + b[1] * depth[1] + b[2] * depth[2];
                let pix = py * w + px;
                if z < out.depth[pix] {
                    out.depth[pix] = z;
                    let c = [0, 1, 2].map(|k| b[0] * rgb[0][k] + b[1] * rgb[1][k] + b[2] * rgb[2][k]);
                    out.color.set_pixel(px, py, c.map(|v| v.clamp(0.0, 1.0)));
                    out.face_mask.set(px, py, true);
                }
            }
        }
    }
    Ok(out)
}
