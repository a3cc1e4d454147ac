use std::path::Path;

use super::{put_f32s, read_bytes, write_bytes, Cursor};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::face3dmm::FaceBasis;

pub const FB3D_MAGIC: &[u8; 4] = b"FB3D";
pub const FB3D_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 5 * 4;

/// Header, then `f32` mean shape, mean texture and the three bases
/// column-major, then `u32` triangle indices.
pub fn encode_basis(basis: &FaceBasis) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FB3D_MAGIC);
    out.extend_from_slice(&FB3D_VERSION.to_le_bytes());
    for v in [
        basis.n_vertices(),
        basis.k_id(),
        basis.k_exp(),
        basis.k_tex(),
        basis.triangles().len(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    put_f32s(&mut out, basis.mean_shape().iter().copied());
    put_f32s(&mut out, basis.mean_texture().iter().copied());
    for b in [basis.basis_id(), basis.basis_exp(), basis.basis_tex()] {
        put_f32s(
            &mut out,
            (0..b.cols()).flat_map(|c| (0..b.rows()).map(move |r| b.at(r, c))),
        );
    }
    for t in basis.triangles() {
        for &i in t {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    out
}

pub fn decode_basis(bytes: &[u8]) -> Result<FaceBasis> {
    let mut cur = Cursor::new("FB3D", bytes);
    cur.magic(FB3D_MAGIC)?;
    let version = cur.u16("version")?;
    if version != FB3D_VERSION {
        return Err(cur.error(4, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for (d, what) in dims
        .iter_mut()
        .zip(["vertex count", "k_id", "k_exp", "k_tex", "triangle count"])
    {
        *d = cur.u32(what)? as usize;
    }
    let [n, k_id, k_exp, k_tex, n_tri] = dims;
    let rows = 3 * n;
    let expected = HEADER_LEN + 4 * (2 * rows + rows * (k_id + k_exp + k_tex)) + 12 * n_tri;
    if bytes.len() != expected {
        return Err(cur.error(
            bytes.len().min(expected),
            format!(
                "expected {expected} bytes for N={n}, k=({k_id},{k_exp},{k_tex}), {n_tri} triangles; file has {}",
                bytes.len()
            ),
        ));
    }
    let mean_shape = cur.f32s(rows, "mean shape")?;
    let mean_texture = cur.f32s(rows, "mean texture")?;
    let mut column_major = |k: usize, what: &str| -> Result<Tensor> {
        let cm = cur.f32s(rows * k, what)?;
        Ok(Tensor::from_fn(&[rows, k], |i| cm[(i % k) * rows + i / k]))
    };
    let basis_id = column_major(k_id, "identity basis")?;
    let basis_exp = column_major(k_exp, "expression basis")?;
    let basis_tex = column_major(k_tex, "texture basis")?;
    let mut triangles = Vec::with_capacity(n_tri);
    for _ in 0..n_tri {
        triangles.push([cur.u32("triangle")?, cur.u32("triangle")?, cur.u32("triangle")?]);
    }
    FaceBasis::new(mean_shape, mean_texture, basis_id, basis_exp, basis_tex, triangles)
}

pub fn read_basis(path: &Path) -> Result<FaceBasis> {
    decode_basis(&read_bytes(path)?)
}

pub fn write_basis(path: &Path, basis: &FaceBasis) -> Result<()> {
    write_bytes(path, &encode_basis(basis))
}
