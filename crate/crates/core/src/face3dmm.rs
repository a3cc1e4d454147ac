//! Affine 3D morphable face model: shape/texture evaluation, rigid pose,
//! template faces, mouth-region vertex masks and the mouth-weighted vertex
//! loss that supervises expression prediction.
//!
//! Coordinates follow the model's own frame: x to the right, y up, z out of
//! the face, origin at the nose. Vertex arrays are `[N, 3]` tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Mean shape/texture and linear bases of an `N`-vertex face.
///
/// Bases are stored row-major as `[3N, k]`, so row `3i + c` holds
/// coordinate `c` of vertex `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceBasis {
    n_vertices: usize,
    mean_shape: Vec<f64>,
    mean_texture: Vec<f64>,
    basis_id: Tensor,
    basis_exp: Tensor,
    basis_tex: Tensor,
    triangles: Vec<[u32; 3]>,
}

impl FaceBasis {
    pub fn new(
        mean_shape: Vec<f64>,
        mean_texture: Vec<f64>,
        basis_id: Tensor,
        basis_exp: Tensor,
        basis_tex: Tensor,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self> {
        if mean_shape.is_empty() || mean_shape.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "mean shape length {} is not a positive multiple of 3",
                mean_shape.len()
            )));
        }
        let rows = mean_shape.len();
        let n = rows / 3;
        if mean_texture.len() != rows {
            return Err(Error::Dimension {
                param: "mean_texture",
                expected: rows,
                actual: mean_texture.len(),
            });
        }
        for (name, b) in [
            ("basis_id", &basis_id),
            ("basis_exp", &basis_exp),
            ("basis_tex", &basis_tex),
        ] {
            if b.rank() != 2 || b.rows() != rows {
                return Err(Error::InvalidArgument(format!(
                    "{name} has shape {:?}, expected [{rows}, k]",
                    b.shape()
                )));
            }
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::InvalidArgument(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        Ok(Self {
            n_vertices: n,
            mean_shape,
            mean_texture,
            basis_id,
            basis_exp,
            basis_tex,
            triangles,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn k_id(&self) -> usize {
        self.basis_id.cols()
    }

    pub fn k_exp(&self) -> usize {
        self.basis_exp.cols()
    }

    pub fn k_tex(&self) -> usize {
        self.basis_tex.cols()
    }

    pub fn mean_shape(&self) -> &[f64] {
        &self.mean_shape
    }

    pub fn mean_texture(&self) -> &[f64] {
        &self.mean_texture
    }

    pub fn basis_id(&self) -> &Tensor {
        &self.basis_id
    }

    pub fn basis_exp(&self) -> &Tensor {
        &self.basis_exp
    }

    pub fn basis_tex(&self) -> &Tensor {
        &self.basis_tex
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// `S̄ + B_id·α + B_exp·β`, reshaped to `[N, 3]`.
    pub fn evaluate_shape(&self, alpha: &[f64], beta: &[f64]) -> Result<Tensor> {
        check_len("alpha", self.k_id(), alpha.len())?;
        check_len("beta", self.k_exp(), beta.len())?;
        let mut out = self.mean_shape.clone();
        affine_add(&mut out, &self.basis_id, alpha);
        affine_add(&mut out, &self.basis_exp, beta);
        Tensor::new(vec![self.n_vertices, 3], out)
    }

    /// `T̄ + B_tex·δ`, reshaped to `[N, 3]`. Not clamped.
    pub fn evaluate_texture(&self, delta: &[f64]) -> Result<Tensor> {
        check_len("delta", self.k_tex(), delta.len())?;
        let mut out = self.mean_texture.clone();
        affine_add(&mut out, &self.basis_tex, delta);
        Tensor::new(vec![self.n_vertices, 3], out)
    }

    /// Speaker template `S̄ + B_id·ᾱ` (the expression-neutral face).
    pub fn template_face(&self, mean_alpha: &[f64]) -> Result<Tensor> {
        self.evaluate_shape(mean_alpha, &vec![0.0; self.k_exp()])
    }

    /// Vertices whose mean-face y coordinate lies strictly below
    /// `y_threshold`, in the basis's own length unit.
    pub fn lower_mouth_indices(&self, y_threshold: f64) -> MouthMask {
        let vector: Vec<bool> = self.mean_shape.chunks_exact(3).map(|v| v[1] < y_threshold).collect();
        let indices = vector.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
        MouthMask {
            indices,
            vector,
            y_threshold,
        }
    }
}

fn check_len(param: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            param,
            expected,
            actual,
        });
    }
    Ok(())
}

/// `out += B·x` for a row-major `[rows, k]` basis.
fn affine_add(out: &mut [f64], basis: &Tensor, x: &[f64]) {
    let k = basis.cols();
    if k == 0 {
        return;
    }
    for (o, row) in out.iter_mut().zip(basis.data().chunks_exact(k)) {
        *o += row.iter().zip(x).map(|(b, c)| b * c).sum::<f64>();
    }
}

/// Per-frame 3DMM parameters: identity, expression, texture and rigid pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffSet {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    /// Euler angles (x, y, z) in radians, composed as `Rz·Ry·Rx`.
    pub rotation: [f64; 3],
    /// Metres.
    pub translation: [f64; 3],
}

impl CoeffSet {
    pub fn zeros(basis: &FaceBasis) -> Self {
        Self {
            alpha: vec![0.0; basis.k_id()],
            beta: vec![0.0; basis.k_exp()],
            delta: vec![0.0; basis.k_tex()],
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    /// Checks vector lengths against `basis`.
    pub fn validate(&self, basis: &FaceBasis) -> Result<()> {
        check_len("alpha", basis.k_id(), self.alpha.len())?;
        check_len("beta", basis.k_exp(), self.beta.len())?;
        check_len("delta", basis.k_tex(), self.delta.len())
    }
}

/// Rotation matrix `Rz(c)·Ry(b)·Rx(a)` for Euler angles `(a, b, c)`.
pub fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    mat3_mul(&rz, &mat3_mul(&ry, &rx))
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `R·v + t` for every vertex of an `[N, 3]` array.
pub fn apply_pose(vertices: &Tensor, rotation: [f64; 3], translation: [f64; 3]) -> Result<Tensor> {
    if vertices.rank() != 2 || vertices.cols() != 3 {
        return Err(Error::shape(
            "apply_pose",
            format!("expected [N, 3], got {:?}", vertices.shape()),
        ));
    }
    let r = rotation_matrix(rotation);
    let data = vertices
        .data()
        .chunks_exact(3)
        .flat_map(|v| (0..3).map(move |i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2] + translation[i]))
        .collect();
    Tensor::new(vertices.shape().to_vec(), data)
}

/// Arithmetic mean of the identity coefficients over a sequence.
pub fn mean_identity(seq: &[CoeffSet]) -> Result<Vec<f64>> {
    let first = seq.first().ok_or(Error::Empty("coefficient sequence"))?;
    let k = first.alpha.len();
    let mut acc = vec![0.0; k];
    for c in seq {
        check_len("alpha", k, c.alpha.len())?;
        for (a, v) in acc.iter_mut().zip(&c.alpha) {
            *a += v;
        }
    }
    let n = seq.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// The mouth-region vertex set `𝓘` and its indicator vector `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct MouthMask {
    pub indices: Vec<usize>,
    pub vector: Vec<bool>,
    pub y_threshold: f64,
}

impl MouthMask {
    /// Per-coordinate loss weights over a flattened `[N·3]` vertex
    /// difference: each of the two region means is normalised by its own
    /// entry count, and the mouth mean is scaled by `lambda_m`. A region
    /// with no vertices contributes nothing.
    pub fn coordinate_weights(&self, lambda_m: f64) -> Vec<f64> {
        let n_mouth = self.indices.len();
        let n_rest = self.vector.len() - n_mouth;
        let w_mouth = if n_mouth > 0 {
            lambda_m / (3 * n_mouth) as f64
        } else {
            0.0
        };
        let w_rest = if n_rest > 0 { 1.0 / (3 * n_rest) as f64 } else { 0.0 };
        self.vector
            .iter()
            .flat_map(|&m| [if m { w_mouth } else { w_rest }; 3])
            .collect()
    }
}

fn check_loss_inputs(pred: &Tensor, gt: &Tensor, basis: &FaceBasis, mouth: &MouthMask, lambda_m: f64) -> Result<()> {
    if pred.rank() != 2 || pred.shape() != gt.shape() {
        return Err(Error::shape(
            "vertex_prediction_loss",
            format!("predicted {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    check_len("beta", basis.k_exp(), pred.cols())?;
    check_len("mouth mask", basis.n_vertices(), mouth.vector.len())?;
    if pred.rows() == 0 {
        return Err(Error::Empty("expression sequence"));
    }
    if !(lambda_m >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mouth weight must be >= 1, got {lambda_m}"
        )));
    }
    Ok(())
}

/// Mouth-weighted mean-squared vertex error between predicted and
/// pseudo-ground-truth faces, averaged over frames.
///
/// Both faces are built on `template` (`S_temp + B_exp·β`); the mouth and
/// non-mouth terms are each the mean of squared coordinate differences
/// over their own vertices.
pub fn vertex_prediction_loss(
    pred_betas: &Tensor,
    gt_betas: &Tensor,
    basis: &FaceBasis,
    template: &Tensor,
    mouth: &MouthMask,
    lambda_m: f64,
) -> Result<f64> {
    check_loss_inputs(pred_betas, gt_betas, basis, mouth, lambda_m)?;
    if template.len() != 3 * basis.n_vertices() {
        return Err(Error::Dimension {
            param: "template",
            expected: 3 * basis.n_vertices(),
            actual: template.len(),
        });
    }
    let weights = mouth.coordinate_weights(lambda_m);
    let frames = pred_betas.rows();
    let mut total = 0.0;
    for t in 0..frames {
        let mut s_pred = template.data().to_vec();
        let mut s_gt = template.data().to_vec();
        affine_add(&mut s_pred, &basis.basis_exp, pred_betas.row(t));
        affine_add(&mut s_gt, &basis.basis_exp, gt_betas.row(t));
        total += s_pred
            .iter()
            .zip(&s_gt)
            .zip(&weights)
            .map(|((p, g), w)| w * (p - g) * (p - g))
            .sum::<f64>();
    }
    Ok(total / frames as f64)
}

/// Constants for evaluating [`vertex_prediction_loss`] on a tape. The
/// template cancels in `S_pred − S_gt`, so only `B_exp` and the weights are
/// needed.
#[derive(Clone, Debug)]
pub struct VertexLoss {
    basis_exp_t: Tensor,
    weights: Tensor,
    lambda_m: f64,
}

impl VertexLoss {
    pub fn new(basis: &FaceBasis, mouth: &MouthMask, lambda_m: f64) -> Result<Self> {
        check_len("mouth mask", basis.n_vertices(), mouth.vector.len())?;
        if !(lambda_m >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mouth weight must be >= 1, got {lambda_m}"
            )));
        }
        let weights = mouth.coordinate_weights(lambda_m);
        Ok(Self {
            basis_exp_t: basis.basis_exp.transpose()?,
            weights: Tensor::new(vec![weights.len()], weights)?,
            lambda_m,
        })
    }

    pub fn lambda_m(&self) -> f64 {
        self.lambda_m
    }

    /// Records the loss of `pred` (a `[T, k_exp]` value) against `gt`.
    pub fn on_tape(&self, tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
        let p = tape.value(pred);
        if p.shape() != gt.shape() || p.rank() != 2 || p.cols() != self.basis_exp_t.rows() {
            return Err(Error::shape(
                "vertex_loss",
                format!("predicted {:?} vs ground truth {:?}", p.shape(), gt.shape()),
            ));
        }
        let frames = p.rows();
        let gt = tape.leaf(gt.clone());
        let diff = tape.sub(pred, gt)?;
        let basis = tape.leaf(self.basis_exp_t.clone());
        let dv = tape.matmul(diff, basis)?;
        let sq = tape.square(dv);
        let w = tape.leaf(self.weights.clone());
        let weighted = tape.mul_row(sq, w)?;
        let total = tape.sum(weighted);
        Ok(tape.scale(total, 1.0 / frames as f64))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn random_basis(n: usize, k_id: usize, k_exp: usize, k_tex: usize, seed: u64) -> FaceBasis {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let ms = r(&[3 * n]).into_data();
        let mt = r(&[3 * n]).into_data();
        let (bi, be, bt) = (r(&[3 * n, k_id]), r(&[3 * n, k_exp]), r(&[3 * n, k_tex]));
        FaceBasis::new(ms, mt, bi, be, bt, vec![[0, 1, 2]]).unwrap()
    }

    fn random_vec(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Column-by-column accumulation, independent of the row-dot path.
    fn shape_oracle(b: &FaceBasis, alpha: &[f64], beta: &[f64]) -> Vec<[f64; 3]> {
        let n = b.n_vertices();
        let mut out = vec![[0.0; 3]; n];
        for v in 0..n {
            for c in 0..3 {
                out[v][c] = b.mean_shape()[3 * v + c];
            }
        }
        for (j, a) in alpha.iter().enumerate() {
            for v in 0..n {
                for c in 0..3 {
                    out[v][c] += b.basis_id().at(3 * v + c, j) * a;
                }
            }
        }
        for (j, e) in beta.iter().enumerate() {
            for v in 0..n {
                for c in 0..3 {
                    out[v][c] += b.basis_exp().at(3 * v + c, j) * e;
                }
            }
        }
        out
    }

    #[test]
    fn zero_coefficients_give_mean_shape() {
        let b = random_basis(6, 3, 4, 2, 1);
        let s = b.evaluate_shape(&[0.0; 3], &[0.0; 4]).unwrap();
        assert_eq!(s.shape(), &[6, 3]);
        assert_eq!(s.data(), b.mean_shape());
        assert_eq!(b.evaluate_texture(&[0.0; 2]).unwrap().data(), b.mean_texture());
    }

    #[test]
    fn single_identity_column() {
        let n = 3;
        let mut bi = Tensor::zeros(&[3 * n, 2]);
        bi.data_mut()[0] = 1.0; // row 0 (vertex 0, x), column 0
        let b = FaceBasis::new(
            vec![0.0; 3 * n],
            vec![0.0; 3 * n],
            bi,
            Tensor::zeros(&[3 * n, 1]),
            Tensor::zeros(&[3 * n, 1]),
            vec![],
        )
        .unwrap();
        let s = b.evaluate_shape(&[2.0, 0.0], &[0.0]).unwrap();
        assert_eq!(s.data()[0], 2.0);
        assert!(s.data()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_matches_summation_oracle() {
        let b = random_basis(5, 3, 3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (alpha, beta) = (random_vec(3, &mut rng), random_vec(3, &mut rng));
        let s = b.evaluate_shape(&alpha, &beta).unwrap();
        for (v, o) in shape_oracle(&b, &alpha, &beta).iter().enumerate() {
            for c in 0..3 {
                assert!((s.at(v, c) - o[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn texture_is_linear_in_delta() {
        let b = random_basis(5, 2, 2, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_vec(4, &mut rng);
        let d2: Vec<f64> = d.iter().map(|x| 2.0 * x).collect();
        let t1 = b.evaluate_texture(&d).unwrap();
        let t2 = b.evaluate_texture(&d2).unwrap();
        for i in 0..t1.len() {
            let m = b.mean_texture()[i];
            assert!(((t2.data()[i] - m) - 2.0 * (t1.data()[i] - m)).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_errors_name_the_parameter() {
        let b = random_basis(4, 2, 3, 2, 6);
        let e = b.evaluate_shape(&[0.0; 3], &[0.0; 3]).unwrap_err().to_string();
        assert!(e.contains("alpha"), "{e}");
        let e = b.evaluate_shape(&[0.0; 2], &[0.0; 2]).unwrap_err().to_string();
        assert!(e.contains("beta"), "{e}");
        let e = b.evaluate_texture(&[0.0; 5]).unwrap_err().to_string();
        assert!(e.contains("delta"), "{e}");
    }

    #[test]
    fn invalid_triangles_are_rejected() {
        let z = |k| Tensor::zeros(&[6, k]);
        assert!(FaceBasis::new(vec![0.0; 6], vec![0.0; 6], z(1), z(1), z(1), vec![[0, 1, 2]]).is_err());
    }

    #[test]
    fn pose_identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(apply_pose(&v, [0.0; 3], [0.0; 3]).unwrap(), v);
        let moved = apply_pose(&v, [0.0; 3], [0.0, 0.0, 1.0]).unwrap();
        for i in 0..4 {
            assert_eq!(moved.at(i, 2), v.at(i, 2) + 1.0);
            assert_eq!(moved.at(i, 0), v.at(i, 0));
        }
    }

    #[test]
    fn rotation_is_orthonormal_with_unit_determinant() {
        let r = rotation_matrix([0.3, -1.1, 2.0]);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Tensor::from_fn(&[10, 3], |_| rng.gen_range(-1.0..1.0));
        let angles = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        ];
        let r = apply_pose(&v, angles, [0.0; 3]).unwrap();
        let dist =
            |t: &Tensor, a: usize, b: usize| (0..3).map(|c| (t.at(a, c) - t.at(b, c)).powi(2)).sum::<f64>().sqrt();
        for a in 0..10 {
            for b in 0..10 {
                assert!((dist(&v, a, b) - dist(&r, a, b)).abs() < 1e-9);
            }
        }
    }

    fn coeffs_with_alpha(alpha: Vec<f64>) -> CoeffSet {
        CoeffSet {
            alpha,
            beta: vec![],
            delta: vec![],
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    #[test]
    fn mean_identity_cases() {
        assert!(mean_identity(&[]).is_err());
        let c = vec![coeffs_with_alpha(vec![0.5, -1.0]); 4];
        assert_eq!(mean_identity(&c).unwrap(), vec![0.5, -1.0]);
        let two = [coeffs_with_alpha(vec![0.0]), coeffs_with_alpha(vec![2.0])];
        assert_eq!(mean_identity(&two).unwrap(), vec![1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq: Vec<_> = (0..17).map(|_| coeffs_with_alpha(random_vec(3, &mut rng))).collect();
        let got = mean_identity(&seq).unwrap();
        for j in 0..3 {
            let mut s = 0.0;
            for c in &seq {
                s += c.alpha[j];
            }
            assert!((got[j] - s / 17.0).abs() < 1e-12);
        }
    }

    #[test]
    fn template_equals_shape_with_zero_expression() {
        let b = random_basis(5, 3, 2, 2, 10);
        let alpha = [0.2, -0.4, 0.9];
        assert_eq!(
            b.template_face(&alpha).unwrap(),
            b.evaluate_shape(&alpha, &[0.0; 2]).unwrap()
        );
        assert_eq!(b.template_face(&[0.0; 3]).unwrap().data(), b.mean_shape());
    }

    fn basis_with_y(ys: &[f64]) -> FaceBasis {
        let n = ys.len();
        let ms = ys.iter().flat_map(|&y| [0.0, y, 0.0]).collect();
        let z = |k| Tensor::zeros(&[3 * n, k]);
        FaceBasis::new(ms, vec![0.0; 3 * n], z(1), z(1), z(1), vec![]).unwrap()
    }

    #[test]
    fn mouth_threshold_is_strict() {
        let m = basis_with_y(&[0.1, -0.2, -0.15]).lower_mouth_indices(-0.15);
        assert_eq!(m.indices, vec![1]);
        assert_eq!(m.vector, vec![false, true, false]);
        let none = basis_with_y(&[0.1, 0.2]).lower_mouth_indices(-1.0);
        assert!(none.indices.is_empty());
        assert!(none.vector.iter().all(|&v| !v));
    }

    fn nested_loop_loss(
        pred: &Tensor,
        gt: &Tensor,
        b: &FaceBasis,
        template: &Tensor,
        mouth: &MouthMask,
        lambda: f64,
    ) -> f64 {
        let n = b.n_vertices();
        let frames = pred.rows();
        let mut total = 0.0;
        for t in 0..frames {
            let (mut sm, mut cm, mut sr, mut cr) = (0.0, 0usize, 0.0, 0usize);
            for v in 0..n {
                for c in 0..3 {
                    let mut sp = template.at(v, c);
                    let mut sg = template.at(v, c);
                    for j in 0..b.k_exp() {
                        sp += b.basis_exp().at(3 * v + c, j) * pred.at(t, j);
                        sg += b.basis_exp().at(3 * v + c, j) * gt.at(t, j);
                    }
                    let d2 = (sp - sg) * (sp - sg);
                    if mouth.vector[v] {
                        sm += d2;
                        cm += 1;
                    } else {
                        sr += d2;
                        cr += 1;
                    }
                }
            }
            let mouth_term = if cm > 0 { sm / cm as f64 } else { 0.0 };
            let rest_term = if cr > 0 { sr / cr as f64 } else { 0.0 };
            total += lambda * mouth_term + rest_term;
        }
        total / frames as f64
    }

    #[test]
    fn vertex_loss_matches_nested_loops() {
        let b = random_basis(4, 2, 3, 1, 11);
        let mut mouth = b.lower_mouth_indices(f64::NEG_INFINITY);
        mouth.vector = vec![true, false, true, false];
        mouth.indices = vec![0, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pred = Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
        let gt = Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
        let template = b.template_face(&[0.3, -0.1]).unwrap();
        let got = vertex_prediction_loss(&pred, &gt, &b, &template, &mouth, 1.8).unwrap();
        let want = nested_loop_loss(&pred, &gt, &b, &template, &mouth, 1.8);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone());
        let l = VertexLoss::new(&b, &mouth, 1.8)
            .unwrap()
            .on_tape(&mut tape, p, &gt)
            .unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn vertex_loss_edge_cases() {
        let b = random_basis(4, 2, 3, 1, 13);
        let mouth = b.lower_mouth_indices(0.0);
        let template = b.template_face(&[0.0; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pred = Tensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0));
        let gt = Tensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(
            vertex_prediction_loss(&pred, &pred, &b, &template, &mouth, 1.8).unwrap(),
            0.0
        );

        // λ_m = 1 with equal region sizes reduces to the plain MSE.
        let mut half = mouth.clone();
        half.vector = vec![true, true, false, false];
        half.indices = vec![0, 1];
        let l = vertex_prediction_loss(&pred, &gt, &b, &template, &half, 1.0).unwrap();
        let mut plain = 0.0;
        for t in 0..3 {
            let d: Vec<f64> = (0..3).map(|j| pred.at(t, j) - gt.at(t, j)).collect();
            let mut s = 0.0;
            for r in 0..12 {
                let dv: f64 = (0..3).map(|j| b.basis_exp().at(r, j) * d[j]).sum();
                s += dv * dv;
            }
            plain += s / 12.0;
        }
        // Each region mean carries half the entries: λ=1 gives 2× the MSE.
        assert!((l - 2.0 * plain / 3.0).abs() < 1e-12);

        let short = Tensor::zeros(&[2, 3]);
        assert!(vertex_prediction_loss(&short, &gt, &b, &template, &mouth, 1.8).is_err());
        assert!(vertex_prediction_loss(&pred, &gt, &b, &template, &mouth, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn shape_is_affine_in_beta(seed in 0u64..1000) {
            let b = random_basis(5, 2, 3, 1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let alpha = random_vec(2, &mut rng);
            let b1 = random_vec(3, &mut rng);
            let b2 = random_vec(3, &mut rng);
            let sum: Vec<f64> = b1.iter().zip(&b2).map(|(a, c)| a + c).collect();
            let lhs_a = b.evaluate_shape(&alpha, &sum).unwrap();
            let lhs_b = b.evaluate_shape(&alpha, &b2).unwrap();
            let rhs = b.evaluate_shape(&[0.0; 2], &b1).unwrap();
            for i in 0..lhs_a.len() {
                let l = lhs_a.data()[i] - lhs_b.data()[i];
                let r = rhs.data()[i] - b.mean_shape()[i];
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn loss_ignores_frame_order(seed in 0u64..1000, rot in 1usize..4) {
            let b = random_basis(4, 1, 3, 1, seed);
            let mouth = b.lower_mouth_indices(0.0);
            let template = b.template_face(&[0.0]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
            let gt = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
            let permute = |t: &Tensor| {
                let rows: Vec<Vec<f64>> = (0..4).map(|r| t.row((r + rot) % 4).to_vec()).collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let a = vertex_prediction_loss(&pred, &gt, &b, &template, &mouth, 1.8).unwrap();
            let c = vertex_prediction_loss(&permute(&pred), &permute(&gt), &b, &template, &mouth, 1.8).unwrap();
            prop_assert!((a - c).abs() < 1e-12 * a.max(1.0));
        }

        #[test]
        fn mouth_indices_are_monotone(seed in 0u64..1000, lo in -1.0f64..1.0, gap in 0.0f64..1.0) {
            let b = random_basis(20, 1, 1, 1, seed);
            let small = b.lower_mouth_indices(lo);
            let large = b.lower_mouth_indices(lo + gap);
            prop_assert!(small.indices.iter().all(|i| large.indices.contains(i)));
        }
    }

    #[test]
    fn loss_decreases_along_line_toward_ground_truth() {
        let b = random_basis(6, 1, 3, 1, 15);
        let mouth = b.lower_mouth_indices(0.0);
        let template = b.template_face(&[0.0]).unwrap();
        let gt = Tensor::from_fn(&[1, 3], |i| [0.4, -0.2, 0.7][i]);
        for comp in 0..3 {
            let mut prev = f64::INFINITY;
            for step in 0..=10 {
                let mut pred = gt.clone();
                pred.data_mut()[comp] += 1.0 - step as f64 / 10.0;
                let l = vertex_prediction_loss(&pred, &gt, &b, &template, &mouth, 1.8).unwrap();
                if step < 10 {
                    assert!(l < prev);
                } else {
                    assert_eq!(l, 0.0);
                }
                prev = l;
            }
        }
    }
}
