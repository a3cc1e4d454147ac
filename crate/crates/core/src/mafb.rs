//! Morphology augmented face blending: expression swapping, binary mask
//! morphology, random mask augmentation and pixel-wise compositing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::face3dmm::CoeffSet;
use crate::image::{BinaryMask, RasterImage};

/// Default dilation/erosion sizes for augmentation.
pub const AUGMENT_SIZES: [usize; 3] = [3, 5, 7];
/// Default closing size.
pub const CLOSE_SIZE: usize = 9;

/// All-ones square kernel with an odd side, anchored at its centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    side: usize,
}

impl StructuringElement {
    pub fn square(side: usize) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel side must be odd, got {side}")));
        }
        Ok(Self { side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    fn radius(&self) -> usize {
        self.side / 2
    }
}

/// Copy of `target` with its expression replaced.
pub fn combine_params(target: &CoeffSet, predicted_beta: &[f64]) -> Result<CoeffSet> {
    if predicted_beta.len() != target.beta.len() {
        return Err(Error::Dimension {
            param: "predicted_beta",
            expected: target.beta.len(),
            actual: predicted_beta.len(),
        });
    }
    Ok(CoeffSet {
        beta: predicted_beta.to_vec(),
        ..target.clone()
    })
}

/// Separable square-window reduction; pixels outside the image count as
/// unset. `any` selects dilation (true) or erosion (false).
fn square_filter(mask: &BinaryMask, r: usize, any: bool) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let reduce = |get: &dyn Fn(isize) -> bool, centre: usize, len: usize| {
        let lo = centre as isize - r as isize;
        let hi = centre as isize + r as isize;
        if any {
            (lo..=hi).any(|i| i >= 0 && (i as usize) < len && get(i))
        } else {
            (lo..=hi).all(|i| i >= 0 && (i as usize) < len && get(i))
        }
    };
    let rows = BinaryMask::from_fn(w, h, |x, y| reduce(&|i| mask.get(i as usize, y), x, w));
    BinaryMask::from_fn(w, h, |x, y| reduce(&|i| rows.get(x, i as usize), y, h))
}

pub fn morph_dilate(mask: &BinaryMask, kernel: StructuringElement) -> BinaryMask {
    square_filter(mask, kernel.radius(), true)
}

pub fn morph_erode(mask: &BinaryMask, kernel: StructuringElement) -> BinaryMask {
    square_filter(mask, kernel.radius(), false)
}

/// Dilation followed by erosion.
pub fn morph_close(mask: &BinaryMask, kernel: StructuringElement) -> BinaryMask {
    morph_erode(&morph_dilate(mask, kernel), kernel)
}

/// Which random operation [`augment_mask`] applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    Dilate(usize),
    Erode(usize),
}

/// Closes `mask`, then either dilates or erodes it with a size drawn
/// uniformly from `kernel_sizes`.
pub fn augment_mask(
    mask: &BinaryMask,
    rng: &mut impl Rng,
    kernel_sizes: &[usize],
    close_size: usize,
) -> Result<(BinaryMask, Augmentation)> {
    if kernel_sizes.is_empty() {
        return Err(Error::Empty("augmentation kernel sizes"));
    }
    let closed = morph_close(mask, StructuringElement::square(close_size)?);
    let dilate = rng.gen_bool(0.5);
    let side = kernel_sizes[rng.gen_range(0..kernel_sizes.len())];
    let k = StructuringElement::square(side)?;
    Ok(if dilate {
        (morph_dilate(&closed, k), Augmentation::Dilate(side))
    } else {
        (morph_erode(&closed, k), Augmentation::Erode(side))
    })
}

/// `I_r·M + I_t·(1 − M)` per channel; each output pixel is copied from one
/// of the two inputs.
pub fn blend(rendered: &RasterImage, target: &RasterImage, mask: &BinaryMask) -> Result<RasterImage> {
    if !rendered.same_size(target) || mask.width() != target.width() || mask.height() != target.height() {
        return Err(Error::shape(
            "blend",
            format!(
                "rendered {}x{}, target {}x{}, mask {}x{}",
                rendered.width(),
                rendered.height(),
                target.width(),
                target.height(),
                mask.width(),
                mask.height()
            ),
        ));
    }
    Ok(RasterImage::from_fn(target.width(), target.height(), |x, y| {
        if mask.get(x, y) {
            rendered.pixel(x, y)
        } else {
            target.pixel(x, y)
        }
    }))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn k(side: usize) -> StructuringElement {
        StructuringElement::square(side).unwrap()
    }

    /// Direct neighbourhood scan.
    fn scan(mask: &BinaryMask, side: usize, any: bool) -> BinaryMask {
        let r = (side / 2) as isize;
        BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
            let mut hits = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (px, py) = (x as isize + dx, y as isize + dy);
                    let inside = px >= 0 && py >= 0 && (px as usize) < mask.width() && (py as usize) < mask.height();
                    hits.push(inside && mask.get(px as usize, py as usize));
                }
            }
            if any {
                hits.iter().any(|&h| h)
            } else {
                hits.iter().all(|&h| h)
            }
        })
    }

    fn random_mask(rng: &mut ChaCha8Rng, size: usize, p: f64) -> BinaryMask {
        BinaryMask::from_fn(size, size, |_, _| rng.gen_bool(p))
    }

    #[test]
    fn even_kernels_are_rejected() {
        assert!(StructuringElement::square(4).is_err());
        assert!(StructuringElement::square(0).is_err());
    }

    #[test]
    fn dilating_a_point_gives_a_block() {
        let mut m = BinaryMask::new(7, 7);
        m.set(3, 3, true);
        let d = morph_dilate(&m, k(3));
        assert_eq!(
            d,
            BinaryMask::from_fn(7, 7, |x, y| (2..=4).contains(&x) && (2..=4).contains(&y))
        );
    }

    #[test]
    fn eroding_full_image_keeps_interior() {
        let m = BinaryMask::from_fn(5, 5, |_, _| true);
        let e = morph_erode(&m, k(3));
        assert_eq!(e, scan(&m, 3, false));
        assert_eq!(
            e,
            BinaryMask::from_fn(5, 5, |x, y| (1..=3).contains(&x) && (1..=3).contains(&y))
        );
    }

    #[test]
    fn separable_filters_match_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for side in [3, 5, 7, 9] {
            let m = random_mask(&mut rng, 13, 0.4);
            assert_eq!(morph_dilate(&m, k(side)), scan(&m, side, true));
            assert_eq!(morph_erode(&m, k(side)), scan(&m, side, false));
        }
    }

    #[test]
    fn closing_fills_a_hole_in_a_disk() {
        let disk = BinaryMask::from_fn(21, 21, |x, y| {
            let (dx, dy) = (x as f64 - 10.0, y as f64 - 10.0);
            dx * dx + dy * dy <= 36.0
        });
        let mut holed = disk.clone();
        holed.set(10, 10, false);
        let closed = morph_close(&holed, k(3));
        assert_eq!(closed, scan(&scan(&holed, 3, true), 3, false));
        assert_eq!(closed, disk);
    }

    #[test]
    fn augmentation_is_seeded_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mask(&mut rng, 24, 0.6);
        let closed = morph_close(&m, k(CLOSE_SIZE));
        let (a, op) = augment_mask(&m, &mut ChaCha8Rng::seed_from_u64(9), &AUGMENT_SIZES, CLOSE_SIZE).unwrap();
        let (b, _) = augment_mask(&m, &mut ChaCha8Rng::seed_from_u64(9), &AUGMENT_SIZES, CLOSE_SIZE).unwrap();
        assert_eq!(a, b);
        for seed in 0..40 {
            let (out, op) = augment_mask(&m, &mut ChaCha8Rng::seed_from_u64(seed), &AUGMENT_SIZES, CLOSE_SIZE).unwrap();
            match op {
                Augmentation::Dilate(_) => assert!(closed.is_subset_of(&out)),
                Augmentation::Erode(_) => assert!(out.is_subset_of(&closed)),
            }
        }
        assert!(matches!(op, Augmentation::Dilate(_) | Augmentation::Erode(_)));
    }

    #[test]
    fn dilation_is_chosen_half_the_time() {
        let m = BinaryMask::from_fn(8, 8, |x, y| x > 2 && y > 2);
        let dilations = (0..1000)
            .filter(|&seed| {
                let (_, op) =
                    augment_mask(&m, &mut ChaCha8Rng::seed_from_u64(seed), &AUGMENT_SIZES, CLOSE_SIZE).unwrap();
                matches!(op, Augmentation::Dilate(_))
            })
            .count();
        assert!((450..=550).contains(&dilations), "{dilations}");
    }

    #[test]
    fn combine_swaps_only_beta() {
        let target = CoeffSet {
            alpha: vec![0.1, -0.2],
            beta: vec![1.0, 2.0, 3.0],
            delta: vec![0.3],
            rotation: [0.1, 0.2, 0.3],
            translation: [0.0, 0.1, 0.5],
        };
        assert_eq!(combine_params(&target, &target.beta).unwrap(), target);
        let out = combine_params(&target, &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(out.beta, vec![4.0, 5.0, 6.0]);
        assert_eq!(
            (out.alpha.clone(), out.delta.clone(), out.rotation, out.translation),
            (
                target.alpha.clone(),
                target.delta.clone(),
                target.rotation,
                target.translation
            )
        );
        assert!(combine_params(&target, &[1.0]).is_err());
    }

    #[test]
    fn blend_selects_per_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = RasterImage::from_fn(6, 5, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let t = RasterImage::from_fn(6, 5, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        assert_eq!(blend(&r, &t, &BinaryMask::from_fn(6, 5, |_, _| true)).unwrap(), r);
        assert_eq!(blend(&r, &t, &BinaryMask::new(6, 5)).unwrap(), t);
        let checker = BinaryMask::from_fn(6, 5, |x, y| (x + y) % 2 == 0);
        let b = blend(&r, &t, &checker).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let m = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
                let want = [0, 1, 2].map(|c| r.pixel(x, y)[c] * m + t.pixel(x, y)[c] * (1.0 - m));
                assert_eq!(b.pixel(x, y), want);
            }
        }
        assert!(blend(&r, &RasterImage::new(5, 5), &checker).is_err());
    }
}
