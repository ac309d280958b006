//! Shift augmentation and crops on `H x W x C` images.

use rand::Rng;

/// Translates by `(dx, dy)` pixels (positive `dx` moves content right,
/// positive `dy` moves it down). Vacated pixels are zero.
pub fn shift_image(
    image: &[f32],
    (height, width, channels): (usize, usize, usize),
    dx: isize,
    dy: isize,
) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    for y in 0..height {
        let sy = y as isize - dy;
        if sy < 0 || sy >= height as isize {
            continue;
        }
        for x in 0..width {
            let sx = x as isize - dx;
            if sx < 0 || sx >= width as isize {
                continue;
            }
            let dst = (y * width + x) * channels;
            let src = (sy as usize * width + sx as usize) * channels;
            out[dst..dst + channels].copy_from_slice(&image[src..src + channels]);
        }
    }
    out
}

/// Shifts by an offset drawn uniformly from `[-max_shift, max_shift]^2`.
/// Returns the image and the `(dx, dy)` used.
pub fn shift_augment<R: Rng + ?Sized>(
    image: &[f32],
    dims: (usize, usize, usize),
    max_shift: usize,
    rng: &mut R,
) -> (Vec<f32>, (isize, isize)) {
    let m = max_shift as i64;
    let dx = rng.random_range(-m..=m) as isize;
    let dy = rng.random_range(-m..=m) as isize;
    (shift_image(image, dims, dx, dy), (dx, dy))
}

/// Window of `out_h x out_w` with top-left corner `(top, left)`.
pub fn crop(
    image: &[f32],
    (_, width, channels): (usize, usize, usize),
    (top, left): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for y in top..top + out_h {
        let start = (y * width + left) * channels;
        out.extend_from_slice(&image[start..start + out_w * channels]);
    }
    out
}

/// Crop at a position drawn uniformly from all valid positions.
pub fn random_crop<R: Rng + ?Sized>(
    image: &[f32],
    dims: (usize, usize, usize),
    size: (usize, usize),
    rng: &mut R,
) -> Vec<f32> {
    let top = rng.random_range(0..=dims.0 - size.0);
    let left = rng.random_range(0..=dims.1 - size.1);
    crop(image, dims, (top, left), size)
}

pub fn center_crop(image: &[f32], dims: (usize, usize, usize), size: (usize, usize)) -> Vec<f32> {
    crop(image, dims, ((dims.0 - size.0) / 2, (dims.1 - size.1) / 2), size)
}
