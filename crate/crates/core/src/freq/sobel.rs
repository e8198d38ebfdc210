use super::dct::Plane;
use crate::error::{Error, Result};
use crate::image::Image;

/// Luminance plane: Rec.601 weights for RGB, the channel itself for gray.
pub fn luminance(image: &Image) -> Result<Plane> {
    let data = match image.channels {
        1 => image.channel(0),
        3 => image
            .data
            .chunks(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect(),
        c => return Err(Error::Invalid(format!("luminance needs 1 or 3 channels, got {c}"))),
    };
    Plane::new(image.height, image.width, data)
}

/// Sobel-x and Sobel-y responses with replicate border padding.
pub fn sobel(plane: &Plane) -> (Plane, Plane) {
    let (h, w) = (plane.height, plane.width);
    let px = |y: isize, x: isize| plane.at(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            gy[i] = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
        }
    }
    (Plane { height: h, width: w, data: gx }, Plane { height: h, width: w, data: gy })
}

/// Mean Sobel gradient magnitude of the luminance, divided by `norm` and
/// clamped to `[0, 1]`.
pub fn sobel_gradient_mean(image: &Image, norm: f64) -> Result<f64> {
    image.check_unit_range()?;
    if norm <= 0.0 {
        return Err(Error::Config(format!("gradient normalization {norm} must be positive")));
    }
    let (gx, gy) = sobel(&luminance(image)?);
    let mean = gx.data.iter().zip(&gy.data).map(|(a, b)| (a * a + b * b).sqrt()).sum::<f64>() / gx.data.len() as f64;
    Ok((mean / norm).clamp(0.0, 1.0))
}
