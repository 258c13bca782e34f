use htlane::pnm::Raster;
use htlane::{IntMask, Tensor};

const PALETTE: [[u8; 3]; 4] = [[230, 60, 60], [60, 200, 80], [70, 130, 240], [240, 200, 40]];

/// Paints every predicted-present lane over the grayscale input. Returns the
/// image and the number of lanes that received at least one pixel.
pub fn overlay(gray: &Raster, mask: &IntMask, exist: &[bool]) -> (Raster, usize) {
    let mut rgb = Vec::with_capacity(gray.data.len() * 3);
    let mut painted = vec![false; exist.len()];
    for (&v, &label) in gray.data.iter().zip(mask.data()) {
        let lane = label as usize;
        if lane > 0 && exist.get(lane - 1).copied().unwrap_or(false) {
            painted[lane - 1] = true;
            rgb.extend_from_slice(&PALETTE[(lane - 1) % PALETTE.len()]);
        } else {
            rgb.extend_from_slice(&[v, v, v]);
        }
    }
    let drawn = painted.iter().filter(|&&p| p).count();
    (Raster::rgb(gray.width, gray.height, rgb), drawn)
}

fn to_raster(map: &Tensor<f32>, scale: impl Fn(f32) -> f32) -> Raster {
    let [rows, cols] = [map.dims()[0], map.dims()[1]];
    let data = map
        .data()
        .iter()
        .map(|&v| (scale(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Raster::gray(cols, rows, data)
}

/// Min-max normalized `[n_theta, n_rho]` map, one row per angle.
pub fn hough_image(map: &Tensor<f32>) -> Raster {
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    to_raster(map, |v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

/// Accumulator scaled so its peak is white; an empty accumulator stays black.
pub fn peak_normalized(map: &Tensor<f32>) -> Raster {
    let hi = map.data().iter().copied().fold(0.0f32, f32::max);
    to_raster(map, |v| if hi > 0.0 { v / hi } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_paints_only_present_lanes() {
        let gray = Raster::gray(4, 1, vec![10, 20, 30, 40]);
        let mask = IntMask::new(1, 4, vec![0, 1, 2, 2]).unwrap();
        let (rgb, drawn) = overlay(&gray, &mask, &[true, false, false, false]);
        assert_eq!(drawn, 1);
        assert_eq!(&rgb.data[..3], &[10, 10, 10]);
        assert_eq!(&rgb.data[3..6], &PALETTE[0]);
        assert_eq!(&rgb.data[6..9], &[30, 30, 30]);
    }

    #[test]
    fn normalizations() {
        let t = Tensor::new(&[1, 3], vec![2.0f32, 4.0, 6.0]).unwrap();
        assert_eq!(hough_image(&t).data, vec![0, 128, 255]);
        assert_eq!(peak_normalized(&t).data, vec![85, 170, 255]);
        let z = Tensor::<f32>::zeros(&[2, 2]);
        assert_eq!(hough_image(&z).data, vec![0; 4]);
        assert_eq!(peak_normalized(&z).data, vec![0; 4]);
    }
}
