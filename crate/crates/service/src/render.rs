//! 8-bit grayscale PNG slices with window/level mapping.

use anyhow::{ensure, Context};

use vbiopsy_core::imaging::Grid3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub level: f64,
    pub width: f64,
}

impl Window {
    pub fn new(level: f64, width: f64) -> anyhow::Result<Self> {
        ensure!(level.is_finite() && width.is_finite() && width > 0.0, "window width must be > 0 (got level {level}, width {width})");
        Ok(Self { level, width })
    }

    /// Spans the data range; a constant grid gets a unit width.
    pub fn full_range(values: &[f64]) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Self { level: 0.0, width: 1.0 };
        }
        let width = if hi > lo { hi - lo } else { 1.0 };
        Self { level: 0.5 * (lo + hi), width }
    }

    /// Linear ramp from `level - width/2` (black) to `level + width/2` (white).
    pub fn map(&self, v: f64) -> u8 {
        let t = (v - (self.level - 0.5 * self.width)) / self.width;
        (t.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

fn encode(width: usize, height: usize, pixels: &[u8]) -> anyhow::Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().context("png header")?;
        w.write_image_data(pixels).context("png data")?;
    }
    Ok(out)
}

fn check_slice<T: Copy>(grid: &Grid3<T>, z: usize) -> anyhow::Result<[usize; 3]> {
    let d = grid.dims();
    ensure!(z < d[2], "slice {z} outside 0..{}", d[2]);
    Ok(d)
}

/// Axial slice `z` with rows along y and columns along x.
pub fn slice_png(grid: &Grid3<f64>, z: usize, window: Window) -> anyhow::Result<Vec<u8>> {
    let [nx, ny, _] = check_slice(grid, z)?;
    let mut px = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            px.push(window.map(grid.get(x, y, z)));
        }
    }
    encode(nx, ny, &px)
}

/// Label slice with labels spread evenly over 0..=255.
pub fn mask_png(grid: &Grid3<u8>, z: usize, max_label: u8) -> anyhow::Result<Vec<u8>> {
    let [nx, ny, _] = check_slice(grid, z)?;
    let scale = 255 / max_label.max(1);
    let mut px = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            px.push(grid.get(x, y, z).min(max_label) * scale);
        }
    }
    encode(nx, ny, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut r = dec.read_info().unwrap();
        let mut buf = vec![0; r.output_buffer_size().unwrap()];
        let info = r.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info.width, info.height, buf)
    }

    #[test]
    fn window_maps_ends_and_middle() {
        let w = Window::new(100.0, 200.0).unwrap();
        assert_eq!((w.map(0.0), w.map(100.0), w.map(200.0), w.map(-5.0), w.map(900.0)), (0, 128, 255, 0, 255));
        assert!(Window::new(0.0, 0.0).is_err());
        assert_eq!(Window::full_range(&[3.0, 3.0]).width, 1.0);
    }

    #[test]
    fn slice_round_trips_through_png() {
        let g = Grid3::from_vec([3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let bytes = slice_png(&g, 1, Window::new(8.5, 5.0).unwrap()).unwrap();
        let (w, h, px) = decode(&bytes);
        assert_eq!((w, h), (3, 2));
        // values 6..=11 over the window [6, 11]
        assert_eq!(px, vec![0, 51, 102, 153, 204, 255]);
        assert!(slice_png(&g, 2, Window::new(0.0, 1.0).unwrap()).is_err());
        let m = Grid3::from_vec([2, 1, 1], vec![0u8, 2]).unwrap();
        assert_eq!(decode(&mask_png(&m, 0, 2).unwrap()).2, vec![0, 254]);
    }
}
