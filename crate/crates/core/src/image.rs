//! Planar grids and resampling.
//!
//! Continuous coordinates are in index units with pixel centers on the
//! integers: pixel `(r, c)` covers `[r - 0.5, r + 0.5) x [c - 0.5, c + 0.5)`.

/// Label values used in every mask.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const MYOCARDIUM: u8 = 1;
    pub const CAVITY: u8 = 2;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![T::default(); height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid buffer length");
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl Grid<u8> {
    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }
}

/// How samples outside the grid are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    Zero,
    Clamp,
}

#[inline]
pub fn sample_bilinear(g: &Grid<f32>, y: f64, x: f64, border: Border) -> f64 {
    let (h, w) = (g.height as f64, g.width as f64);
    let (y, x) = match border {
        Border::Clamp => (y.clamp(0.0, h - 1.0), x.clamp(0.0, w - 1.0)),
        Border::Zero => (y, x),
    };
    if !(y > -1.0 && x > -1.0 && y < h && x < w) {
        return 0.0;
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= g.height as isize || c >= g.width as isize {
            0.0
        } else {
            g.data[r as usize * g.width + c as usize] as f64
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Nearest label; outside the grid reads as background.
#[inline]
pub fn sample_nearest(g: &Grid<u8>, y: f64, x: f64) -> u8 {
    let r = (y + 0.5).floor();
    let c = (x + 0.5).floor();
    if r < 0.0 || c < 0.0 || r >= g.height as f64 || c >= g.width as f64 {
        label::BACKGROUND
    } else {
        g.data[r as usize * g.width + c as usize]
    }
}

/// Inverse-mapped bilinear warp: output `(r, c)` reads the source at `map(r, c)`.
pub fn warp_bilinear(
    src: &Grid<f32>,
    height: usize,
    width: usize,
    border: Border,
    map: impl Fn(f64, f64) -> (f64, f64),
) -> Grid<f32> {
    let mut out = Grid::new(height, width);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = map(r as f64, c as f64);
            out.data[r * width + c] = sample_bilinear(src, y, x, border) as f32;
        }
    }
    out
}

pub fn warp_nearest(
    src: &Grid<u8>,
    height: usize,
    width: usize,
    map: impl Fn(f64, f64) -> (f64, f64),
) -> Grid<u8> {
    let mut out = Grid::new(height, width);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = map(r as f64, c as f64);
            out.data[r * width + c] = sample_nearest(src, y, x);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixel_centers_exactly() {
        let g = Grid::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(sample_bilinear(&g, 1.0, 2.0, Border::Zero), 6.0);
        assert_eq!(sample_bilinear(&g, 0.5, 0.5, Border::Zero), 3.0);
        assert_eq!(sample_bilinear(&g, -1.0, 0.0, Border::Zero), 0.0);
        assert_eq!(sample_bilinear(&g, -0.5, 0.0, Border::Zero), 0.5);
        assert_eq!(sample_bilinear(&g, -3.0, 9.0, Border::Clamp), 3.0);
    }

    #[test]
    fn nearest_outside_is_background() {
        let g = Grid::from_vec(1, 2, vec![2u8, 1]);
        assert_eq!(sample_nearest(&g, 0.0, 0.49), 2);
        assert_eq!(sample_nearest(&g, 0.0, 0.5), 1);
        assert_eq!(sample_nearest(&g, 0.0, -0.6), 0);
    }
}
