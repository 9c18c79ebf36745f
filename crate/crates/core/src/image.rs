//! Plain 2-D grids used by the extraction heuristic and augmentation.

/// Row-major real-valued image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "image buffer size");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), rows * cols, "mask buffer size");
        Self { rows, cols, data }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![false; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

/// Bilinear sample at fractional `(y, x)`; samples outside the grid use `outside`
/// for the missing taps when `outside` is `Some`, otherwise clamp to the border.
#[inline]
pub fn bilinear(data: &[f64], rows: usize, cols: usize, y: f64, x: f64, outside: Option<f64>) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let fetch = |r: isize, c: isize| -> f64 {
        if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
            data[r as usize * cols + c as usize]
        } else if let Some(v) = outside {
            v
        } else {
            let rr = r.clamp(0, rows as isize - 1) as usize;
            let cc = c.clamp(0, cols as isize - 1) as usize;
            data[rr * cols + cc]
        }
    };
    let (r0, c0) = (y0 as isize, x0 as isize);
    let top = fetch(r0, c0) * (1.0 - fx) + fetch(r0, c0 + 1) * fx;
    let bottom = fetch(r0 + 1, c0) * (1.0 - fx) + fetch(r0 + 1, c0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Linear source coordinate for output index `i` when resizing `src_len -> dst_len`
/// with pixel-center alignment.
#[inline]
pub fn source_coord(i: usize, src_len: usize, dst_len: usize) -> f64 {
    let scale = src_len as f64 / dst_len as f64;
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64)
}
