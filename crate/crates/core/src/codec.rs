//! OD matrices to fixed-size log-scaled images and back.

use thiserror::Error;

/// Side of the square model image; maps with fewer cells are zero padded.
pub const IMAGE_SIDE: usize = 64;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Header of the binary greyscale export; followed by `IMAGE_LEN` bytes.
pub const PGM_HEADER: &[u8] = b"P5\n64 64\n255\n";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("negative count {0}")]
    NegativeCount(f64),
    #[error("normalized value {value} exceeds scale {scale}")]
    ScaleTooSmall { value: f64, scale: f64 },
    #[error("invalid scale {0}")]
    InvalidScale(f64),
    #[error("matrix size {0} exceeds {IMAGE_SIDE}")]
    TooManyCells(usize),
    #[error("expected {expected} values, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("diagonal entry ({0}, {0}) must be zero")]
    NonZeroDiagonal(usize),
    #[error("pixel ({row}, {col}) = {value} outside [0, 1] or in the padding")]
    InvalidPixel { row: usize, col: usize, value: f64 },
}

/// Weighted OD adjacency matrix of trip counts with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl FlowMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n <= IMAGE_SIDE, "at most {IMAGE_SIDE} cells");
        FlowMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn new(n: usize, counts: Vec<u64>) -> Result<Self, CodecError> {
        if n > IMAGE_SIDE {
            return Err(CodecError::TooManyCells(n));
        }
        if counts.len() != n * n {
            return Err(CodecError::WrongLength {
                expected: n * n,
                got: counts.len(),
            });
        }
        if let Some(i) = (0..n).find(|&i| counts[i * n + i] != 0) {
            return Err(CodecError::NonZeroDiagonal(i));
        }
        Ok(FlowMatrix { n, counts })
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self, CodecError> {
        let n = rows.len();
        let mut counts = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(CodecError::WrongLength {
                    expected: n,
                    got: r.len(),
                });
            }
            counts.extend_from_slice(r);
        }
        FlowMatrix::new(n, counts)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n + j]
    }

    /// Adds `by` trips from `i` to `j`; self-loops are ignored.
    pub fn add(&mut self, i: usize, j: usize, by: u64) {
        if i != j {
            self.counts[i * self.n + j] += by;
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn max(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Elementwise sum; both matrices must have the same size.
    pub fn merge(&mut self, other: &FlowMatrix) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// A 64×64 image of log-normalized flows in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowImage {
    n: usize,
    scale: f64,
    pixels: Vec<f64>,
}

impl FlowImage {
    /// Validated constructor: pixels in `[0, 1]`, zero outside the active block.
    pub fn new(n: usize, scale: f64, pixels: Vec<f64>) -> Result<Self, CodecError> {
        let img = FlowImage::from_raw(n, scale, pixels)?;
        for row in 0..IMAGE_SIDE {
            for col in 0..IMAGE_SIDE {
                let value = img.pixel(row, col);
                let padding = row >= n || col >= n;
                if !(0.0..=1.0).contains(&value) || (padding && value != 0.0) {
                    return Err(CodecError::InvalidPixel { row, col, value });
                }
            }
        }
        Ok(img)
    }

    /// Wraps unvalidated pixels such as raw model output; [`decode`] clamps.
    pub fn from_raw(n: usize, scale: f64, pixels: Vec<f64>) -> Result<Self, CodecError> {
        if n > IMAGE_SIDE {
            return Err(CodecError::TooManyCells(n));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(CodecError::InvalidScale(scale));
        }
        if pixels.len() != IMAGE_LEN {
            return Err(CodecError::WrongLength {
                expected: IMAGE_LEN,
                got: pixels.len(),
            });
        }
        Ok(FlowImage { n, scale, pixels })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * IMAGE_SIDE + col]
    }
}

/// `ln(1 + x)`.
pub fn normalize(x: f64) -> Result<f64, CodecError> {
    if x < 0.0 || x.is_nan() {
        return Err(CodecError::NegativeCount(x));
    }
    Ok(x.ln_1p())
}

/// Global normalization scale: the largest normalized count in `corpus`.
/// An all-zero corpus gets scale 1.
pub fn fit_scale<'a>(corpus: impl IntoIterator<Item = &'a FlowMatrix>) -> f64 {
    let max = corpus.into_iter().map(FlowMatrix::max).max().unwrap_or(0);
    if max == 0 {
        1.0
    } else {
        (max as f64).ln_1p()
    }
}

pub fn encode(flow: &FlowMatrix, scale: f64) -> Result<FlowImage, CodecError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(CodecError::InvalidScale(scale));
    }
    let n = flow.n;
    let mut pixels = vec![0.0; IMAGE_LEN];
    for i in 0..n {
        for j in 0..n {
            let value = normalize(flow.get(i, j) as f64)?;
            if value > scale {
                return Err(CodecError::ScaleTooSmall { value, scale });
            }
            pixels[i * IMAGE_SIDE + j] = value / scale;
        }
    }
    Ok(FlowImage { n, scale, pixels })
}

/// Inverse of [`encode`], rounding to the nearest count. Pixels are clamped
/// to `[0, 1]`, the diagonal is forced to zero and padding is ignored.
pub fn decode(img: &FlowImage) -> FlowMatrix {
    let n = img.n;
    let mut flow = FlowMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = img.pixel(i, j);
            let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
            let count = ((p * img.scale).exp() - 1.0).round().max(0.0);
            flow.counts[i * n + j] = count as u64;
        }
    }
    flow
}

/// Binary greyscale (PGM `P5`) export: fixed header, then one byte per pixel,
/// `round(255 * clamp(pixel, 0, 1))`, row-major.
pub fn to_pgm(img: &FlowImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(PGM_HEADER.len() + IMAGE_LEN);
    out.extend_from_slice(PGM_HEADER);
    out.extend(img.pixels.iter().map(|&p| {
        let p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        (p * 255.0).round() as u8
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    #[test]
    fn normalize_values() {
        assert_eq!(normalize(0.0).unwrap(), 0.0);
        assert!((normalize(E - 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(normalize(84_480.0).unwrap(), 84_481f64.ln());
        assert_eq!(normalize(-1.0), Err(CodecError::NegativeCount(-1.0)));
    }

    #[test]
    fn encode_known_pixel_and_padding() {
        let zero = FlowMatrix::zeros(5);
        assert!(encode(&zero, 1.0).unwrap().pixels().iter().all(|&p| p == 0.0));

        // A count of e - 1 is not an integer; check the pixel formula directly.
        let p = normalize(E - 1.0).unwrap() / 2.0;
        assert!((p - 0.5).abs() < 1e-15);

        let m = FlowMatrix::from_rows(&[&[0, 5, 1], &[2, 0, 9], &[4, 4, 0]]).unwrap();
        let img = encode(&m, 10f64.ln()).unwrap();
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                if r >= 3 || c >= 3 {
                    assert_eq!(img.pixel(r, c), 0.0);
                }
            }
        }
        assert_eq!(img.pixel(1, 2), 1.0);
    }

    #[test]
    fn scale_too_small() {
        let m = FlowMatrix::from_rows(&[&[0, 100], &[0, 0]]).unwrap();
        assert!(matches!(encode(&m, 1.0), Err(CodecError::ScaleTooSmall { .. })));
        assert!(matches!(encode(&m, 0.0), Err(CodecError::InvalidScale(_))));
    }

    #[test]
    fn decode_zero_and_clamped() {
        let img = FlowImage::new(4, 3.0, vec![0.0; IMAGE_LEN]).unwrap();
        assert_eq!(decode(&img), FlowMatrix::zeros(4));

        let mut px = vec![0.0; IMAGE_LEN];
        px[1] = 1.0001;
        px[IMAGE_SIDE] = f64::NAN;
        px[0] = 0.7; // diagonal
        let raw = FlowImage::from_raw(2, 3.0, px).unwrap();
        let m = decode(&raw);
        assert_eq!(m.get(0, 1), (3f64.exp() - 1.0).round() as u64);
        assert_eq!(m.get(1, 0), 0);
        assert_eq!(m.get(0, 0), 0);
    }

    #[test]
    fn image_validation() {
        let mut px = vec![0.0; IMAGE_LEN];
        px[5] = 0.5;
        assert!(matches!(
            FlowImage::new(3, 1.0, px),
            Err(CodecError::InvalidPixel { row: 0, col: 5, .. })
        ));
        assert!(FlowMatrix::from_rows(&[&[1, 0], &[0, 0]]).is_err());
    }

    #[test]
    fn pgm_layout() {
        let img = FlowImage::new(3, 1.0, vec![0.0; IMAGE_LEN]).unwrap();
        let bytes = to_pgm(&img);
        assert_eq!(bytes.len(), 13 + 4096);
        assert_eq!(&bytes[..13], PGM_HEADER);
        assert!(bytes[13..].iter().all(|&b| b == 0));

        let mut px = vec![0.0; IMAGE_LEN];
        px[1] = 1.0;
        px[2] = 0.5;
        let bytes = to_pgm(&FlowImage::new(3, 1.0, px).unwrap());
        assert_eq!(bytes[13 + 1], 255);
        assert_eq!(bytes[13 + 2], 128);
    }

    fn arb_matrix() -> impl Strategy<Value = FlowMatrix> {
        (1usize..=12).prop_flat_map(|n| {
            proptest::collection::vec(0u64..=100_000, n * n).prop_map(move |mut v| {
                for i in 0..n {
                    v[i * n + i] = 0;
                }
                FlowMatrix::new(n, v).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(m in arb_matrix(), slack in 1.0f64..1.5) {
            let scale = fit_scale([&m]) * slack;
            let img = encode(&m, scale).unwrap();
            prop_assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert_eq!(decode(&img), m);
        }

        #[test]
        fn encode_is_monotone(a in 0u64..100_000, b in 0u64..100_000) {
            let m = FlowMatrix::from_rows(&[&[0, a, b], &[0, 0, 0], &[0, 0, 0]]).unwrap();
            let img = encode(&m, fit_scale([&m])).unwrap();
            prop_assert_eq!(a < b, img.pixel(0, 1) < img.pixel(0, 2));
            prop_assert_eq!(
                a < b,
                normalize(a as f64).unwrap() < normalize(b as f64).unwrap()
            );
        }
    }
}
