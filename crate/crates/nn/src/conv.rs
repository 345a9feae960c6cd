//! im2col / col2im kernels shared by convolution and transposed convolution.

use crate::scalar::Element;

/// Geometry linking an image grid to the grid of kernel positions.
///
/// Position `(ph, pw)` reads image pixel `(ph * stride + ki - pad, pw * stride + kj - pad)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub pos_h: usize,
    pub pos_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeom {
    pub fn img_len(&self) -> usize {
        self.channels * self.img_h * self.img_w
    }

    pub fn positions(&self) -> usize {
        self.pos_h * self.pos_w
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    #[inline]
    fn src(&self, p: usize, k: usize) -> Option<usize> {
        let v = (p * self.stride + k) as isize - self.pad as isize;
        (v >= 0).then_some(v as usize)
    }
}

/// Writes one sample's patches as rows of `cols` (`positions x patch_len`).
pub fn im2col<T: Element>(img: &[T], g: &PatchGeom, cols: &mut [T]) {
    let pl = g.patch_len();
    let kk = g.kernel * g.kernel;
    debug_assert_eq!(img.len(), g.img_len());
    debug_assert_eq!(cols.len(), g.positions() * pl);
    for ph in 0..g.pos_h {
        for pw in 0..g.pos_w {
            let row = &mut cols[(ph * g.pos_w + pw) * pl..][..pl];
            for ki in 0..g.kernel {
                let ih = g.src(ph, ki).filter(|&h| h < g.img_h);
                for kj in 0..g.kernel {
                    let iw = g.src(pw, kj).filter(|&w| w < g.img_w);
                    let off = ki * g.kernel + kj;
                    match (ih, iw) {
                        (Some(h), Some(w)) => {
                            for c in 0..g.channels {
                                row[c * kk + off] = img[(c * g.img_h + h) * g.img_w + w];
                            }
                        }
                        _ => {
                            for c in 0..g.channels {
                                row[c * kk + off] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image, summing overlaps.
pub fn col2im<T: Element>(cols: &[T], g: &PatchGeom, img: &mut [T]) {
    let pl = g.patch_len();
    let kk = g.kernel * g.kernel;
    debug_assert_eq!(img.len(), g.img_len());
    for ph in 0..g.pos_h {
        for pw in 0..g.pos_w {
            let row = &cols[(ph * g.pos_w + pw) * pl..][..pl];
            for ki in 0..g.kernel {
                let Some(h) = g.src(ph, ki).filter(|&h| h < g.img_h) else { continue };
                for kj in 0..g.kernel {
                    let Some(w) = g.src(pw, kj).filter(|&w| w < g.img_w) else { continue };
                    let off = ki * g.kernel + kj;
                    for c in 0..g.channels {
                        img[(c * g.img_h + h) * g.img_w + w] += row[c * kk + off];
                    }
                }
            }
        }
    }
}

/// `[n, c, p]` to `[c, n * p]`.
pub fn to_channel_major<T: Element>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * p + i * p..][..p].copy_from_slice(&x[(i * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[c, n * p]` to `[n, c, p]`.
pub fn from_channel_major<T: Element>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[(i * c + ch) * p..][..p].copy_from_slice(&x[ch * n * p + i * p..][..p]);
        }
    }
    out
}

/// Output extent of a strided convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    ((size.checked_sub(1)? * stride + kernel + out_pad).checked_sub(2 * pad)).filter(|&v| v > 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_decoder_geometry_doubles() {
        assert_eq!(conv_transpose_out(32, 5, 2, 2, 1), Some(64));
        assert_eq!(conv_transpose_out(1, 5, 2, 2, 1), Some(2));
        assert_eq!(conv_out(64, 5, 2, 2), Some(32));
        assert_eq!(conv_out(2, 5, 2, 2), Some(1));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = PatchGeom { channels: 2, img_h: 5, img_w: 4, pos_h: 3, pos_w: 2, kernel: 3, stride: 2, pad: 1 };
        let img: Vec<f64> = (0..g.img_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_probe: Vec<f64> = (0..g.positions() * g.patch_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cols_probe.len()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&cols_probe, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn channel_major_round_trip() {
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let cm = to_channel_major(&x, 2, 3, 4);
        assert_eq!(cm[4], 12.0);
        assert_eq!(from_channel_major(&cm, 2, 3, 4), x);
    }
}
