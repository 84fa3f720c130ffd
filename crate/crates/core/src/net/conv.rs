//! 3×3 convolution with padding 1, applied independently to every frame.
//! Activations are laid out `[C][F][H][W]`, so all frames share one GEMM.

use serde::{Deserialize, Serialize};

use super::linalg::{gemm, Op};

pub(crate) const K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `[out][in][3][3]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
}

impl Geometry {
    pub fn new(frames: usize, h: usize, w: usize, stride: usize) -> Self {
        Geometry {
            frames,
            h,
            w,
            ho: (h + 2 - K) / stride + 1,
            wo: (w + 2 - K) / stride + 1,
            stride,
        }
    }

    fn cols(&self) -> usize {
        self.frames * self.ho * self.wo
    }
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            stride,
            weight: vec![0.0; out_channels * in_channels * K * K],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub(crate) fn im2col(&self, input: &[f64], g: &Geometry) -> Vec<f64> {
        let cols = g.cols();
        let mut out = vec![0.0; self.in_channels * K * K * cols];
        let plane = g.h * g.w;
        for ci in 0..self.in_channels {
            for ky in 0..K {
                for kx in 0..K {
                    let row = &mut out[((ci * K + ky) * K + kx) * cols..][..cols];
                    for f in 0..g.frames {
                        let src = &input[(ci * g.frames + f) * plane..][..plane];
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - 1;
                            if iy < 0 || iy as usize >= g.h {
                                continue;
                            }
                            let src_row = &src[iy as usize * g.w..][..g.w];
                            let dst = &mut row[(f * g.ho + oy) * g.wo..][..g.wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - 1;
                                if ix >= 0 && (ix as usize) < g.w {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, dcols: &[f64], g: &Geometry, dinput: &mut [f64]) {
        let cols = g.cols();
        let plane = g.h * g.w;
        for ci in 0..self.in_channels {
            for ky in 0..K {
                for kx in 0..K {
                    let row = &dcols[((ci * K + ky) * K + kx) * cols..][..cols];
                    for f in 0..g.frames {
                        let dst = &mut dinput[(ci * g.frames + f) * plane..][..plane];
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - 1;
                            if iy < 0 || iy as usize >= g.h {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                            let src = &row[(f * g.ho + oy) * g.wo..][..g.wo];
                            for (ox, s) in src.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - 1;
                                if ix >= 0 && (ix as usize) < g.w {
                                    dst_row[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns `(output [Cout][F][Ho][Wo], im2col buffer)`.
    pub(crate) fn forward(&self, input: &[f64], g: &Geometry) -> (Vec<f64>, Vec<f64>) {
        let cols = self.im2col(input, g);
        let n = g.cols();
        let mut out = vec![0.0; self.out_channels * n];
        for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
            chunk.fill(self.bias[co]);
        }
        gemm(self.out_channels, self.in_channels * K * K, n, 1.0, &self.weight, Op::N, &cols, Op::N, 1.0, &mut out);
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the input gradient (when `want_input`).
    pub(crate) fn backward(
        &self,
        dout: &[f64],
        cols: &[f64],
        g: &Geometry,
        grad: Option<&mut Conv2d>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let n = g.cols();
        let kk = self.in_channels * K * K;
        if let Some(grad) = grad {
            gemm(self.out_channels, n, kk, 1.0, dout, Op::N, cols, Op::T, 1.0, &mut grad.weight);
            for (co, chunk) in dout.chunks_exact(n).enumerate() {
                grad.bias[co] += chunk.iter().sum::<f64>();
            }
        }
        if !want_input {
            return None;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, self.out_channels, n, 1.0, &self.weight, Op::T, dout, Op::N, 0.0, &mut dcols);
        let mut dinput = vec![0.0; self.in_channels * g.frames * g.h * g.w];
        self.col2im(&dcols, g, &mut dinput);
        Some(dinput)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(conv: &Conv2d, input: &[f64], g: &Geometry) -> Vec<f64> {
        let mut out = vec![0.0; conv.out_channels * g.frames * g.ho * g.wo];
        for co in 0..conv.out_channels {
            for f in 0..g.frames {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = conv.bias[co];
                        for ci in 0..conv.in_channels {
                            for ky in 0..K {
                                for kx in 0..K {
                                    let iy = (oy * g.stride + ky) as isize - 1;
                                    let ix = (ox * g.stride + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        acc += conv.weight[((co * conv.in_channels + ci) * K + ky) * K + kx]
                                            * input[((ci * g.frames + f) * g.h + iy as usize) * g.w + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((co * g.frames + f) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn filled(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()
    }

    #[test]
    fn forward_matches_direct_convolution() {
        for stride in [1, 2] {
            let mut conv = Conv2d::zeros(2, 3, stride);
            conv.weight = filled(conv.weight.len(), 0.71);
            conv.bias = filled(3, 1.3);
            let g = Geometry::new(2, 6, 8, stride);
            let input = filled(2 * 2 * 6 * 8, 0.17);
            let (out, _) = conv.forward(&input, &g);
            let want = direct(&conv, &input, &g);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut conv = Conv2d::zeros(2, 2, 2);
        conv.weight = filled(conv.weight.len(), 0.43);
        conv.bias = filled(2, 0.9);
        let g = Geometry::new(2, 6, 6, 2);
        let input = filled(2 * 2 * 36, 0.29);
        let probe = filled(2 * 2 * 9, 0.61);
        let loss = |c: &Conv2d, x: &[f64]| -> f64 { c.forward(x, &g).0.iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let (_, cols) = conv.forward(&input, &g);
        let mut grad = Conv2d::zeros(2, 2, 2);
        let dinput = conv.backward(&probe, &cols, &g, Some(&mut grad), true).unwrap();
        let h = 1e-6;
        for i in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight[i] += h;
            let mut m = conv.clone();
            m.weight[i] -= h;
            let fd = (loss(&p, &input) - loss(&m, &input)) / (2.0 * h);
            assert!((fd - grad.weight[i]).abs() < 1e-7);
        }
        for i in 0..input.len() {
            let mut p = input.clone();
            p[i] += h;
            let mut m = input.clone();
            m[i] -= h;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * h);
            assert!((fd - dinput[i]).abs() < 1e-7);
        }
        assert!((grad.bias[0] - probe[..18].iter().sum::<f64>()).abs() < 1e-12);
    }
}
