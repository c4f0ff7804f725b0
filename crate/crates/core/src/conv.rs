//! 2-D convolution and max pooling over `[batch, channels, height, width]`
//! tensors, lowered to GEMM through an im2col buffer.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Conv2dGeometry { stride: 1, pad: 0 }
    }
}

/// Output extent of one spatial axis: `floor((in + 2·pad − kernel) / stride) + 1`.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, geo: Conv2dGeometry) -> Result<ConvDims> {
    let (&[n, c, h, w], &[o, kc, kh, kw]) = (input.shape(), kernel.shape()) else {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    };
    if kc != c {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    }
    let (Some(ho), Some(wo)) = (
        conv_out_extent(h, kh, geo.stride, geo.pad),
        conv_out_extent(w, kw, geo.stride, geo.pad),
    ) else {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    };
    Ok(ConvDims { n, c, h, w, o, kh, kw, ho, wo })
}

/// Unrolls one sample (`c×h×w`) into `[c·kh·kw, ho·wo]`.
fn im2col(sample: &[f64], d: &ConvDims, geo: Conv2dGeometry, cols: &mut [f64]) {
    let p = d.ho * d.wo;
    for ci in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    for ox in 0..d.wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        dst[oy * d.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                            sample[(ci * d.h + iy as usize) * d.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, geo: Conv2dGeometry, sample: &mut [f64]) {
    let p = d.ho * d.wo;
    for ci in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        sample[(ci * d.h + iy as usize) * d.w + ix as usize] += src[oy * d.wo + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input [n, c, h, w]` with `kernel [o, c, kh, kw]`,
/// plus an optional per-channel `bias [o]`.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, geo: Conv2dGeometry) -> Result<Tensor> {
    let d = conv_dims(input, kernel, geo)?;
    if let Some(b) = bias {
        if b.shape() != [d.o] {
            return Err(Error::shape("conv2d bias", b.shape(), &[d.o]));
        }
    }
    let ckk = d.c * d.kh * d.kw;
    let p = d.ho * d.wo;
    let mut cols = vec![0.0; ckk * p];
    let mut out = vec![0.0; d.n * d.o * p];
    let in_stride = d.c * d.h * d.w;
    for s in 0..d.n {
        im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &d, geo, &mut cols);
        let dst = &mut out[s * d.o * p..(s + 1) * d.o * p];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(d.o, ckk, p, 1.0, Mat::rows(kernel.data(), ckk), Mat::rows(&cols, p), beta, dst);
    }
    Ok(Tensor::from_parts(vec![d.n, d.o, d.ho, d.wo], out))
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor, geo: Conv2dGeometry) -> Result<Conv2dGrads> {
    let d = conv_dims(input, kernel, geo)?;
    if grad_out.shape() != [d.n, d.o, d.ho, d.wo] {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &[d.n, d.o, d.ho, d.wo]));
    }
    let ckk = d.c * d.kh * d.kw;
    let p = d.ho * d.wo;
    let in_stride = d.c * d.h * d.w;
    let mut cols = vec![0.0; ckk * p];
    let mut dcols = vec![0.0; ckk * p];
    let mut dkernel = vec![0.0; d.o * ckk];
    let mut dbias = vec![0.0; d.o];
    let mut dinput = vec![0.0; input.len()];
    for s in 0..d.n {
        im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &d, geo, &mut cols);
        let g = &grad_out.data()[s * d.o * p..(s + 1) * d.o * p];
        for (oc, chunk) in g.chunks_exact(p).enumerate() {
            dbias[oc] += chunk.iter().sum::<f64>();
        }
        // dK += g · colsᵀ
        gemm(d.o, p, ckk, 1.0, Mat::rows(g, p), Mat::transposed(&cols, p), 1.0, &mut dkernel);
        // dcols = Kᵀ · g
        gemm(ckk, d.o, p, 1.0, Mat::transposed(kernel.data(), ckk), Mat::rows(g, p), 0.0, &mut dcols);
        col2im(&dcols, &d, geo, &mut dinput[s * in_stride..(s + 1) * in_stride]);
    }
    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dinput),
        kernel: Tensor::from_parts(kernel.shape().to_vec(), dkernel),
        bias: Tensor::from_parts(vec![d.o], dbias),
    })
}

/// Max pooling with square windows. Returns the pooled tensor and, for each
/// output entry, the flat input index that won the max (first on ties).
pub fn maxpool_forward(input: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::shape("maxpool", input.shape(), &[0, 0, 0, 0]));
    };
    let (Some(ho), Some(wo)) = (conv_out_extent(h, size, stride, 0), conv_out_extent(w, size, stride, 0)) else {
        return Err(Error::shape("maxpool", input.shape(), &[size, size]));
    };
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), arg))
}

pub fn maxpool_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct 7-loop cross-correlation.
    fn naive_conv(x: &Tensor, k: &Tensor, geo: Conv2dGeometry) -> Tensor {
        let &[n, c, h, w] = x.shape() else { unreachable!() };
        let &[o, _, kh, kw] = k.shape() else { unreachable!() };
        let ho = (h + 2 * geo.pad - kh) / geo.stride + 1;
        let wo = (w + 2 * geo.pad - kw) / geo.stride + 1;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                    let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.at(&[s, ci, iy as usize, ix as usize]) * k.at(&[oc, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[s, oc, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn full_overlap_is_dot_product() {
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| f64::from(v) * 0.5).collect()).unwrap();
        let y = conv2d_forward(&x, &k, None, Conv2dGeometry::default()).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], x.dot(&k.clone().reshape(&[1, 1, 3, 3]).unwrap()).unwrap());
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let geo = Conv2dGeometry::default();
        let y = conv2d_forward(&x, &k, None, geo).unwrap();
        assert!(max_diff(&y, &naive_conv(&x, &k, geo)) < 1e-12);
    }

    #[test]
    fn matches_naive_loop_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let c = rng.random_range(1..4);
            let o = rng.random_range(1..5);
            let kh = rng.random_range(1..4);
            let h = rng.random_range(kh..10);
            let w = rng.random_range(kh..10);
            let geo = Conv2dGeometry {
                stride: rng.random_range(1..3),
                pad: rng.random_range(0..2),
            };
            let x = random(&[rng.random_range(1..3), c, h, w], &mut rng);
            let k = random(&[o, c, kh, kh], &mut rng);
            let y = conv2d_forward(&x, &k, None, geo).unwrap();
            assert!(max_diff(&y, &naive_conv(&x, &k, geo)) < 1e-12);
        }
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_out_extent(28, 5, 1, 0), Some(24));
        assert_eq!(conv_out_extent(7, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geo = Conv2dGeometry { stride: 2, pad: 1 };
        let x = random(&[2, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let y = conv2d_forward(&x, &k, None, geo).unwrap();
        let weights = random(y.shape(), &mut rng);
        let loss = |x: &Tensor, k: &Tensor| conv2d_forward(x, k, None, geo).unwrap().dot(&weights).unwrap();
        let g = conv2d_backward(&x, &k, &weights, geo).unwrap();
        let h = 1e-6;
        for i in 0..k.len() {
            let (mut kp, mut km) = (k.clone(), k.clone());
            kp.data_mut()[i] += h;
            km.data_mut()[i] -= h;
            let fd = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * h);
            assert!((fd - g.kernel.data()[i]).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &k) - loss(&xm, &k)) / (2.0 * h);
            assert!((fd - g.input.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), [4.0]);
        let dx = maxpool_backward(&Tensor::full(&[1, 1, 1, 1], 2.5), &arg, x.shape());
        assert_eq!(dx.data(), [0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn mismatched_channels_is_shape_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &k, None, Conv2dGeometry::default()), Err(Error::Shape { .. })));
    }
}
