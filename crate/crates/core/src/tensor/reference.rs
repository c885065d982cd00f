//! Naive loop implementations kept as independent references for the
//! lowered operations in [`super::ops`].

/// Direct nested-loop 2-d cross-correlation over flat NCHW / OCkk buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_direct(
    input: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    kernel: &[f64],
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> (Vec<f64>, (usize, usize)) {
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - padding as isize;
                                let ix = (x * stride + j) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = input[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kernel[((oi * c + ci) * kh + i) * kw + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + y) * wo + x] = acc;
                }
            }
        }
    }
    (out, (ho, wo))
}
