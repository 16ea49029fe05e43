//! Convolution and pooling kernels.
//!
//! Three loops cover both convolution directions and their gradients:
//!
//! * `gather`: `out[n,a,o] = bias[a] + Σ w[a,b,k] · src[n,b,o·s+k−p]`
//!   (conv forward, transposed-conv input gradient)
//! * `scatter`: `out[n,a,i·s+k−p] += w[b,a,k] · src[n,b,i]`
//!   (transposed-conv forward, conv input gradient)
//! * `weight_grad`: `dw[a,b,k] = Σ small[n,a,o] · large[n,b,o·s+k−p]`
//!
//! Each output plane (or weight row) is owned by one
//! worker, so the parallel and sequential paths are bit-identical.

use super::tensor::{Shape, Tensor};
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv_out(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.k {
            return None;
        }
        Some((padded - self.k) / self.stride + 1)
    }

    pub fn tconv_out(&self, len: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.k).checked_sub(2 * self.pad).filter(|&v| v > 0)
    }
}

/// Output positions `o` in `[0, out_len)` with `0 <= o*s + off < in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, s: usize, off: isize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let span = in_len as isize - off;
    let hi = if span <= 0 { 0 } else { (span + s - 1) / s };
    let hi = hi.min(out_len as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[allow(clippy::needless_range_loop)]
pub fn gather(
    src: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    g: ConvGeom,
) -> Tensor {
    let ss = src.shape();
    let (in_c, in_h, in_w) = (ss.c, ss.h, ss.w);
    let k = g.k;
    let plane = out_h * out_w;
    let mut out = vec![0.0f64; ss.n * out_c * plane];
    let src_data = src.data();
    parallel::for_each_chunk_mut(&mut out, plane, |idx, out_plane| {
        let n = idx / out_c;
        let a = idx % out_c;
        let b0 = bias.map_or(0.0, |b| b[a]);
        out_plane.fill(b0);
        let acc = out_plane;
        for b in 0..in_c {
            let sp = &src_data[(n * in_c + b) * in_h * in_w..][..in_h * in_w];
            for kh in 0..k {
                let off_h = kh as isize - g.pad as isize;
                let (oh_lo, oh_hi) = valid_range(out_h, in_h, g.stride, off_h);
                for kw in 0..k {
                    let wv = weight[((a * in_c + b) * k + kh) * k + kw];
                    let off_w = kw as isize - g.pad as isize;
                    let (ow_lo, ow_hi) = valid_range(out_w, in_w, g.stride, off_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * g.stride) as isize + off_h;
                        let row = &sp[ih as usize * in_w..][..in_w];
                        let acc_row = &mut acc[oh * out_w..][..out_w];
                        if g.stride == 1 {
                            let base = (ow_lo as isize + off_w) as usize;
                            let n_el = ow_hi - ow_lo;
                            let src_seg = &row[base..base + n_el];
                            for (d, &v) in acc_row[ow_lo..ow_hi].iter_mut().zip(src_seg) {
                                *d += wv * v;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * g.stride) as isize + off_w) as usize;
                                acc_row[ow] += wv * row[iw];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(Shape::new(ss.n, out_c, out_h, out_w), out).expect("gather output shape")
}

#[allow(clippy::needless_range_loop)]
pub fn scatter(
    src: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    g: ConvGeom,
) -> Tensor {
    let ss = src.shape();
    let (in_c, in_h, in_w) = (ss.c, ss.h, ss.w);
    let k = g.k;
    let plane = out_h * out_w;
    let mut out = vec![0.0f64; ss.n * out_c * plane];
    let src_data = src.data();
    parallel::for_each_chunk_mut(&mut out, plane, |idx, out_plane| {
        let n = idx / out_c;
        let a = idx % out_c;
        let b0 = bias.map_or(0.0, |b| b[a]);
        out_plane.fill(b0);
        let acc = out_plane;
        for b in 0..in_c {
            let sp = &src_data[(n * in_c + b) * in_h * in_w..][..in_h * in_w];
            for kh in 0..k {
                let off_h = kh as isize - g.pad as isize;
                // source rows i whose target row i*s + off_h lies in [0, out_h)
                let (ih_lo, ih_hi) = valid_range(in_h, out_h, g.stride, off_h);
                for kw in 0..k {
                    let wv = weight[((b * out_c + a) * k + kh) * k + kw];
                    let off_w = kw as isize - g.pad as isize;
                    let (iw_lo, iw_hi) = valid_range(in_w, out_w, g.stride, off_w);
                    if iw_lo >= iw_hi {
                        continue;
                    }
                    for ih in ih_lo..ih_hi {
                        let oh = ((ih * g.stride) as isize + off_h) as usize;
                        let row = &sp[ih * in_w..][..in_w];
                        let acc_row = &mut acc[oh * out_w..][..out_w];
                        if g.stride == 1 {
                            let base = (iw_lo as isize + off_w) as usize;
                            let n_el = iw_hi - iw_lo;
                            for (d, &v) in acc_row[base..base + n_el].iter_mut().zip(&row[iw_lo..iw_hi]) {
                                *d += wv * v;
                            }
                        } else {
                            for iw in iw_lo..iw_hi {
                                let ow = ((iw * g.stride) as isize + off_w) as usize;
                                acc_row[ow] += wv * row[iw];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(Shape::new(ss.n, out_c, out_h, out_w), out).expect("scatter output shape")
}

/// Weight gradient laid out as `[a, b, k, k]`, where `a` indexes the
/// channels of `small` and `b` those of `large`.
pub fn weight_grad(small: &Tensor, large: &Tensor, g: ConvGeom) -> Vec<f64> {
    let sm = small.shape();
    let lg = large.shape();
    let k = g.k;
    let (a_c, b_c) = (sm.c, lg.c);
    let row_len = b_c * k * k;
    let mut out = vec![0.0f64; a_c * row_len];
    let sd = small.data();
    let ld = large.data();
    parallel::for_each_chunk_mut(&mut out, row_len, |a, out_row| {
        for b in 0..b_c {
            for kh in 0..k {
                let off_h = kh as isize - g.pad as isize;
                let (oh_lo, oh_hi) = valid_range(sm.h, lg.h, g.stride, off_h);
                for kw in 0..k {
                    let off_w = kw as isize - g.pad as isize;
                    let (ow_lo, ow_hi) = valid_range(sm.w, lg.w, g.stride, off_w);
                    let mut lanes = [0.0f64; 4];
                    if ow_lo < ow_hi {
                        for n in 0..sm.n {
                            let sp = &sd[(n * a_c + a) * sm.h * sm.w..][..sm.h * sm.w];
                            let lp = &ld[(n * b_c + b) * lg.h * lg.w..][..lg.h * lg.w];
                            for oh in oh_lo..oh_hi {
                                let ih = ((oh * g.stride) as isize + off_h) as usize;
                                let srow = &sp[oh * sm.w..][..sm.w];
                                let lrow = &lp[ih * lg.w..][..lg.w];
                                for (j, ow) in (ow_lo..ow_hi).enumerate() {
                                    let iw = ((ow * g.stride) as isize + off_w) as usize;
                                    lanes[j & 3] += srow[ow] * lrow[iw];
                                }
                            }
                        }
                    }
                    out_row[(b * k + kh) * k + kw] = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
                }
            }
        }
    });
    out
}

/// Per-channel sums of a gradient tensor (bias gradient).
pub fn channel_sums(grad: &Tensor) -> Vec<f64> {
    let s = grad.shape();
    let plane = s.plane();
    let d = grad.data();
    (0..s.c)
        .map(|c| {
            let mut acc = 0.0f64;
            for n in 0..s.n {
                acc += d[(n * s.c + c) * plane..][..plane].iter().copied().sum::<f64>();
            }
            acc
        })
        .collect()
}

/// 2x2 / stride-2 max pooling; returns values and flat argmax indices.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut vals = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    let d = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.h * s.w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + 2 * i * s.w + 2 * j;
                let mut best = d[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * s.w + 2 * j + dj;
                    if d[idx] > best {
                        best = d[idx];
                        best_idx = idx;
                    }
                }
                vals.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (Tensor::new(out_shape, vals).expect("pool shape"), arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for out_len in 1..7 {
            for in_len in 1..9 {
                for s in 1..4 {
                    for off in -3isize..4 {
                        let (lo, hi) = valid_range(out_len, in_len, s, off);
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let p = (o * s) as isize + off;
                                p >= 0 && p < in_len as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "out {out_len} in {in_len} s {s} off {off}");
                    }
                }
            }
        }
    }

    #[test]
    fn geometry_formulas() {
        let g = ConvGeom { k: 4, stride: 2, pad: 1 };
        assert_eq!(g.conv_out(64), Some(32));
        assert_eq!(g.tconv_out(32), Some(64));
        let g3 = ConvGeom { k: 3, stride: 1, pad: 1 };
        assert_eq!(g3.conv_out(5), Some(5));
        assert_eq!(ConvGeom { k: 5, stride: 1, pad: 0 }.conv_out(3), None);
    }

    #[test]
    fn pool_picks_first_max_on_ties() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let (v, a) = max_pool2(&x);
        assert_eq!(v.data(), &[1.0]);
        assert_eq!(a, vec![0]);
    }
}
