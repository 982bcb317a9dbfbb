//! Dense kernels behind the tape's structural ops: im2col/col2im, nearest
//! upsampling and its sum-pool adjoint, and generic gather/scatter maps.

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

/// Index map for gather/scatter. `idx[i]` is the flat input position feeding
/// output position `i`; `SKIP` marks positions that read zero (padding).
pub struct GatherMap {
    pub idx: Vec<u32>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

pub const SKIP: u32 = u32::MAX;

/// Unfold NCHW input into a `[batch*out_h*out_w, in_ch*kh*kw]` patch matrix.
pub fn im2col<S: Scalar>(x: &ArrayD<S>, g: ConvGeom) -> ArrayD<S> {
    assert_eq!(
        x.shape(),
        &[g.batch, g.in_ch, g.in_h, g.in_w],
        "im2col: input shape mismatch"
    );
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    let src = x.as_slice().expect("im2col: non-contiguous input");
    let mut out = vec![S::zero(); g.batch * oh * ow * plen];
    let mut row = 0usize;
    for b in 0..g.batch {
        let base_b = b * g.in_ch * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[row * plen..(row + 1) * plen];
                let mut col = 0usize;
                for c in 0..g.in_ch {
                    let base_c = base_b + c * g.in_h * g.in_w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            col += g.kw;
                            continue;
                        }
                        let base_y = base_c + iy as usize * g.in_w;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[col] = src[base_y + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.batch * oh * ow, plen]), out).unwrap()
}

/// Adjoint of [`im2col`]: fold a patch matrix back onto the NCHW grid,
/// accumulating overlaps.
pub fn col2im<S: Scalar>(cols: &ArrayD<S>, g: ConvGeom) -> ArrayD<S> {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    assert_eq!(
        cols.shape(),
        &[g.batch * oh * ow, plen],
        "col2im: column shape mismatch"
    );
    let src = cols.as_slice().expect("col2im: non-contiguous input");
    let mut out = vec![S::zero(); g.batch * g.in_ch * g.in_h * g.in_w];
    let mut row = 0usize;
    for b in 0..g.batch {
        let base_b = b * g.in_ch * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let patch = &src[row * plen..(row + 1) * plen];
                let mut col = 0usize;
                for c in 0..g.in_ch {
                    let base_c = base_b + c * g.in_h * g.in_w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            col += g.kw;
                            continue;
                        }
                        let base_y = base_c + iy as usize * g.in_w;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                out[base_y + ix as usize] = out[base_y + ix as usize] + patch[col];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.batch, g.in_ch, g.in_h, g.in_w]), out).unwrap()
}

/// Nearest-neighbor 2x upsampling of NCHW input.
pub fn upsample2<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "upsample2: expected NCHW");
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let src = x.as_slice().unwrap();
    let mut out = vec![S::zero(); b * c * 4 * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for bc in 0..b * c {
        let sbase = bc * h * w;
        let dbase = bc * oh * ow;
        for y in 0..h {
            for xcol in 0..w {
                let v = src[sbase + y * w + xcol];
                let d = dbase + 2 * y * ow + 2 * xcol;
                out[d] = v;
                out[d + 1] = v;
                out[d + ow] = v;
                out[d + ow + 1] = v;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap()
}

/// 2x2 stride-2 sum pooling of NCHW input (adjoint of [`upsample2`]).
pub fn sumpool2<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "sumpool2: expected NCHW");
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "sumpool2: odd spatial size");
    let src = x.as_slice().unwrap();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![S::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let sbase = bc * h * w;
        let dbase = bc * oh * ow;
        for y in 0..oh {
            for xcol in 0..ow {
                let s = sbase + 2 * y * w + 2 * xcol;
                out[dbase + y * ow + xcol] = src[s] + src[s + 1] + src[s + w] + src[s + w + 1];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).unwrap()
}

pub fn gather<S: Scalar>(x: &ArrayD<S>, map: &GatherMap) -> ArrayD<S> {
    assert_eq!(x.shape(), map.in_shape.as_slice(), "gather: input shape mismatch");
    let src = x.as_slice().unwrap();
    let out: Vec<S> = map
        .idx
        .iter()
        .map(|&i| if i == SKIP { S::zero() } else { src[i as usize] })
        .collect();
    ArrayD::from_shape_vec(IxDyn(&map.out_shape), out).unwrap()
}

/// Adjoint of [`gather`]: accumulate into the map's input shape.
pub fn scatter<S: Scalar>(x: &ArrayD<S>, map: &GatherMap) -> ArrayD<S> {
    assert_eq!(x.shape(), map.out_shape.as_slice(), "scatter: input shape mismatch");
    let src = x.as_slice().unwrap();
    let mut out = vec![S::zero(); map.in_shape.iter().product()];
    for (v, &i) in src.iter().zip(map.idx.iter()) {
        if i != SKIP {
            out[i as usize] = out[i as usize] + *v;
        }
    }
    ArrayD::from_shape_vec(IxDyn(&map.in_shape), out).unwrap()
}

/// Gather map selecting `start..start+len` along `axis`.
pub fn slice_gather_map(shape: &[usize], axis: usize, start: usize, len: usize) -> GatherMap {
    assert!(start + len <= shape[axis], "slice: out of bounds");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ax_len = shape[axis];
    let mut idx = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for a in start..start + len {
            let base = (o * ax_len + a) * inner;
            for i in 0..inner {
                idx.push((base + i) as u32);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    GatherMap {
        idx,
        in_shape: shape.to_vec(),
        out_shape,
    }
}

/// Gather map for row lookup: `out[i, :] = table[rows[i], :]`.
pub fn embedding_gather_map(rows: &[usize], table_rows: usize, dim: usize) -> GatherMap {
    let mut idx = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        assert!(r < table_rows, "embedding: row {r} out of range {table_rows}");
        for d in 0..dim {
            idx.push((r * dim + d) as u32);
        }
    }
    GatherMap {
        idx,
        in_shape: vec![table_rows, dim],
        out_shape: vec![rows.len(), dim],
    }
}

/// Gather map for max pooling over NCHW values: each output cell reads its
/// window's argmax. The map depends on the input values and is recomputed per
/// forward pass; the matching backward scatter routes gradients to the argmax.
pub fn maxpool_gather_map<S: Scalar>(
    x: &ArrayD<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> GatherMap {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "maxpool: expected NCHW");
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let src = x.as_slice().unwrap();
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(S, usize)> = None;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let pos = base + iy as usize * w + ix as usize;
                        let v = src[pos];
                        if best.map_or(true, |(bv, _)| v > bv) {
                            best = Some((v, pos));
                        }
                    }
                }
                idx.push(best.expect("maxpool: empty window").1 as u32);
            }
        }
    }
    GatherMap {
        idx,
        in_shape: sh.to_vec(),
        out_shape: vec![b, c, oh, ow],
    }
}
