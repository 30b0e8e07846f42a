//! NHWC convolution kernels. Weights are `[kh, kw, cin, cout]`.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn infer(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let [n, h, wd, cin] = x[..] else {
            panic!("conv2d input must be [n, h, w, c], got {x:?}")
        };
        let [kh, kw, cin2, cout] = w[..] else {
            panic!("conv2d weight must be [kh, kw, cin, cout], got {w:?}")
        };
        assert_eq!(cin, cin2, "conv2d channel mismatch: input {x:?}, weight {w:?}");
        assert!(stride >= 1, "conv2d stride must be positive");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than padded input");
        Self {
            n,
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        }
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo * self.cout
    }

    /// Input coordinate for output `o` and tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

pub(super) fn forward(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(o, xs)| forward_one(g, xs, w, b, o));
    out
}

fn forward_one(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let o = &mut out[(oy * g.wo + ox) * cout..][..cout];
            o.copy_from_slice(b);
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * cin..][..cin];
                    let wk = &w[(ky * g.kw + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (ov, wv) in o.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(dx, dw, db)`. Weight gradients are reduced over the batch in
/// sample order so the result does not depend on scheduling.
pub(super) fn backward(g: &ConvGeometry, x: &[f64], w: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let wlen = w.len();
    let parts: Vec<(Vec<f64>, Vec<f64>)> = x
        .par_chunks(g.in_len())
        .zip(grad.par_chunks(g.out_len()))
        .map(|(xs, gs)| {
            let mut dx = vec![0.0; g.in_len()];
            let mut dw = vec![0.0; wlen];
            backward_one(g, xs, w, gs, &mut dx, &mut dw);
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0; wlen];
    for (pdx, pdw) in parts {
        dx.extend(pdx);
        for (a, b) in dw.iter_mut().zip(pdw) {
            *a += b;
        }
    }
    let mut db = vec![0.0; g.cout];
    for row in grad.chunks_exact(g.cout) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    (dx, dw, db)
}

fn backward_one(g: &ConvGeometry, x: &[f64], w: &[f64], grad: &[f64], dx: &mut [f64], dw: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let go = &grad[(oy * g.wo + ox) * cout..][..cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let base = (iy * g.w + ix) * cin;
                    let wbase = (ky * g.kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let wr = &w[wbase + ci * cout..][..cout];
                        dx[base + ci] += go.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        let xv = x[base + ci];
                        if xv != 0.0 {
                            for (d, gv) in dw[wbase + ci * cout..][..cout].iter_mut().zip(go) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}
