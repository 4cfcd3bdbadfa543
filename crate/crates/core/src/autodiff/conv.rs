//! 2-D convolution kernels: stride 1, zero "same" padding, grouped.
//!
//! Every group of every image is lowered to one matrix product over its patch
//! matrix (im2col). Images are independent work items for [`crate::par`].

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            groups,
            ..
        } = *self;
        if kernel_h == 0 || kernel_w == 0 || kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(shape_err!(
                "kernel {kernel_h}x{kernel_w} must be odd for same padding"
            ));
        }
        if in_channels == 0 || out_channels == 0 || groups == 0 {
            return Err(shape_err!("conv channels and groups must be positive"));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(shape_err!(
                "channels {in_channels}->{out_channels} not divisible by groups {groups}"
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel_h * self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        let [o, i, h, w] = self.weight_shape();
        o * i * h * w + if self.has_bias { self.out_channels } else { 0 }
    }

    /// Multiply and add counted separately, bias adds counted once per output.
    pub fn flops(&self, batch: usize, height: usize, width: usize) -> u64 {
        let hw = (batch * height * width) as u64;
        let mac = (self.kernel_h * self.kernel_w * self.in_channels / self.groups
            * self.out_channels) as u64;
        2 * mac * hw
            + if self.has_bias {
                self.out_channels as u64 * hw
            } else {
                0
            }
    }
}

/// Geometry shared by the kernels.
#[derive(Clone, Copy)]
pub(crate) struct Geom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub spec: ConvSpec,
}

impl Geom {
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn cin_g(&self) -> usize {
        self.spec.in_channels / self.spec.groups
    }
    fn cout_g(&self) -> usize {
        self.spec.out_channels / self.spec.groups
    }
    fn ksize(&self) -> usize {
        self.spec.kernel_h * self.spec.kernel_w
    }
}

/// Valid output range `[lo, hi)` along one axis for tap offset `d`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = ((-d).max(0) as usize).min(len);
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Overwrites the patch matrix of one group: row `(ci, ky, kx)`, column `(y, x)`
/// holds `inp[ci, y + dy, x + dx]`, zero outside the image.
fn im2col(cols: &mut [f64], inp: &[f64], g: &Geom) {
    let (kh, kw, hw) = (g.spec.kernel_h, g.spec.kernel_w, g.hw());
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    for ci in 0..g.cin_g() {
        let plane = &inp[ci * hw..][..hw];
        for ky in 0..kh {
            let dy = ky as isize - ph;
            let (y0, y1) = span(g.h, dy);
            for kx in 0..kw {
                let dx = kx as isize - pw;
                let (x0, x1) = span(g.w, dx);
                let row = &mut cols[((ci * kh + ky) * kw + kx) * hw..][..hw];
                let len = x1 - x0;
                if len == 0 || y0 == y1 {
                    // Tap lies entirely outside the image.
                    row.fill(0.0);
                    continue;
                }
                row[..y0 * g.w].fill(0.0);
                row[y1 * g.w..].fill(0.0);
                for y in y0..y1 {
                    let src = ((y as isize + dy) as usize) * g.w + (x0 as isize + dx) as usize;
                    let r = &mut row[y * g.w..][..g.w];
                    r[..x0].fill(0.0);
                    r[x0..x1].copy_from_slice(&plane[src..src + len]);
                    r[x1..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds every patch entry back onto its source pixel.
fn col2im_add(dinp: &mut [f64], cols: &[f64], g: &Geom) {
    let (kh, kw, hw) = (g.spec.kernel_h, g.spec.kernel_w, g.hw());
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    for ci in 0..g.cin_g() {
        let plane = &mut dinp[ci * hw..][..hw];
        for ky in 0..kh {
            let dy = ky as isize - ph;
            let (y0, y1) = span(g.h, dy);
            for kx in 0..kw {
                let dx = kx as isize - pw;
                let (x0, x1) = span(g.w, dx);
                let row = &cols[((ci * kh + ky) * kw + kx) * hw..][..hw];
                let len = x1 - x0;
                if len == 0 {
                    continue;
                }
                for y in y0..y1 {
                    let dst = ((y as isize + dy) as usize) * g.w + (x0 as isize + dx) as usize;
                    for (a, b) in plane[dst..dst + len]
                        .iter_mut()
                        .zip(&row[y * g.w + x0..][..len])
                    {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Strided matrix view: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn row_major(rows: usize, cols: usize) -> Self {
        View {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn extent(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }
}

/// `c = a · b + beta · c`.
fn gemm(a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
    assert!(a.len() >= av.extent() && b.len() >= bv.extent() && c.len() >= cv.extent());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Patch matrix of group `grp` of one image, borrowed directly for 1x1 kernels.
fn patches<'a>(image: &'a [f64], grp: usize, buf: &'a mut Vec<f64>, g: &Geom) -> &'a [f64] {
    let group_in = &image[grp * g.cin_g() * g.hw()..][..g.cin_g() * g.hw()];
    if g.ksize() == 1 {
        return group_in;
    }
    buf.resize(g.cin_g() * g.ksize() * g.hw(), 0.0);
    im2col(buf, group_in, g);
    buf
}

pub(crate) fn forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: Geom) -> Vec<f64> {
    let hw = g.hw();
    let (cin, cout) = (g.spec.in_channels, g.spec.out_channels);
    let (cin_g, cout_g, ks) = (g.cin_g(), g.cout_g(), g.ksize());
    let wv = View::row_major(cout_g, cin_g * ks);
    let mut out = vec![0.0; g.n * cout * hw];
    par::for_each_chunk(&mut out, cout * hw, |b, out_b| {
        let image = &x[b * cin * hw..][..cin * hw];
        let mut buf = Vec::new();
        if let Some(bias) = bias {
            for (plane, &v) in out_b.chunks_mut(hw).zip(bias) {
                plane.fill(v);
            }
        }
        for grp in 0..g.spec.groups {
            let cols = patches(image, grp, &mut buf, &g);
            let w = &weight[grp * cout_g * cin_g * ks..][..cout_g * cin_g * ks];
            let c = &mut out_b[grp * cout_g * hw..][..cout_g * hw];
            gemm(
                w,
                wv,
                cols,
                View::row_major(cin_g * ks, hw),
                1.0,
                c,
                View::row_major(cout_g, hw),
            );
        }
    });
    out
}

pub(crate) fn backward_input(dout: &[f64], weight: &[f64], g: Geom) -> Vec<f64> {
    let hw = g.hw();
    let (cin, cout) = (g.spec.in_channels, g.spec.out_channels);
    let (cin_g, cout_g, ks) = (g.cin_g(), g.cout_g(), g.ksize());
    let wt = View::row_major(cout_g, cin_g * ks).t();
    let mut dx = vec![0.0; g.n * cin * hw];
    par::for_each_chunk(&mut dx, cin * hw, |b, dx_b| {
        let mut dcols = vec![0.0; if ks == 1 { 0 } else { cin_g * ks * hw }];
        for grp in 0..g.spec.groups {
            let w = &weight[grp * cout_g * cin_g * ks..][..cout_g * cin_g * ks];
            let d = &dout[(b * cout + grp * cout_g) * hw..][..cout_g * hw];
            let dst = &mut dx_b[grp * cin_g * hw..][..cin_g * hw];
            let dv = View::row_major(cout_g, hw);
            if ks == 1 {
                gemm(w, wt, d, dv, 0.0, dst, View::row_major(cin_g, hw));
            } else {
                gemm(
                    w,
                    wt,
                    d,
                    dv,
                    0.0,
                    &mut dcols,
                    View::row_major(cin_g * ks, hw),
                );
                col2im_add(dst, &dcols, &g);
            }
        }
    });
    dx
}

pub(crate) fn backward_weight(dout: &[f64], x: &[f64], g: Geom) -> Vec<f64> {
    let hw = g.hw();
    let (cin, cout) = (g.spec.in_channels, g.spec.out_channels);
    let (cin_g, cout_g, ks) = (g.cin_g(), g.cout_g(), g.ksize());
    let per_group = cout_g * cin_g * ks;
    // Per-image partials summed in image order keep the result independent of
    // scheduling.
    let partials = par::map_range(g.n, |b| {
        let image = &x[b * cin * hw..][..cin * hw];
        let mut buf = Vec::new();
        let mut dw = vec![0.0; cout * cin_g * ks];
        for grp in 0..g.spec.groups {
            let cols = patches(image, grp, &mut buf, &g);
            let d = &dout[(b * cout + grp * cout_g) * hw..][..cout_g * hw];
            let c = &mut dw[grp * per_group..][..per_group];
            gemm(
                d,
                View::row_major(cout_g, hw),
                cols,
                View::row_major(cin_g * ks, hw).t(),
                0.0,
                c,
                View::row_major(cout_g, cin_g * ks),
            );
        }
        dw
    });
    let mut total = vec![0.0; cout * cin_g * ks];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

pub(crate) fn backward_bias(dout: &[f64], g: Geom) -> Vec<f64> {
    let hw = g.hw();
    let cout = g.spec.out_channels;
    let mut db = vec![0.0; cout];
    for b in 0..g.n {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dout[(b * cout + co) * hw..][..hw].iter().sum::<f64>();
        }
    }
    db
}
