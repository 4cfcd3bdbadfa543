//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use focusalpha::nn::{ParamKind, ParamStore};
use focusalpha::{ConvSpec, Graph, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, r)
}

/// Direct seven-loop grouped convolution with zero "same" padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let cout = spec.out_channels;
    let g = spec.groups;
    let (cig, cog) = (cin / g, cout / g);
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0; n * cout * h * wd];
    for b_i in 0..n {
        for o in 0..cout {
            let grp = o / cog;
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cig {
                        let c = grp * cig + ci;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let sy = y as isize + dy as isize - ph;
                                let sx = xx as isize + dx as isize - pw;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let xv = xs[((b_i * cin + c) * h + sy as usize) * wd + sx as usize];
                                let wv = ws[((o * cig + ci) * kh + dy) * kw + dx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b_i * cout + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, h, wd], out).unwrap()
}

/// Library convolution evaluated on constants.
pub fn library_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, spec).unwrap();
    g.value(y).clone()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Adds `U(-amp, amp)` to every learnable tensor, so zero-initialised biases
/// and unit BN scales take generic values.
pub fn jitter(store: &mut ParamStore, amp: f64, r: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        if p.kind == ParamKind::Weight {
            for v in p.value.data_mut() {
                *v += r.gen_range(-amp..amp);
            }
        }
    }
}

/// Sets every learnable tensor whose name starts with one of `prefixes` to 0.
pub fn zero_params(store: &mut ParamStore, prefixes: &[&str]) {
    for (name, p) in store.iter_mut() {
        if p.kind == ParamKind::Weight && prefixes.iter().any(|pre| name.starts_with(pre)) {
            p.value.fill(0.0);
        }
    }
}

/// Reshape `(g, C/g)` -> transpose -> flatten, applied to channel indices.
pub fn shuffle_oracle(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    let grid: Vec<Vec<usize>> = (0..groups)
        .map(|gi| (0..per).map(|j| gi * per + j).collect())
        .collect();
    let mut out = Vec::with_capacity(channels);
    for j in 0..per {
        for row in &grid {
            out.push(row[j]);
        }
    }
    out
}

/// Hand enumeration of learnable parameters for the reference network shape.
pub mod count {
    pub fn conv(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
        cout * cin * k * k + if bias { cout } else { 0 }
    }

    pub fn bn(c: usize) -> usize {
        2 * c
    }

    pub fn se(c: usize, r: usize) -> usize {
        let latent = if c < r { 1 } else { c / r };
        2 * c * latent
    }

    /// Group attention block `cin -> w` with a 1x1 combine.
    pub fn group_attention(cin: usize, w: usize, body_k: usize, attn_k: usize, r: usize) -> usize {
        let gw = w / 4;
        let stage = bn(gw) + conv(gw, gw, body_k, false);
        let attn = 2 * stage + conv(gw, gw, attn_k, true);
        let feat = 2 * stage;
        let post = conv(gw, 2 * gw, 1, true);
        conv(cin, w, 1, true) + 2 * (attn + feat + post) + conv(w, w, 1, true) + se(w, r)
    }

    pub fn head(cin: usize, hidden: usize, body_k: usize, attn_k: usize) -> usize {
        conv(cin, hidden, body_k, false) + bn(hidden) + conv(hidden, 1, attn_k, true)
    }

    /// Stem, encoder, decoder, multiscale heads and fuse head.
    pub fn network(
        widths: &[usize],
        in_ch: usize,
        first_k: usize,
        head_width: usize,
        r: usize,
    ) -> usize {
        let s = widths.len();
        let mut total = conv(in_ch, widths[0], first_k, true);
        for i in 0..s {
            let cin = if i == 0 { widths[0] } else { widths[i - 1] };
            total += group_attention(cin, widths[i], 3, 1, r);
        }
        for i in 0..s - 1 {
            total += group_attention(widths[i + 1], widths[i], 3, 1, r);
            total += head(widths[i], head_width, 3, 1);
        }
        total + head(s - 1, head_width, 3, 1)
    }
}
