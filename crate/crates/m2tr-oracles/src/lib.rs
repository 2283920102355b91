//! Brute-force reference implementations for test comparison.
//!
//! Everything here is written with explicit loops over plain `f64` slices and
//! deliberately shares no code with the crates under test. Shapes are passed
//! as separate arguments; data is row-major.

/// Direct 2D DFT by the definition sum, one channel at a time.
///
/// Input is `(h, w, c)` row-major; returns `(re, im)` of the same layout.
/// Unnormalized forward transform with kernel `exp(-2πi(uy/h + vx/w))`.
pub fn dft2d(data: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(data.len(), h * w * c);
    let mut re = vec![0.0; h * w * c];
    let mut im = vec![0.0; h * w * c];
    for u in 0..h {
        for v in 0..w {
            for ch in 0..c {
                let mut sr = 0.0;
                let mut si = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let val = data[(y * w + x) * c + ch];
                        sr += val * ang.cos();
                        si += val * ang.sin();
                    }
                }
                re[(u * w + v) * c + ch] = sr;
                im[(u * w + v) * c + ch] = si;
            }
        }
    }
    (re, im)
}

/// Direct inverse 2D DFT by the definition sum, returning the real part.
///
/// Normalized by `1/(h*w)`, kernel `exp(+2πi(uy/h + vx/w))`.
pub fn idft2d_real(re: &[f64], im: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    assert_eq!(re.len(), h * w * c);
    assert_eq!(im.len(), h * w * c);
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let ang = 2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let idx = (u * w + v) * c + ch;
                        // Re(S * e^{i ang}) = re*cos - im*sin
                        acc += re[idx] * ang.cos() - im[idx] * ang.sin();
                    }
                }
                out[(y * w + x) * c + ch] = acc * norm;
            }
        }
    }
    out
}

/// Nested-loop 2D cross-correlation.
///
/// `x` is `(h, w, ci)`, `weights` is `(kh, kw, ci, co)`, `bias` is `(co)`.
/// Zero padding of `pad` on every spatial side; output spatial size is
/// `floor((dim + 2*pad - k) / stride) + 1`.
#[allow(clippy::too_many_arguments)]
pub fn loop_conv2d(
    x: &[f64],
    h: usize,
    w: usize,
    ci: usize,
    weights: &[f64],
    kh: usize,
    kw: usize,
    co: usize,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    assert_eq!(x.len(), h * w * ci);
    assert_eq!(weights.len(), kh * kw * ci * co);
    assert_eq!(bias.len(), co);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..co {
                let mut acc = bias[oc];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        if iy < pad || ix < pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let ix = ix - pad;
                        if iy >= h || ix >= w {
                            continue;
                        }
                        for ic in 0..ci {
                            acc += x[(iy * w + ix) * ci + ic]
                                * weights[((ky * kw + kx) * ci + ic) * co + oc];
                        }
                    }
                }
                out[(oy * ow + ox) * co + oc] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Nested-loop affine map: `x (n, i) @ weights (i, o) + bias (o)`.
pub fn loop_dense(
    x: &[f64],
    n: usize,
    i_dim: usize,
    weights: &[f64],
    o_dim: usize,
    bias: &[f64],
) -> Vec<f64> {
    assert_eq!(x.len(), n * i_dim);
    assert_eq!(weights.len(), i_dim * o_dim);
    assert_eq!(bias.len(), o_dim);
    let mut out = vec![0.0; n * o_dim];
    for r in 0..n {
        for o in 0..o_dim {
            let mut acc = bias[o];
            for i in 0..i_dim {
                acc += x[r * i_dim + i] * weights[i * o_dim + o];
            }
            out[r * o_dim + o] = acc;
        }
    }
    out
}

/// Row-stabilized softmax over an `(n, m)` matrix.
pub fn loop_softmax_rows(x: &[f64], n: usize, m: usize) -> Vec<f64> {
    assert_eq!(x.len(), n * m);
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &x[r * m..(r + 1) * m];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..m {
            denom += (row[j] - mx).exp();
        }
        for j in 0..m {
            out[r * m + j] = (row[j] - mx).exp() / denom;
        }
    }
    out
}

/// Explicit-loop attention: `softmax(Q K^T / norm) V`.
///
/// `q` is `(n, d)`, `k` is `(m, d)`, `v` is `(m, d)`; output is `(n, d)`.
pub fn loop_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, norm: f64) -> Vec<f64> {
    assert_eq!(q.len(), n * d);
    assert_eq!(k.len(), m * d);
    assert_eq!(v.len(), m * d);
    let mut scores = vec![0.0; n * m];
    for r in 0..n {
        for cidx in 0..m {
            let mut acc = 0.0;
            for j in 0..d {
                acc += q[r * d + j] * k[cidx * d + j];
            }
            scores[r * m + cidx] = acc / norm;
        }
    }
    let weights = loop_softmax_rows(&scores, n, m);
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for j in 0..d {
            let mut acc = 0.0;
            for cidx in 0..m {
                acc += weights[r * m + cidx] * v[cidx * d + j];
            }
            out[r * d + j] = acc;
        }
    }
    out
}

/// Materialize non-overlapping `r x r` patches of an `(s, s, c)` grid.
///
/// Patches scan row-major by patch position; each patch flattens row-major
/// over `(y, x, channel)`. Returns `(patches, token_count, token_dim)`.
pub fn extract_patches(data: &[f64], s: usize, c: usize, r: usize) -> (Vec<Vec<f64>>, usize, usize) {
    assert_eq!(data.len(), s * s * c);
    assert_eq!(s % r, 0);
    let per_side = s / r;
    let mut patches = Vec::new();
    for py in 0..per_side {
        for px in 0..per_side {
            let mut flat = Vec::with_capacity(r * r * c);
            for y in 0..r {
                for x in 0..r {
                    for ch in 0..c {
                        let gy = py * r + y;
                        let gx = px * r + x;
                        flat.push(data[(gy * s + gx) * c + ch]);
                    }
                }
            }
            patches.push(flat);
        }
    }
    (patches, per_side * per_side, r * r * c)
}

/// Scatter flattened patch tokens back onto an `(s, s, c)` grid.
pub fn patches_to_grid(patches: &[Vec<f64>], s: usize, c: usize, r: usize) -> Vec<f64> {
    let per_side = s / r;
    assert_eq!(patches.len(), per_side * per_side);
    let mut out = vec![0.0; s * s * c];
    for py in 0..per_side {
        for px in 0..per_side {
            let flat = &patches[py * per_side + px];
            assert_eq!(flat.len(), r * r * c);
            for y in 0..r {
                for x in 0..r {
                    for ch in 0..c {
                        let gy = py * r + y;
                        let gx = px * r + x;
                        out[(gy * s + gx) * c + ch] = flat[(y * r + x) * c + ch];
                    }
                }
            }
        }
    }
    out
}

/// AUC by exhaustive pairwise comparison; ties count one half.
///
/// Returns `None` when either class is empty.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        None
    } else {
        Some(wins / pairs as f64)
    }
}

/// SSIM of two grayscale windows under an explicit weight mask.
///
/// Direct evaluation of the windowed formula with weighted moments:
/// `((2 μa μb + c1)(2 cov + c2)) / ((μa² + μb² + c1)(σa² + σb² + c2))`.
pub fn ssim_window(a: &[f64], b: &[f64], weights: &[f64], c1: f64, c2: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    assert_eq!(a.len(), weights.len());
    let wsum: f64 = weights.iter().sum();
    let mut mu_a = 0.0;
    let mut mu_b = 0.0;
    for i in 0..a.len() {
        mu_a += weights[i] * a[i];
        mu_b += weights[i] * b[i];
    }
    mu_a /= wsum;
    mu_b /= wsum;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for i in 0..a.len() {
        let da = a[i] - mu_a;
        let db = b[i] - mu_b;
        var_a += weights[i] * da * da;
        var_b += weights[i] * db * db;
        cov += weights[i] * da * db;
    }
    var_a /= wsum;
    var_b /= wsum;
    cov /= wsum;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Bilinear sample of an `(h, w, c)` image at a fractional position.
///
/// Returns `None` when the sample footprint leaves the image.
pub fn bilinear_sample(img: &[f64], h: usize, w: usize, c: usize, y: f64, x: f64, ch: usize) -> Option<f64> {
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return None;
    }
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let p = |yy: usize, xx: usize| img[(yy * w + xx) * c + ch];
    Some(
        p(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + p(y0, x1) * (1.0 - fy) * fx
            + p(y1, x0) * fy * (1.0 - fx)
            + p(y1, x1) * fy * fx,
    )
}

/// Direct warp-error oracle: mean squared difference between `frame_t1` and
/// `frame_t` warped by `flow`, over visible in-bounds pixels.
///
/// `flow` is `(h, w, 2)` storing `(dy, dx)` per pixel; `occlusion` marks
/// pixels to exclude with `1`.
pub fn warp_error(
    frame_t: &[f64],
    frame_t1: &[f64],
    h: usize,
    w: usize,
    c: usize,
    flow: &[f64],
    occlusion: &[f64],
) -> f64 {
    assert_eq!(frame_t.len(), h * w * c);
    assert_eq!(frame_t1.len(), h * w * c);
    assert_eq!(flow.len(), h * w * 2);
    assert_eq!(occlusion.len(), h * w);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if occlusion[y * w + x] != 0.0 {
                continue;
            }
            let sy = y as f64 + flow[(y * w + x) * 2];
            let sx = x as f64 + flow[(y * w + x) * 2 + 1];
            let mut ok = true;
            let mut pix = 0.0;
            for ch in 0..c {
                match bilinear_sample(frame_t, h, w, c, sy, sx, ch) {
                    Some(v) => {
                        let d = frame_t1[(y * w + x) * c + ch] - v;
                        pix += d * d;
                    }
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                acc += pix;
                count += c;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}
